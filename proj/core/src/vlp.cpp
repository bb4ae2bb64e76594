#include "pbp/vlp.hpp"

#include <cmath>
#include <string>

#include "pbp/errors.hpp"
#include "pbp/rng.hpp"

namespace pbp::vlp {

namespace {

void normalize_in_place(std::vector<double>& v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double n = std::sqrt(ss);
  if (!(n > 0.0)) throw NumericError("synthetic encoder produced a zero vector");
  for (double& x : v) x /= n;
}

std::vector<double> random_unit(Rng& rng, std::size_t d) {
  auto v = rng.normals(d);
  normalize_in_place(v);
  return v;
}

// Orthogonal d×d matrix from Gram-Schmidt on Gaussian rows.
std::vector<double> random_orthogonal(Rng& rng, std::size_t d) {
  std::vector<double> q(d * d);
  for (std::size_t i = 0; i < d; ++i) {
    std::vector<double> v;
    for (;;) {
      v = rng.normals(d);
      for (std::size_t j = 0; j < i; ++j) {
        double proj = 0.0;
        for (std::size_t k = 0; k < d; ++k) proj += v[k] * q[j * d + k];
        for (std::size_t k = 0; k < d; ++k) v[k] -= proj * q[j * d + k];
      }
      double ss = 0.0;
      for (double x : v) ss += x * x;
      if (ss > 1e-12) break;
    }
    normalize_in_place(v);
    for (std::size_t k = 0; k < d; ++k) q[i * d + k] = v[k];
  }
  return q;
}

}  // namespace

SyntheticVlp::SyntheticVlp(VlpConfig config) : config_(config) {
  const std::size_t d = config_.d;
  if (d == 0 || config_.m == 0) throw ParameterError("synthetic VLP needs d >= 1 and m >= 1");
  if (config_.modes == 0) throw ParameterError("synthetic VLP needs at least one mode");
  if (config_.noise_scale < 0.0) throw ParameterError("noise scale must be nonnegative");

  Rng proj_rng(config_.seed, "vlp/image-projection", {d, config_.m, config_.b});
  auto p = random_orthogonal(proj_rng, d);

  Rng text_rng(config_.seed, "vlp/text-projection", {d, config_.m, config_.b});
  const double gain = config_.text_gain * static_cast<double>(config_.b + 1);
  const double jitter = config_.text_distortion / std::sqrt(static_cast<double>(d));
  std::vector<double> t(d * d);
  for (std::size_t i = 0; i < d * d; ++i) t[i] = gain * (config_.text_alignment * p[i] + jitter * text_rng.normal());

  image_projection_ = diff::Tensor::matrix(d, d, std::move(p));
  text_projection_ = diff::Tensor::matrix(d, d, std::move(t));

  Rng common_rng(config_.seed, "vlp/common", {d});
  common_ = random_unit(common_rng, d);
  Rng shift_rng(config_.seed, "vlp/shift", {d});
  shift_ = random_unit(shift_rng, d);
  Rng bg_rng(config_.seed, "vlp/background", {d});
  background_ = random_unit(bg_rng, d);
}

void SyntheticVlp::check_class(std::size_t class_id) const {
  if (class_id >= config_.num_classes) {
    throw ParameterError("class id " + std::to_string(class_id) + " out of range (C = " +
                         std::to_string(config_.num_classes) + ")");
  }
}

std::vector<double> SyntheticVlp::class_center(std::size_t class_id) const {
  check_class(class_id);
  const std::size_t d = config_.d;
  Rng rng(config_.seed, "vlp/class-center", {class_id, d});
  auto specific = random_unit(rng, d);
  const double s = config_.class_similarity;
  std::vector<double> c(d);
  for (std::size_t k = 0; k < d; ++k) c[k] = std::sqrt(s) * common_[k] + std::sqrt(1.0 - s) * specific[k];
  normalize_in_place(c);
  return c;
}

std::vector<double> SyntheticVlp::mode_offset(std::size_t class_id, std::size_t mode_id) const {
  check_class(class_id);
  if (mode_id >= config_.modes) {
    throw ParameterError("mode id " + std::to_string(mode_id) + " out of range (modes = " +
                         std::to_string(config_.modes) + ")");
  }
  Rng rng(config_.seed, "vlp/mode-offset", {class_id, mode_id, config_.d});
  auto o = random_unit(rng, config_.d);
  for (double& x : o) x *= config_.mode_scale;
  return o;
}

std::vector<double> SyntheticVlp::class_embedding(std::size_t class_id) const {
  auto e = class_center(class_id);
  Rng rng(config_.seed, "vlp/label-noise", {class_id, config_.d});
  auto n = random_unit(rng, config_.d);
  for (std::size_t k = 0; k < e.size(); ++k) e[k] += config_.label_noise * n[k];
  normalize_in_place(e);
  return e;
}

ImageEncoding SyntheticVlp::encode_image(std::size_t class_id, std::size_t mode_id,
                                         std::uint64_t noise_seed) const {
  const std::size_t d = config_.d, m = config_.m;
  const auto center = class_center(class_id);
  const auto offset = mode_offset(class_id, mode_id);
  Rng noise(config_.seed, "vlp/patch-noise", {class_id, mode_id, noise_seed});

  const auto& proj = image_projection_.values();
  ImageEncoding out;
  out.patches.assign(m * d, 0.0);
  out.global.assign(d, 0.0);
  std::vector<double> latent(d);
  for (std::size_t p = 0; p < m; ++p) {
    const bool background =
        config_.background_period > 0 && p % config_.background_period == config_.background_period - 1;
    for (std::size_t k = 0; k < d; ++k) {
      const double base = background ? background_[k] : center[k] + offset[k];
      latent[k] = base + config_.shift_scale * shift_[k] + config_.noise_scale * noise.normal();
    }
    std::vector<double> u(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) u[j] += latent[i] * proj[i * d + j];
    normalize_in_place(u);
    for (std::size_t k = 0; k < d; ++k) {
      out.patches[p * d + k] = u[k];
      out.global[k] += u[k];
    }
  }
  for (double& x : out.global) x /= static_cast<double>(m);
  normalize_in_place(out.global);
  return out;
}

diff::Tensor SyntheticVlp::encode_text(const diff::Tensor& prompt_tokens) const {
  const std::size_t expected = config_.b + 1;
  if (prompt_tokens.rank() != 2 || prompt_tokens.shape()[0] != expected ||
      prompt_tokens.shape()[1] != config_.d) {
    throw DimensionError("text encoder expects " + std::to_string(expected) + "x" +
                         std::to_string(config_.d) + " prompt tokens, got " +
                         diff::shape_str(prompt_tokens.shape()));
  }
  auto pooled = diff::reduce(prompt_tokens, diff::ReduceKind::mean, 0);
  auto projected = diff::matmul(pooled, text_projection_);
  return diff::normalize_rows(diff::tanh(projected));
}

SyntheticSplit make_synthetic_dataset(const SyntheticVlp& vlp, std::size_t shots, std::size_t test_shots) {
  const auto& cfg = vlp.config();
  if (shots == 0) throw ParameterError("shots must be at least 1");
  SyntheticSplit out;
  for (EmbeddingBundle* b : {&out.train, &out.test}) {
    b->d = cfg.d;
    b->m = cfg.m;
    b->c = cfg.num_classes;
    b->normalized = true;
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      const auto e = vlp.class_embedding(c);
      b->class_embeddings.insert(b->class_embeddings.end(), e.begin(), e.end());
    }
  }
  const auto fill = [&](EmbeddingBundle& b, std::size_t count, std::uint64_t split) {
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      for (std::size_t k = 0; k < count; ++k) {
        const auto enc = vlp.encode_image(c, k % cfg.modes, mix64(split ^ mix64(c * 1000003ULL + k)));
        b.images.push_back({std::vector<float>(enc.global.begin(), enc.global.end()),
                            std::vector<float>(enc.patches.begin(), enc.patches.end()),
                            static_cast<std::uint32_t>(c)});
      }
    }
  };
  fill(out.train, shots, 1);
  fill(out.test, test_shots, 2);
  return out;
}

}  // namespace pbp::vlp
