#include "pbp/spg.hpp"

#include <cmath>

#include "pbp/errors.hpp"
#include "pbp/rng.hpp"

namespace pbp::spg {

namespace {

void require_vector(const Tensor& t, std::size_t d, const char* what) {
  if (t.rank() != 1 || t.numel() != d) {
    throw DimensionError(std::string(what) + ": expected a vector of extent " + std::to_string(d) +
                         ", got " + diff::shape_str(t.shape()));
  }
}

Tensor gaussian(Rng& rng, diff::Shape shape, double stddev) {
  const auto n = diff::shape_numel(shape);
  return Tensor::from(std::move(shape), rng.normals(n, 0.0, stddev), true);
}

}  // namespace

VariationalPosterior VariationalPosterior::init(std::size_t d) {
  return VariationalPosterior{Tensor::identity(d, true), Tensor::zeros({d}, true),
                              Tensor::zeros({d, d}, true), Tensor::zeros({d}, true)};
}

PosteriorParams posterior_params(const VariationalPosterior& post, const Tensor& label_embedding) {
  const std::size_t d = post.mean_weight.rows();
  require_vector(label_embedding, d, "posterior_params");
  auto mean = diff::add(diff::matmul(label_embedding, post.mean_weight), post.mean_bias);
  auto raw = diff::add(diff::matmul(label_embedding, post.logvar_weight), post.logvar_bias);
  return {std::move(mean), diff::clamp(raw, kLogvarMin, kLogvarMax)};
}

LatentSample sample_latent(const Tensor& mean, const Tensor& logvar, std::span<const double> noise) {
  if (mean.shape() != logvar.shape() || noise.size() != mean.numel()) {
    throw DimensionError("sample_latent: mean " + diff::shape_str(mean.shape()) + ", logvar " +
                         diff::shape_str(logvar.shape()) + ", noise of extent " +
                         std::to_string(noise.size()));
  }
  std::vector<double> eps(noise.begin(), noise.end());
  auto sigma = diff::exp(diff::scale(logvar, 0.5));
  auto latent = diff::add(mean, diff::mul(sigma, Tensor::from(mean.shape(), eps)));
  return {std::move(latent), std::move(eps)};
}

Tensor kl_to_prior(const Tensor& mean, const Tensor& logvar, const Tensor& label_embedding) {
  if (mean.shape() != logvar.shape() || mean.shape() != label_embedding.shape()) {
    throw DimensionError("kl_to_prior: mismatched shapes " + diff::shape_str(mean.shape()) + ", " +
                         diff::shape_str(logvar.shape()) + ", " +
                         diff::shape_str(label_embedding.shape()));
  }
  // ½ Σ (e^logvar + (μ − e)² − 1 − logvar)
  auto terms = diff::sub(diff::add(diff::exp(logvar), diff::square(diff::sub(mean, label_embedding))),
                         diff::add_scalar(logvar, 1.0));
  return diff::scale(diff::sum(terms), 0.5);
}

PromptGenParams PromptGenParams::init(std::size_t d, std::size_t b, std::size_t heads,
                                      std::uint64_t seed) {
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("head count " + std::to_string(heads) + " does not divide d = " +
                         std::to_string(d));
  }
  Rng rng(seed, "spg/init", {d, b, heads});
  PromptGenParams g;
  g.heads = heads;
  g.prefix = gaussian(rng, {b, d}, kPromptInitStd);
  g.positional = gaussian(rng, {b + 1, d}, kPromptInitStd);
  g.query = gaussian(rng, {d, d}, kPromptInitStd);
  g.key = gaussian(rng, {d, d}, kPromptInitStd);
  g.value = gaussian(rng, {d, d}, kPromptInitStd);
  g.output = gaussian(rng, {d, d}, kPromptInitStd);
  return g;
}

Tensor generate_prefix(const PromptGenParams& gen, const Tensor& latent) {
  const std::size_t d = gen.dim();
  const std::size_t b = gen.prompt_length();
  require_vector(latent, d, "generate_prefix");
  if (gen.heads == 0 || d % gen.heads != 0) throw DimensionError("head count does not divide d");

  std::vector<Tensor> tokens{diff::reshape(latent, {1, d})};
  if (b > 0) tokens.push_back(gen.prefix);
  auto seq = diff::add(diff::concat_rows(tokens), gen.positional);

  auto q = diff::matmul(seq, gen.query);
  auto k = diff::matmul(seq, gen.key);
  auto v = diff::matmul(seq, gen.value);
  const std::size_t head_dim = d / gen.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> heads;
  heads.reserve(gen.heads);
  for (std::size_t h = 0; h < gen.heads; ++h) {
    const std::size_t lo = h * head_dim, hi = lo + head_dim;
    auto qh = diff::slice_cols(q, lo, hi);
    auto kh = diff::slice_cols(k, lo, hi);
    auto vh = diff::slice_cols(v, lo, hi);
    auto scores = diff::scale(diff::matmul(qh, diff::transpose(kh)), inv_sqrt);
    heads.push_back(diff::matmul(diff::softmax_stable(scores), vh));
  }
  auto attended = diff::matmul(diff::concat_cols(heads), gen.output);
  auto out = diff::add(seq, attended);
  return diff::slice_rows(out, 1, b + 1);
}

Tensor build_prompt(const Tensor& prefix, const Tensor& label_embedding) {
  const std::size_t d = label_embedding.numel();
  if (label_embedding.rank() != 1) {
    throw DimensionError("build_prompt: label embedding must be a vector, got " +
                         diff::shape_str(label_embedding.shape()));
  }
  if (prefix.rank() != 2 || prefix.cols() != d) {
    throw DimensionError("build_prompt: prefix " + diff::shape_str(prefix.shape()) +
                         " incompatible with label embedding of extent " + std::to_string(d));
  }
  auto label_row = diff::reshape(label_embedding, {1, d});
  if (prefix.rows() == 0) return diff::concat_rows({label_row});
  return diff::concat_rows({prefix, label_row});
}

PromptModel PromptModel::create(std::size_t d, std::size_t b, std::size_t heads, std::uint64_t seed) {
  return PromptModel{VariationalPosterior::init(d), PromptGenParams::init(d, b, heads, seed)};
}

std::vector<std::pair<std::string, Tensor>> PromptModel::named_parameters() const {
  return {
      {"posterior.mean_weight", posterior.mean_weight},
      {"posterior.mean_bias", posterior.mean_bias},
      {"posterior.logvar_weight", posterior.logvar_weight},
      {"posterior.logvar_bias", posterior.logvar_bias},
      {"generator.prefix", generator.prefix},
      {"generator.positional", generator.positional},
      {"generator.query", generator.query},
      {"generator.key", generator.key},
      {"generator.value", generator.value},
      {"generator.output", generator.output},
  };
}

std::vector<Tensor> PromptModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void PromptModel::zero_grad() const {
  for (auto t : parameters()) t.zero_grad();
}

PromptModel PromptModel::clone() const {
  PromptModel m;
  m.posterior = {posterior.mean_weight.clone(true), posterior.mean_bias.clone(true),
                 posterior.logvar_weight.clone(true), posterior.logvar_bias.clone(true)};
  m.generator.heads = generator.heads;
  m.generator.prefix = generator.prefix.clone(true);
  m.generator.positional = generator.positional.clone(true);
  m.generator.query = generator.query.clone(true);
  m.generator.key = generator.key.clone(true);
  m.generator.value = generator.value.clone(true);
  m.generator.output = generator.output.clone(true);
  return m;
}

}  // namespace pbp::spg
