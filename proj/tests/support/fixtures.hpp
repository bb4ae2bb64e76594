#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <span>
#include <vector>

#include <unistd.h>

#include "naive_model.hpp"
#include "pbp/diff.hpp"
#include "pbp/spg.hpp"

namespace fixtures {

using pbp::diff::Tensor;

inline naive::Vec values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

inline naive::Params to_params(const pbp::spg::PromptModel& m) {
  naive::Params p;
  p.d = m.dim();
  p.b = m.prompt_length();
  p.heads = m.heads();
  p.mean_w = values(m.posterior.mean_weight);
  p.mean_b = values(m.posterior.mean_bias);
  p.lv_w = values(m.posterior.logvar_weight);
  p.lv_b = values(m.posterior.logvar_bias);
  p.prefix = values(m.generator.prefix);
  p.pos = values(m.generator.positional);
  p.wq = values(m.generator.query);
  p.wk = values(m.generator.key);
  p.wv = values(m.generator.value);
  p.wo = values(m.generator.output);
  return p;
}

// Perturbs every parameter so identity/zero initializations do not hide
// errors in individual paths.
inline void jitter(const pbp::spg::PromptModel& m, std::mt19937_64& rng, double sd) {
  std::normal_distribution<double> g(0.0, sd);
  for (auto& [name, t] : m.named_parameters()) {
    auto mutable_t = t;
    for (auto& v : mutable_t.mutable_values()) v += g(rng);
  }
}

// Central-difference gradient of `f` with respect to every entry of `leaf`.
inline std::vector<double> numeric_grad(Tensor leaf, const std::function<double()>& f, double h = 1e-5) {
  auto v = leaf.mutable_values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + h;
    const double up = f();
    v[i] = orig - h;
    const double down = f();
    v[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

// ‖a − b‖ / max(‖a‖, ‖b‖, floor)
inline double relative_error(const std::vector<double>& a, std::span<const double> b, double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("pbp-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixtures
