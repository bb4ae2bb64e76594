#pragma once

// Stochastic prompt generation.
//
// For every class c a latent r_c is drawn from a label-conditioned diagonal
// Gaussian q(r_c | c) = N(μ(e_c), diag exp(logvar(e_c))) and decoded into b
// prefix tokens by one multi-head self-attention block over
//
//   s_c = [r_c + PE_1, w_1 + PE_2, ..., w_b + PE_{b+1}],
//
// with a residual connection. The first output position is discarded; the
// remaining b rows followed by the frozen label embedding form the prompt.
// The prior is N(e_c, I).

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pbp/diff.hpp"

namespace pbp::spg {

using diff::Tensor;

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;
inline constexpr double kPromptInitStd = 0.02;

// Row-vector convention: y = x·W + b.
struct VariationalPosterior {
  Tensor mean_weight;    // d×d
  Tensor mean_bias;      // d
  Tensor logvar_weight;  // d×d
  Tensor logvar_bias;    // d

  // μ-net starts at the identity (μ = e_c), logvar-net at zero (σ² = 1),
  // i.e. the posterior starts on the prior.
  static VariationalPosterior init(std::size_t d);
};

struct PosteriorParams {
  Tensor mean;
  Tensor logvar;  // clamped to [kLogvarMin, kLogvarMax]
};

PosteriorParams posterior_params(const VariationalPosterior& post, const Tensor& label_embedding);

struct LatentSample {
  Tensor latent;              // r_c = μ + exp(logvar/2) ⊙ ε
  std::vector<double> noise;  // ε
};

// `noise` is a standard-normal draw of the same extent; it never receives
// gradient.
LatentSample sample_latent(const Tensor& mean, const Tensor& logvar, std::span<const double> noise);

// KL[N(mean, diag e^logvar) || N(label_embedding, I)] in closed form.
Tensor kl_to_prior(const Tensor& mean, const Tensor& logvar, const Tensor& label_embedding);

struct PromptGenParams {
  std::size_t heads = 8;
  Tensor prefix;      // b×d, w
  Tensor positional;  // (b+1)×d, PE
  Tensor query;       // d×d
  Tensor key;         // d×d
  Tensor value;       // d×d
  Tensor output;      // d×d

  std::size_t prompt_length() const { return prefix.rows(); }
  std::size_t dim() const { return positional.cols(); }

  // prefix, positional and all projections ~ N(0, 0.02²).
  static PromptGenParams init(std::size_t d, std::size_t b, std::size_t heads, std::uint64_t seed);
};

// Returns the b×d class-specific prefix v_c.
Tensor generate_prefix(const PromptGenParams& gen, const Tensor& latent);

// [v_c ; e_c] as a (b+1)×d token matrix, label token last.
Tensor build_prompt(const Tensor& prefix, const Tensor& label_embedding);

// All learnable state of the prompt learner.
struct PromptModel {
  VariationalPosterior posterior;
  PromptGenParams generator;

  std::size_t dim() const { return generator.dim(); }
  std::size_t prompt_length() const { return generator.prompt_length(); }
  std::size_t heads() const { return generator.heads; }

  static PromptModel create(std::size_t d, std::size_t b, std::size_t heads, std::uint64_t seed);

  // Parameters in the canonical order used by checkpoints and optimizers.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void zero_grad() const;
  // Deep copy with fresh leaves.
  PromptModel clone() const;
};

}  // namespace pbp::spg
