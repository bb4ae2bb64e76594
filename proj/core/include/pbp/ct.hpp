#pragma once

// Conditional transport between an image's patch distribution
// P = Σ_m (1/M) δ_{u_m} and the prompt distribution Q = Σ_c p_c δ_{g_c}.
//
// Both plans are available in closed form:
//
//   π(g_c | u_m) = p_c exp(u_mᵀg_c) / Σ_c' p_c' exp(u_mᵀg_c')        (patch → prompt)
//   π(u_m | g_c) = exp(g_cᵀu_m) / Σ_m' exp(g_cᵀu_m')                  (prompt → patch)
//
// and the loss is λ·L_{u→g} + (1−λ)·L_{g→u} with cost 1 − cosine.
// Supports are expected on the unit sphere, which bounds every exponent to
// [−1, 1]; the plans are still evaluated with max-shifted exponentials.

#include <cstddef>
#include <span>
#include <vector>

#include "pbp/diff.hpp"

namespace pbp::ct {

using diff::Tensor;

enum class Direction { patch_to_prompt, prompt_to_patch };

struct TransportPlan {
  Direction direction = Direction::patch_to_prompt;
  // patch_to_prompt: M×C, rows condition on patches.
  // prompt_to_patch: C×M, rows condition on prompts.
  Tensor plan;
  // Cost in the same orientation as `plan`, entries 1 − cosine ∈ [0, 2].
  Tensor cost;
};

// Softmax over cosine similarities between the image feature and every
// prompt embedding, divided by the temperature.
Tensor class_probs(const Tensor& global_feature, const Tensor& prompts, double temperature);
Tensor class_log_probs(const Tensor& global_feature, const Tensor& prompts, double temperature);

// M×C matrix of 1 − cosine(u_m, g_c).
Tensor cost_matrix(const Tensor& patches, const Tensor& prompts);

TransportPlan plan_patch_to_prompt(const Tensor& patches, const Tensor& prompts, const Tensor& weights);
TransportPlan plan_prompt_to_patch(const Tensor& patches, const Tensor& prompts);

struct CtTerms {
  Tensor patch_to_prompt;  // L_{u→g}
  Tensor prompt_to_patch;  // L_{g→u}
  Tensor total;            // λ·L_{u→g} + (1−λ)·L_{g→u}
};

CtTerms ct_terms(const Tensor& patches, const Tensor& prompts, const Tensor& weights, double lambda);
Tensor ct_loss(const Tensor& patches, const Tensor& prompts, const Tensor& weights, double lambda);

// ---- entropic optimal transport (ablation baseline) -------------------------

struct SinkhornOptions {
  double epsilon = 0.05;
  int max_iters = 200;
  double tol = 1e-6;
};

struct SinkhornResult {
  Tensor plan;       // rows × cols, constant (no gradient)
  int iterations = 0;
  double residual = 0.0;  // max marginal violation of the returned plan
};

// Log-domain Sinkhorn for min ⟨P, cost⟩ − ε H(P) s.t. P1 = a, Pᵀ1 = b.
// Throws ConvergenceError if the residual is still above tol after
// max_iters iterations.
SinkhornResult sinkhorn_plan(const Tensor& cost, std::span<const double> a, std::span<const double> b,
                             const SinkhornOptions& options = {});

// ⟨plan, cost⟩ with the plan held fixed; differentiable through the cost.
Tensor transport_cost(const Tensor& cost, const Tensor& plan);

}  // namespace pbp::ct
