#include "pbp/ct.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pbp/errors.hpp"

namespace pbp::ct {

namespace {

void require_supports(const Tensor& patches, const Tensor& prompts, const char* op) {
  if (patches.rank() != 2 || prompts.rank() != 2 || patches.cols() != prompts.cols()) {
    throw DimensionError(std::string(op) + ": supports must be matrices of equal width, got " +
                         diff::shape_str(patches.shape()) + " and " + diff::shape_str(prompts.shape()));
  }
}

void require_simplex(const Tensor& weights, std::size_t n, const char* op) {
  if (weights.numel() != n) {
    throw DimensionError(std::string(op) + ": " + std::to_string(n) + " prompts but weights " +
                         diff::shape_str(weights.shape()));
  }
  for (double w : weights.values()) {
    if (!(w >= 0.0)) throw ParameterError(std::string(op) + ": class weights must be nonnegative");
  }
}

void require_marginal(std::span<const double> w, std::size_t n, const char* name) {
  if (w.size() != n) {
    throw DimensionError(std::string("sinkhorn: marginal ") + name + " has extent " +
                         std::to_string(w.size()) + ", expected " + std::to_string(n));
  }
  double s = 0.0;
  for (double x : w) {
    if (!(x >= 0.0)) throw ParameterError(std::string("sinkhorn: marginal ") + name + " has a negative entry");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-9) {
    throw ParameterError(std::string("sinkhorn: marginal ") + name + " sums to " + std::to_string(s));
  }
}

double log_sum_exp(const double* v, std::size_t n, std::size_t stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, v[i * stride]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i * stride] - mx);
  return mx + std::log(s);
}

}  // namespace

Tensor class_probs(const Tensor& global_feature, const Tensor& prompts, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("class_probs: temperature must be positive");
  auto sims = diff::matmul(diff::normalize_rows(prompts),
                           diff::reshape(diff::normalize_rows(global_feature), {global_feature.numel(), 1}));
  return diff::softmax_stable(diff::reshape(sims, {prompts.rows()}), temperature);
}

Tensor class_log_probs(const Tensor& global_feature, const Tensor& prompts, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("class_log_probs: temperature must be positive");
  auto sims = diff::matmul(diff::normalize_rows(prompts),
                           diff::reshape(diff::normalize_rows(global_feature), {global_feature.numel(), 1}));
  return diff::log_softmax(diff::reshape(sims, {prompts.rows()}), temperature);
}

Tensor cost_matrix(const Tensor& patches, const Tensor& prompts) {
  require_supports(patches, prompts, "cost_matrix");
  auto cos = diff::matmul(diff::normalize_rows(patches), diff::transpose(diff::normalize_rows(prompts)));
  return diff::add_scalar(diff::scale(cos, -1.0), 1.0);
}

TransportPlan plan_patch_to_prompt(const Tensor& patches, const Tensor& prompts, const Tensor& weights) {
  require_supports(patches, prompts, "plan_patch_to_prompt");
  require_simplex(weights, prompts.rows(), "plan_patch_to_prompt");
  auto dots = diff::matmul(patches, diff::transpose(prompts));
  return {Direction::patch_to_prompt, diff::weighted_softmax_rows(dots, weights),
          cost_matrix(patches, prompts)};
}

TransportPlan plan_prompt_to_patch(const Tensor& patches, const Tensor& prompts) {
  require_supports(patches, prompts, "plan_prompt_to_patch");
  auto dots = diff::matmul(prompts, diff::transpose(patches));
  return {Direction::prompt_to_patch, diff::softmax_stable(dots), diff::transpose(cost_matrix(patches, prompts))};
}

CtTerms ct_terms(const Tensor& patches, const Tensor& prompts, const Tensor& weights, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("ct_loss: lambda must lie in [0, 1]");
  require_supports(patches, prompts, "ct_loss");
  require_simplex(weights, prompts.rows(), "ct_loss");
  const std::size_t m = patches.rows();

  auto cost = cost_matrix(patches, prompts);  // M×C
  auto forward_plan = diff::weighted_softmax_rows(diff::matmul(patches, diff::transpose(prompts)), weights);
  auto u2g = diff::scale(diff::sum(diff::mul(cost, forward_plan)), 1.0 / static_cast<double>(m));

  auto backward_plan = diff::softmax_stable(diff::matmul(prompts, diff::transpose(patches)));  // C×M
  auto per_prompt = diff::reduce(diff::mul(diff::transpose(cost), backward_plan), diff::ReduceKind::sum, 1);
  auto g2u = diff::dot(diff::reshape(weights, {prompts.rows()}), per_prompt);

  auto total = diff::add(diff::scale(u2g, lambda), diff::scale(g2u, 1.0 - lambda));
  return {std::move(u2g), std::move(g2u), std::move(total)};
}

Tensor ct_loss(const Tensor& patches, const Tensor& prompts, const Tensor& weights, double lambda) {
  return ct_terms(patches, prompts, weights, lambda).total;
}

SinkhornResult sinkhorn_plan(const Tensor& cost, std::span<const double> a, std::span<const double> b,
                             const SinkhornOptions& options) {
  if (cost.rank() != 2) throw DimensionError("sinkhorn: cost must be a matrix");
  if (!(options.epsilon > 0.0)) throw ParameterError("sinkhorn: epsilon must be positive");
  if (options.max_iters < 1) throw ParameterError("sinkhorn: max_iters must be at least 1");
  const std::size_t rows = cost.rows(), cols = cost.cols();
  require_marginal(a, rows, "a");
  require_marginal(b, cols, "b");

  const double eps = options.epsilon;
  const auto c = cost.values();
  std::vector<double> log_a(rows), log_b(cols);
  for (std::size_t i = 0; i < rows; ++i) log_a[i] = std::log(a[i]);
  for (std::size_t j = 0; j < cols; ++j) log_b[j] = std::log(b[j]);

  // Dual potentials; P_ij = exp((f_i + g_j − C_ij)/ε).
  std::vector<double> f(rows, 0.0), g(cols, 0.0), scratch(rows * cols);
  std::vector<double> plan(rows * cols);
  double residual = std::numeric_limits<double>::infinity();
  int it = 0;
  const auto update_plan = [&] {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) plan[i * cols + j] = std::exp((f[i] + g[j] - c[i * cols + j]) / eps);
  };
  const auto marginal_residual = [&] {
    double r = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += plan[i * cols + j];
      r = std::max(r, std::abs(s - a[i]));
    }
    for (std::size_t j = 0; j < cols; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < rows; ++i) s += plan[i * cols + j];
      r = std::max(r, std::abs(s - b[j]));
    }
    return r;
  };

  while (it < options.max_iters) {
    ++it;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) scratch[i * cols + j] = (g[j] - c[i * cols + j]) / eps;
      f[i] = a[i] > 0.0 ? eps * (log_a[i] - log_sum_exp(&scratch[i * cols], cols, 1))
                        : -std::numeric_limits<double>::infinity();
    }
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t i = 0; i < rows; ++i) scratch[i * cols + j] = (f[i] - c[i * cols + j]) / eps;
      g[j] = b[j] > 0.0 ? eps * (log_b[j] - log_sum_exp(&scratch[j], rows, cols))
                        : -std::numeric_limits<double>::infinity();
    }
    update_plan();
    residual = marginal_residual();
    if (residual <= options.tol) break;
  }
  if (!(residual <= options.tol)) {
    throw ConvergenceError("sinkhorn: no convergence after " + std::to_string(it) +
                               " iterations, marginal residual " + std::to_string(residual),
                           residual, it);
  }
  return {Tensor::matrix(rows, cols, std::move(plan)), it, residual};
}

Tensor transport_cost(const Tensor& cost, const Tensor& plan) {
  if (cost.shape() != plan.shape()) {
    throw DimensionError("transport_cost: cost " + diff::shape_str(cost.shape()) + " vs plan " +
                         diff::shape_str(plan.shape()));
  }
  return diff::sum(diff::mul(cost, plan.detach()));
}

}  // namespace pbp::ct
