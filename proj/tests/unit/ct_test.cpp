#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "pbp/ct.hpp"
#include "pbp/errors.hpp"
#include "pbp/plan_export.hpp"

namespace d = pbp::diff;
namespace ct = pbp::ct;
using d::Tensor;

namespace {

struct Instance {
  std::size_t m, c, dim;
  naive::Vec u, g, p;
};

Instance random_instance(std::mt19937_64& rng, std::size_t m, std::size_t c, std::size_t dim) {
  Instance in{m, c, dim, naive::random_unit_rows(rng, m, dim), naive::random_unit_rows(rng, c, dim), {}};
  std::uniform_real_distribution<double> w(0.05, 1.0);
  in.p.resize(c);
  double s = 0.0;
  for (auto& x : in.p) s += (x = w(rng));
  for (auto& x : in.p) x /= s;
  return in;
}

Tensor mat(const naive::Vec& v, std::size_t r, std::size_t c, bool grad = false) {
  return Tensor::matrix(r, c, v, grad);
}

}  // namespace

TEST(CtLoss, MatchesBruteForceOnRandomInstances) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const auto in = random_instance(rng, 1 + rng() % 12, 1 + rng() % 6, 2 + rng() % 10);
    const double lambda = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto want = naive::conditional_transport(in.u, in.g, in.p, in.m, in.c, in.dim, lambda);
    const auto got = ct::ct_terms(mat(in.u, in.m, in.dim), mat(in.g, in.c, in.dim), Tensor::vector(in.p), lambda);
    ASSERT_NEAR(got.patch_to_prompt.item(), want.patch_to_prompt, 1e-12);
    ASSERT_NEAR(got.prompt_to_patch.item(), want.prompt_to_patch, 1e-12);
    ASSERT_NEAR(got.total.item(), want.total, 1e-12);

    const auto fwd = ct::plan_patch_to_prompt(mat(in.u, in.m, in.dim), mat(in.g, in.c, in.dim), Tensor::vector(in.p));
    const auto bwd = ct::plan_prompt_to_patch(mat(in.u, in.m, in.dim), mat(in.g, in.c, in.dim));
    for (std::size_t i = 0; i < in.m * in.c; ++i) {
      ASSERT_NEAR(fwd.plan.at(i), want.forward[i], 1e-12);
      ASSERT_NEAR(fwd.cost.at(i), want.cost[i], 1e-12);
      ASSERT_NEAR(bwd.plan.at(i), want.backward[i], 1e-12);
    }
  }
}

TEST(CtPlans, RowsSumToOneAndCostsAreBounded) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 100; ++trial) {
    const auto in = random_instance(rng, 9, 5, 6);
    const auto u = mat(in.u, 9, 6), g = mat(in.g, 5, 6);
    const auto fwd = ct::plan_patch_to_prompt(u, g, Tensor::vector(in.p));
    const auto bwd = ct::plan_prompt_to_patch(u, g);
    EXPECT_EQ(bwd.cost.shape(), (d::Shape{5, 9}));
    for (std::size_t i = 0; i < 9; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 5; ++j) s += fwd.plan.at(i, j);
      ASSERT_NEAR(s, 1.0, 1e-12);
    }
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < 9; ++i) s += bwd.plan.at(j, i);
      ASSERT_NEAR(s, 1.0, 1e-12);
    }
    for (double x : fwd.cost.values()) {
      ASSERT_GE(x, -1e-15);
      ASSERT_LE(x, 2.0 + 1e-15);
    }
  }
}

TEST(CtCost, IdenticalOppositeAndOrthogonal) {
  const auto u = mat({1, 0, -1, 0, 0, 1}, 3, 2);
  const auto g = mat({1, 0}, 1, 2);
  const auto c = ct::cost_matrix(u, g);
  EXPECT_NEAR(c.at(0), 0.0, 1e-15);
  EXPECT_NEAR(c.at(1), 2.0, 1e-15);
  EXPECT_NEAR(c.at(2), 1.0, 1e-15);
}

TEST(CtPlans, ZeroClassWeightGetsNoForwardMass) {
  std::mt19937_64 rng(23);
  const auto in = random_instance(rng, 4, 2, 3);
  const auto fwd = ct::plan_patch_to_prompt(mat(in.u, 4, 3), mat(in.g, 2, 3), Tensor::vector({1.0, 0.0}));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(fwd.plan.at(i, 0), 1.0);
    EXPECT_EQ(fwd.plan.at(i, 1), 0.0);
  }
}

TEST(CtPlans, UniformWeightsReduceToPlainSoftmax) {
  std::mt19937_64 rng(24);
  const auto in = random_instance(rng, 5, 3, 4);
  const auto u = mat(in.u, 5, 4), g = mat(in.g, 3, 4);
  const auto fwd = ct::plan_patch_to_prompt(u, g, Tensor::vector({1.0 / 3, 1.0 / 3, 1.0 / 3}));
  const auto plain = d::softmax_stable(d::matmul(u, d::transpose(g)));
  for (std::size_t i = 0; i < 15; ++i) EXPECT_NEAR(fwd.plan.at(i), plain.at(i), 1e-15);
}

TEST(CtPlans, ReversePlanWorkedExample) {
  // g·u_1 = 1, g·u_2 = 0  →  π(u_1 | g) = e/(e+1)
  const auto bwd = ct::plan_prompt_to_patch(mat({1, 0, 0, 1}, 2, 2), mat({1, 0}, 1, 2));
  EXPECT_NEAR(bwd.plan.at(0), 0.7310585786300049, 1e-12);
  EXPECT_NEAR(bwd.plan.at(1), 0.2689414213699951, 1e-12);
}

TEST(CtLoss, LambdaEndpointsSelectOneDirection) {
  std::mt19937_64 rng(25);
  const auto in = random_instance(rng, 6, 3, 5);
  const auto u = mat(in.u, 6, 5), g = mat(in.g, 3, 5);
  const auto p = Tensor::vector(in.p);
  const auto terms = ct::ct_terms(u, g, p, 0.5);
  EXPECT_EQ(ct::ct_loss(u, g, p, 1.0).item(), terms.patch_to_prompt.item());
  EXPECT_EQ(ct::ct_loss(u, g, p, 0.0).item(), terms.prompt_to_patch.item());
  EXPECT_NEAR(terms.total.item(), 0.5 * (terms.patch_to_prompt.item() + terms.prompt_to_patch.item()), 1e-15);
}

TEST(CtLoss, InvalidArgumentsThrow) {
  const auto u = mat({1, 0}, 1, 2), g = mat({0, 1}, 1, 2);
  const auto p = Tensor::vector({1.0});
  EXPECT_THROW(ct::ct_loss(u, g, p, 1.5), pbp::ParameterError);
  EXPECT_THROW(ct::ct_loss(u, g, p, -0.1), pbp::ParameterError);
  EXPECT_THROW(ct::ct_loss(u, g, Tensor::vector({-1.0}), 0.5), pbp::ParameterError);
  EXPECT_THROW(ct::ct_loss(u, g, Tensor::vector({0.5, 0.5}), 0.5), pbp::DimensionError);
  EXPECT_THROW(ct::ct_loss(u, mat({0, 1, 0}, 1, 3), p, 0.5), pbp::DimensionError);
}

TEST(ClassProbs, WorkedExamples) {
  const auto f = Tensor::vector({1.0, 0.0});
  // identical prompts: uniform
  const auto same = ct::class_probs(f, mat({0, 1, 0, 1}, 2, 2), 0.5);
  EXPECT_NEAR(same.at(0), 0.5, 1e-15);
  // cos 1 vs cos 0 at τ = 1: e/(e+1)
  const auto a = ct::class_probs(f, mat({2, 0, 0, 3}, 2, 2), 1.0);
  EXPECT_NEAR(a.at(0), 0.7310585786300049, 1e-12);
  // a cosine gap of 0.1 at τ = 0.01 is a factor of e^10
  const double t = std::acos(0.9);
  const auto b = ct::class_probs(f, mat({1, 0, std::cos(t), std::sin(t)}, 2, 2), 0.01);
  EXPECT_NEAR(b.at(0) / b.at(1), std::exp(10.0), 1e-6 * std::exp(10.0));
  EXPECT_NEAR(b.at(0) + b.at(1), 1.0, 1e-15);
}

TEST(ClassProbs, MatchesOracleAndLogProbs) {
  std::mt19937_64 rng(26);
  for (int trial = 0; trial < 50; ++trial) {
    const auto f = naive::random_normal(rng, 6);
    const auto g = naive::random_normal(rng, 24);
    const auto want = naive::class_probs(f, g, 4, 6, 0.07);
    const auto got = ct::class_probs(Tensor::vector(f), mat(g, 4, 6), 0.07);
    const auto logp = ct::class_log_probs(Tensor::vector(f), mat(g, 4, 6), 0.07);
    for (std::size_t c = 0; c < 4; ++c) {
      ASSERT_NEAR(got.at(c), want[c], 1e-12);
      ASSERT_NEAR(std::exp(logp.at(c)), want[c], 1e-12);
    }
  }
}

TEST(ClassProbs, NonPositiveTemperatureThrows) {
  const auto f = Tensor::vector({1.0, 0.0});
  const auto g = mat({1, 0}, 1, 2);
  EXPECT_THROW(ct::class_probs(f, g, 0.0), pbp::ParameterError);
  EXPECT_THROW(ct::class_log_probs(f, g, -1.0), pbp::ParameterError);
}

TEST(ClassProbs, InvariantToFeatureScale) {
  std::mt19937_64 rng(27);
  const auto f = naive::random_normal(rng, 5);
  const auto g = naive::random_normal(rng, 15);
  auto f3 = f;
  for (auto& x : f3) x *= 3.0;
  auto g7 = g;
  for (auto& x : g7) x *= 0.2;
  const auto a = ct::class_probs(Tensor::vector(f), mat(g, 3, 5), 0.1);
  const auto b = ct::class_probs(Tensor::vector(f3), mat(g7, 3, 5), 0.1);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a.at(c), b.at(c), 1e-12);
  const auto ca = ct::cost_matrix(mat(f, 1, 5), mat(g, 3, 5));
  const auto cb = ct::cost_matrix(mat(f3, 1, 5), mat(g7, 3, 5));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(ca.at(c), cb.at(c), 1e-12);
}

TEST(CtLoss, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(28);
  for (int trial = 0; trial < 10; ++trial) {
    const auto in = random_instance(rng, 5, 3, 4);
    auto u = mat(in.u, 5, 4, true);
    auto g = mat(in.g, 3, 4, true);
    auto p = Tensor::vector(in.p, true);
    const double lambda = 0.3;
    const auto f = [&] { return ct::ct_loss(u, g, p, lambda).item(); };
    ct::ct_loss(u, g, p, lambda).backward();
    EXPECT_LT(fixtures::relative_error(fixtures::numeric_grad(u, f), u.grad()), 1e-6);
    EXPECT_LT(fixtures::relative_error(fixtures::numeric_grad(g, f), g.grad()), 1e-6);
    EXPECT_LT(fixtures::relative_error(fixtures::numeric_grad(p, f), p.grad()), 1e-6);
  }
}

TEST(Sinkhorn, ZeroCostGivesTheProductCoupling) {
  const std::vector<double> a{0.2, 0.3, 0.5}, b{0.6, 0.4};
  const auto r = ct::sinkhorn_plan(Tensor::zeros({3, 2}), a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(r.plan.at(i, j), a[i] * b[j], 1e-12);
  EXPECT_LE(r.residual, 1e-6);
}

TEST(Sinkhorn, SmallEpsilonConcentratesOnTheCheapAssignment) {
  const std::vector<double> a{0.5, 0.5}, b{0.5, 0.5};
  const auto r = ct::sinkhorn_plan(mat({0, 1, 1, 0}, 2, 2), a, b, {0.01, 200, 1e-6});
  EXPECT_LT(r.plan.at(0, 1), 0.05);
  EXPECT_LT(r.plan.at(1, 0), 0.05);
  EXPECT_NEAR(r.plan.at(0, 0), 0.5, 1e-6);
}

TEST(Sinkhorn, ResidualWithinToleranceOnRandomCosts) {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 50; ++trial) {
    const auto in = random_instance(rng, 16, 8, 6);
    const auto cost = ct::cost_matrix(mat(in.u, 16, 6), mat(in.g, 8, 6));
    const std::vector<double> a(16, 1.0 / 16);
    const auto r = ct::sinkhorn_plan(cost, a, in.p, {0.05, 5000, 1e-6});
    ASSERT_LE(r.residual, 1e-6);
    ASSERT_LE(r.iterations, 5000);
    double total = 0.0;
    for (double x : r.plan.values()) total += x;
    ASSERT_NEAR(total, 1.0, 1e-5);
  }
}

TEST(Sinkhorn, IterationBudgetExhaustionThrows) {
  std::mt19937_64 rng(30);
  const auto in = random_instance(rng, 8, 4, 5);
  const auto cost = ct::cost_matrix(mat(in.u, 8, 5), mat(in.g, 4, 5));
  const std::vector<double> a(8, 1.0 / 8);
  try {
    ct::sinkhorn_plan(cost, a, in.p, {0.05, 1, 1e-12});
    FAIL() << "expected ConvergenceError";
  } catch (const pbp::ConvergenceError& e) {
    EXPECT_EQ(e.iterations(), 1);
    EXPECT_GT(e.residual(), 1e-12);
  }
}

TEST(Sinkhorn, InvalidMarginalsThrow) {
  const auto cost = Tensor::zeros({2, 2});
  const std::vector<double> ok{0.5, 0.5};
  EXPECT_THROW(ct::sinkhorn_plan(cost, std::vector<double>{0.5, 0.6}, ok), pbp::ParameterError);
  EXPECT_THROW(ct::sinkhorn_plan(cost, std::vector<double>{1.5, -0.5}, ok), pbp::ParameterError);
  EXPECT_THROW(ct::sinkhorn_plan(cost, std::vector<double>{1.0}, ok), pbp::DimensionError);
  EXPECT_THROW(ct::sinkhorn_plan(cost, ok, ok, {0.0, 10, 1e-6}), pbp::ParameterError);
}

TEST(Sinkhorn, TransportCostGradientFlowsThroughCostOnly) {
  auto cost = mat({0.1, 0.7, 0.4, 0.2}, 2, 2, true);
  auto plan = mat({0.3, 0.2, 0.1, 0.4}, 2, 2, true);
  const auto loss = ct::transport_cost(cost, plan);
  EXPECT_NEAR(loss.item(), 0.03 + 0.14 + 0.04 + 0.08, 1e-15);
  loss.backward();
  EXPECT_EQ(std::vector<double>(cost.grad().begin(), cost.grad().end()), fixtures::values(plan));
  EXPECT_FALSE(plan.has_grad());
}

TEST(PlanExport, CsvLayout) {
  const std::vector<double> v{0.5, 0.25, 1.0 / 3, 1.0};
  EXPECT_EQ(ct::plan_csv(v, 2, 2), "0.5,0.25\n0.333333333,1\n");
  EXPECT_THROW(ct::plan_csv(v, 3, 2), pbp::DimensionError);
}

TEST(PlanExport, HeatmapScalesByMaximum) {
  const std::vector<double> v{0.0, 0.5, 0.25, 1.0};
  EXPECT_EQ(ct::heatmap_pgm(v, 2, 2), "P2\n2 2\n255\n0 128\n64 255\n");
  EXPECT_EQ(ct::heatmap_pgm(std::vector<double>(2, 0.0), 2, 1), "P2\n2 1\n255\n0 0\n");
}

TEST(PlanExport, PatchGrid) {
  EXPECT_EQ(ct::patch_grid(16), (std::pair<std::size_t, std::size_t>{4, 4}));
  EXPECT_EQ(ct::patch_grid(12), (std::pair<std::size_t, std::size_t>{12, 1}));
  EXPECT_EQ(ct::patch_grid(1), (std::pair<std::size_t, std::size_t>{1, 1}));
}

TEST(PlanExport, WriteTextIsAtomic) {
  const auto dir = fixtures::temp_dir("export");
  ct::write_text(dir / "plan.csv", "1,2\n");
  ct::write_text(dir / "plan.csv", "3,4\n");
  std::ifstream in(dir / "plan.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), "3,4\n");
  EXPECT_THROW(ct::write_text(dir / "nope" / "x.csv", "1"), pbp::IoError);
  std::filesystem::remove_all(dir);
}
