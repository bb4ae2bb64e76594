#pragma once

// Plain context-optimization loop: deterministic prompts from the posterior
// means, cross-entropy only, vanilla SGD. Written without the trainer's loss
// or optimizer so the degenerate configuration can be compared against it.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "pbp/ct.hpp"
#include "pbp/rng.hpp"
#include "pbp/trainer.hpp"

namespace coop {

inline double cosine_lr(std::size_t step, std::size_t per_epoch, const pbp::RunConfig& cfg) {
  const std::size_t warm = cfg.warmup_epochs * per_epoch;
  if (step < warm) return cfg.warmup_lr;
  const std::size_t span = cfg.epochs * per_epoch - warm;
  const double t = span > 1 ? std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(span - 1)) : 0.0;
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// Cross-entropy of each of the first `steps` single-image updates.
inline std::vector<double> reference_trace(const pbp::trainer::TaskData& data, const pbp::vlp::SyntheticVlp& vlp,
                                           const pbp::RunConfig& cfg, std::size_t steps) {
  namespace d = pbp::diff;
  const std::size_t n = data.images.size();
  const auto model = pbp::spg::PromptModel::create(data.dim(), cfg.prompt_length, cfg.heads,
                                                   pbp::derive_seed(cfg.seed, "model"));
  std::vector<double> trace;
  std::size_t step = 0;
  for (std::size_t epoch = 0; step < steps; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    pbp::Rng rng(cfg.seed, "train/order", {epoch});
    std::shuffle(order.begin(), order.end(), rng.engine());

    for (std::size_t k = 0; k < n && step < steps; ++k, ++step) {
      const auto& img = data.images[order[k]];
      for (auto p : model.parameters()) p.zero_grad();
      const auto prompts = pbp::trainer::encode_class_prompts(model, vlp, data.class_embeddings, nullptr, false);
      const auto logp = pbp::ct::class_log_probs(img.global, prompts.embeddings, cfg.tau);
      const auto loss = d::scale(d::pick(logp, img.label), -1.0);
      loss.backward();
      trace.push_back(loss.item());
      const double lr = cosine_lr(step, n, cfg);
      for (auto p : model.parameters()) {
        if (!p.has_grad()) continue;
        auto v = p.mutable_values();
        const auto g = p.grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
      }
    }
  }
  return trace;
}

// The trainer configuration that should reduce to the loop above.
inline pbp::RunConfig degenerate(pbp::RunConfig cfg) {
  cfg.eta = 0.0;
  cfg.kl_weight = 0.0;
  cfg.deterministic_prompts = true;
  cfg.batch_size = 1;
  cfg.momentum = 0.0;
  return cfg;
}

}  // namespace coop
