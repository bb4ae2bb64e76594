#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "pbp/ct.hpp"

namespace pbp {

enum class Regularizer { ct, ot, none };
enum class PredictMode { sample, mean_latent };

std::string_view to_string(Regularizer r);
Regularizer parse_regularizer(std::string_view text);
std::string_view to_string(PredictMode m);
PredictMode parse_predict_mode(std::string_view text);

// Every hyperparameter of a run. Defaults: SGD at lr 2e-3 with a cosine
// schedule after one constant warmup epoch at 1e-5, batch 1, prompt length 4.
struct RunConfig {
  double tau = 0.01;
  double eta = 0.01;
  double lambda = 0.5;
  std::size_t samples = 20;
  std::size_t prompt_length = 4;
  std::size_t heads = 8;
  double base_lr = 2e-3;
  std::size_t warmup_epochs = 1;
  double warmup_lr = 1e-5;
  std::size_t epochs = 50;
  std::size_t batch_size = 1;
  std::uint64_t seed = 1;
  double kl_weight = 1.0;
  bool detach_p = false;
  Regularizer regularizer = Regularizer::ct;
  double momentum = 0.0;
  // Subtract the KL term instead of adding it.
  bool literal_kl_sign = false;
  // ε ≡ 0 during training: every latent equals its posterior mean.
  bool deterministic_prompts = false;
  PredictMode predict_mode = PredictMode::sample;
  ct::SinkhornOptions sinkhorn{};

  // Throws ParameterError on the first violated invariant.
  void validate() const;
};

// JSON mirrors the field names above; "sinkhorn" is a nested object with
// "epsilon", "max_iters", "tol". Keys absent from `json_text` keep the
// value already in `config`. Unknown keys are rejected.
void apply_json(RunConfig& config, std::string_view json_text);
std::string to_json(const RunConfig& config);

}  // namespace pbp
