#pragma once

// Combined-ELBO training of the prompt learner and Monte Carlo evaluation.
//
// Per step and per class c: draw one ε, form r_c = μ_c + σ_c ⊙ ε, decode a
// prefix, append e_c, encode to g_c. With p = softmax(cos(f(x), g)/τ):
//
//   loss = −log p_y + kl_weight · (1/C) Σ_c KL_c + η · R(U, G, p)
//
// where R is the conditional-transport loss (or the entropic OT cost, or
// nothing). Randomness derives from RunConfig::seed:
//
//   model init      derive(seed, "model")
//   epoch order     derive(seed, "train/order", {epoch})
//   training noise  derive(seed, "train/latent", {step, class})
//   prediction      derive(predict_seed, "predict/latent", {sample, class})
//   evaluation      predict_seed = derive(seed, "eval/image", {image index})

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pbp/bundle.hpp"
#include "pbp/config.hpp"
#include "pbp/errors.hpp"
#include "pbp/spg.hpp"
#include "pbp/vlp.hpp"

namespace pbp::trainer {

using diff::Tensor;

struct LabeledImage {
  Tensor global;        // d
  Tensor patches;       // M×d
  std::size_t label;    // index into TaskData::class_ids
  std::size_t source;   // index of the image in its bundle
};

// A classification task over a subset of a bundle's classes. Labels are
// re-indexed to positions in `class_ids`.
struct TaskData {
  std::vector<std::size_t> class_ids;
  Tensor class_embeddings;  // C×d, rows follow class_ids
  std::vector<LabeledImage> images;

  std::size_t num_classes() const { return class_ids.size(); }
  std::size_t dim() const { return class_embeddings.cols(); }
};

// Keeps images whose label is in `class_ids` (all classes when empty).
TaskData make_task(const vlp::EmbeddingBundle& bundle, std::span<const std::size_t> class_ids = {});

struct LossComponents {
  double nll = 0.0;
  double kl = 0.0;   // mean over classes
  double ct = 0.0;   // regularizer value (CT or OT), 0 when disabled
  double total = 0.0;
  std::optional<double> ot_residual;
  std::optional<int> ot_iterations;
};

struct ElboResult {
  Tensor loss;
  LossComponents components;
  Tensor probs;  // p over the task's classes
};

// One standard-normal d-vector per class.
using ClassNoise = std::vector<std::vector<double>>;

ClassNoise draw_noise(std::uint64_t seed, std::string_view tag, std::uint64_t index,
                      std::size_t classes, std::size_t d);

struct ClassPrompts {
  Tensor embeddings;  // C×d, g_c
  Tensor mean_kl;     // scalar (1/C) Σ KL_c, defined only when requested
};

// `noise == nullptr` selects the posterior means (no sampling).
ClassPrompts encode_class_prompts(const spg::PromptModel& model, const vlp::SyntheticVlp& vlp,
                                  const Tensor& class_embeddings, const ClassNoise* noise, bool with_kl);

ElboResult elbo_loss(const LabeledImage& image, const spg::PromptModel& model,
                     const vlp::SyntheticVlp& vlp, const Tensor& class_embeddings,
                     const RunConfig& cfg, const ClassNoise& noise);

double lr_schedule(std::size_t step, std::size_t steps_per_epoch, const RunConfig& cfg);

// Permutation of [0, n) used for epoch `epoch`.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n);

// Plain SGD with optional heavy-ball momentum.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, double momentum);
  // p ← p − lr · (grad · grad_scale + momentum buffer)
  void step(double lr, double grad_scale = 1.0);
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
};

struct TraceRecord {
  std::size_t step = 0;
  double lr = 0.0;
  LossComponents loss;
};

// One JSON object, no trailing newline. Keys: step, lr, nll, kl, ct, total
// (plus ot_residual, ot_iterations for OT runs).
std::string trace_json(const TraceRecord& record);

class NumericAbort : public Error {
 public:
  // `reason` is set when the forward pass itself failed before a loss
  // existed; the components are then NaN.
  NumericAbort(std::size_t step, LossComponents components, std::string reason = {});
  std::size_t step() const noexcept { return step_; }
  const LossComponents& components() const noexcept { return components_; }
  const std::string& reason() const noexcept { return reason_; }
  std::string diagnostic_json() const;

 private:
  std::size_t step_;
  LossComponents components_;
  std::string reason_;
};

struct TrainResult {
  spg::PromptModel model;
  std::vector<TraceRecord> trace;
  std::size_t steps = 0;
};

using StepCallback = std::function<void(const TraceRecord&)>;

// Algorithm: initialize the model from derive(cfg.seed, "model"), then
// iterate epochs over a seeded permutation of the images in batches of
// cfg.batch_size, one SGD update per batch.
TrainResult train(const TaskData& data, const vlp::SyntheticVlp& vlp, const RunConfig& cfg,
                  const StepCallback& on_step = {});

// Class probabilities averaged over S Monte Carlo prompt draws (or computed
// once from the posterior means in mean-latent mode).
std::vector<double> predict(const LabeledImage& image, const spg::PromptModel& model,
                            const vlp::SyntheticVlp& vlp, const Tensor& class_embeddings,
                            const RunConfig& cfg, std::uint64_t seed);

// Zero-shot classifier that uses the label embeddings themselves as class
// weights (for bundles without a matching text encoder).
std::vector<double> predict_frozen(const LabeledImage& image, const Tensor& class_embeddings, double tau);

double harmonic_mean(double base, double novel);

struct SplitAccuracy {
  double accuracy = 0.0;
  std::map<std::size_t, double> per_class;  // global class id → accuracy
  std::size_t images = 0;
};

// Worker count from PBP_THREADS (default 1).
std::size_t worker_count();

SplitAccuracy evaluate(const TaskData& task, const spg::PromptModel& model, const vlp::SyntheticVlp& vlp,
                       const RunConfig& cfg);
SplitAccuracy evaluate_frozen(const TaskData& task, double tau);

struct Metrics {
  double base = 0.0;
  double novel = 0.0;
  double h = 0.0;
  std::map<std::size_t, double> per_class;
  std::vector<TraceRecord> trace;
};

// Base and new accuracies on `test` (each split classified among its own
// classes), plus the harmonic mean. Splits must be disjoint, or identical
// (degenerate check).
Metrics eval_base_to_new(const spg::PromptModel& model, const vlp::SyntheticVlp& vlp,
                         const vlp::EmbeddingBundle& test, std::span<const std::size_t> base_classes,
                         std::span<const std::size_t> new_classes, const RunConfig& cfg);

}  // namespace pbp::trainer
