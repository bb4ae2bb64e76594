#include "pbp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "pbp/ct.hpp"
#include "pbp/rng.hpp"

namespace pbp::trainer {

namespace {

Tensor floats_to_tensor(std::span<const float> values, diff::Shape shape) {
  return Tensor::from(std::move(shape), std::vector<double>(values.begin(), values.end()));
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

bool finite(const LossComponents& c) {
  return std::isfinite(c.nll) && std::isfinite(c.kl) && std::isfinite(c.ct) && std::isfinite(c.total);
}

nlohmann::ordered_json components_json(const LossComponents& c) {
  // NaN/inf are not representable in JSON; emit them as strings.
  const auto num = [](double v) -> nlohmann::ordered_json {
    if (std::isfinite(v)) return v;
    return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  };
  nlohmann::ordered_json j;
  j["nll"] = num(c.nll);
  j["kl"] = num(c.kl);
  j["ct"] = num(c.ct);
  j["total"] = num(c.total);
  return j;
}

}  // namespace

TaskData make_task(const vlp::EmbeddingBundle& bundle, std::span<const std::size_t> class_ids) {
  TaskData task;
  if (class_ids.empty()) {
    for (std::size_t c = 0; c < bundle.c; ++c) task.class_ids.push_back(c);
  } else {
    task.class_ids.assign(class_ids.begin(), class_ids.end());
  }
  std::set<std::size_t> seen;
  for (auto c : task.class_ids) {
    if (c >= bundle.c) {
      throw ParameterError("class id " + std::to_string(c) + " out of range (bundle has " +
                           std::to_string(bundle.c) + " classes)");
    }
    if (!seen.insert(c).second) throw ParameterError("class id " + std::to_string(c) + " listed twice");
  }

  std::vector<double> table;
  table.reserve(task.class_ids.size() * bundle.d);
  for (auto c : task.class_ids) {
    auto e = bundle.class_embedding(c);
    table.insert(table.end(), e.begin(), e.end());
  }
  task.class_embeddings = Tensor::matrix(task.class_ids.size(), bundle.d, std::move(table));

  for (std::size_t i = 0; i < bundle.images.size(); ++i) {
    const auto& img = bundle.images[i];
    auto it = std::find(task.class_ids.begin(), task.class_ids.end(), img.label);
    if (it == task.class_ids.end()) continue;
    task.images.push_back({floats_to_tensor(img.global, {bundle.d}),
                           floats_to_tensor(img.patches, {bundle.m, bundle.d}),
                           static_cast<std::size_t>(it - task.class_ids.begin()), i});
  }
  return task;
}

ClassNoise draw_noise(std::uint64_t seed, std::string_view tag, std::uint64_t index, std::size_t classes,
                      std::size_t d) {
  ClassNoise noise(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    Rng rng(seed, tag, {index, c});
    noise[c] = rng.normals(d);
  }
  return noise;
}

ClassPrompts encode_class_prompts(const spg::PromptModel& model, const vlp::SyntheticVlp& vlp,
                                  const Tensor& class_embeddings, const ClassNoise* noise, bool with_kl) {
  const std::size_t classes = class_embeddings.rows();
  const std::size_t d = class_embeddings.cols();
  if (d != model.dim() || d != vlp.dim()) {
    throw DimensionError("embedding width " + std::to_string(d) + ", model " + std::to_string(model.dim()) +
                         ", encoder " + std::to_string(vlp.dim()));
  }
  if (noise && noise->size() != classes) throw DimensionError("noise must supply one draw per class");

  std::vector<Tensor> prompts;
  prompts.reserve(classes);
  Tensor kl_sum;
  for (std::size_t c = 0; c < classes; ++c) {
    auto label = diff::row(class_embeddings, c);
    auto post = spg::posterior_params(model.posterior, label);
    Tensor latent = noise ? spg::sample_latent(post.mean, post.logvar, (*noise)[c]).latent : post.mean;
    auto prefix = spg::generate_prefix(model.generator, latent);
    prompts.push_back(vlp.encode_text(spg::build_prompt(prefix, label)));
    if (with_kl) {
      auto kl = spg::kl_to_prior(post.mean, post.logvar, label);
      kl_sum = kl_sum.defined() ? diff::add(kl_sum, kl) : kl;
    }
  }
  ClassPrompts out;
  out.embeddings = diff::concat_rows(prompts);
  if (with_kl) out.mean_kl = diff::scale(kl_sum, 1.0 / static_cast<double>(classes));
  return out;
}

ElboResult elbo_loss(const LabeledImage& image, const spg::PromptModel& model, const vlp::SyntheticVlp& vlp,
                     const Tensor& class_embeddings, const RunConfig& cfg, const ClassNoise& noise) {
  const std::size_t classes = class_embeddings.rows();
  if (image.label >= classes) {
    throw ParameterError("label " + std::to_string(image.label) + " out of range (C = " +
                         std::to_string(classes) + ")");
  }
  auto prompts = encode_class_prompts(model, vlp, class_embeddings, &noise, true);
  const auto& g = prompts.embeddings;

  auto log_probs = ct::class_log_probs(image.global, g, cfg.tau);
  auto nll = diff::scale(diff::pick(log_probs, image.label), -1.0);
  auto probs = ct::class_probs(image.global, g, cfg.tau);
  auto weights = cfg.detach_p ? probs.detach() : probs;

  LossComponents comp;
  Tensor reg;
  switch (cfg.regularizer) {
    case Regularizer::ct:
      reg = ct::ct_loss(image.patches, g, weights, cfg.lambda);
      break;
    case Regularizer::ot: {
      auto cost = ct::cost_matrix(image.patches, g);
      const std::size_t m = image.patches.rows();
      std::vector<double> a(m, 1.0 / static_cast<double>(m));
      std::vector<double> b(probs.values().begin(), probs.values().end());
      auto plan = ct::sinkhorn_plan(cost, a, b, cfg.sinkhorn);
      comp.ot_residual = plan.residual;
      comp.ot_iterations = plan.iterations;
      reg = ct::transport_cost(cost, plan.plan);
      break;
    }
    case Regularizer::none:
      reg = Tensor::scalar(0.0);
      break;
  }

  auto kl_term = diff::scale(prompts.mean_kl, cfg.kl_weight);
  auto total = cfg.literal_kl_sign ? diff::sub(nll, kl_term) : diff::add(nll, kl_term);
  total = diff::add(total, diff::scale(reg, cfg.eta));

  comp.nll = nll.item();
  comp.kl = prompts.mean_kl.item();
  comp.ct = reg.item();
  comp.total = total.item();
  return {std::move(total), comp, std::move(probs)};
}

double lr_schedule(std::size_t step, std::size_t steps_per_epoch, const RunConfig& cfg) {
  const std::size_t warmup = cfg.warmup_epochs * steps_per_epoch;
  if (step < warmup) return cfg.warmup_lr;
  const std::size_t total = cfg.epochs * steps_per_epoch;
  double progress = 0.0;
  if (total > warmup + 1) {
    progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup - 1);
  }
  progress = std::clamp(progress, 0.0, 1.0);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed, "train/order", {epoch});
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, double momentum)
    : params_(std::move(params)), momentum_(momentum) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void SgdOptimizer::step(double lr, double grad_scale) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) continue;
    auto values = p.mutable_values();
    auto grad = p.grad();
    auto& vel = velocity_[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      double g = grad[i] * grad_scale;
      if (momentum_ > 0.0) {
        vel[i] = momentum_ * vel[i] + g;
        g = vel[i];
      }
      values[i] -= lr * g;
    }
  }
}

void SgdOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::string trace_json(const TraceRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["lr"] = r.lr;
  const auto comps = components_json(r.loss);
  for (auto it = comps.begin(); it != comps.end(); ++it) j[it.key()] = it.value();
  if (r.loss.ot_residual) j["ot_residual"] = *r.loss.ot_residual;
  if (r.loss.ot_iterations) j["ot_iterations"] = *r.loss.ot_iterations;
  return j.dump();
}

NumericAbort::NumericAbort(std::size_t step, LossComponents components, std::string reason)
    : Error("non-finite loss at step " + std::to_string(step) + (reason.empty() ? "" : ": " + reason)),
      step_(step),
      components_(components),
      reason_(std::move(reason)) {}

std::string NumericAbort::diagnostic_json() const {
  nlohmann::ordered_json j;
  j["error"] = "numeric_abort";
  j["step"] = step_;
  j["components"] = components_json(components_);
  if (!reason_.empty()) j["reason"] = reason_;
  return j.dump();
}

TrainResult train(const TaskData& data, const vlp::SyntheticVlp& vlp, const RunConfig& cfg,
                  const StepCallback& on_step) {
  cfg.validate();
  if (data.images.empty()) throw ParameterError("training set is empty");
  if (data.num_classes() == 0) throw ParameterError("training task has no classes");
  const std::size_t d = data.dim();
  if (d != vlp.dim()) {
    throw DimensionError("data dimension " + std::to_string(d) + " vs encoder " + std::to_string(vlp.dim()));
  }
  if (cfg.prompt_length != vlp.config().b) {
    throw DimensionError("prompt length " + std::to_string(cfg.prompt_length) + " but the text encoder expects " +
                         std::to_string(vlp.config().b));
  }

  TrainResult result{spg::PromptModel::create(d, cfg.prompt_length, cfg.heads, derive_seed(cfg.seed, "model")),
                     {}, 0};
  SgdOptimizer opt(result.model.parameters(), cfg.momentum);

  const std::size_t n = data.images.size();
  const std::size_t batch = cfg.batch_size;
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;
  const std::size_t classes = data.num_classes();
  const double inv_batch = 1.0 / static_cast<double>(batch);
  result.trace.reserve(cfg.epochs * steps_per_epoch);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(cfg.seed, epoch, n);
    for (std::size_t start = 0; start < n; start += batch, ++step) {
      const double lr = lr_schedule(step, steps_per_epoch, cfg);
      const ClassNoise noise = cfg.deterministic_prompts
                                   ? ClassNoise(classes, std::vector<double>(d, 0.0))
                                   : draw_noise(cfg.seed, "train/latent", step, classes, d);
      opt.zero_grad();
      TraceRecord rec{step, lr, {}};
      const std::size_t stop = std::min(n, start + batch);
      for (std::size_t k = start; k < stop; ++k) {
        ElboResult elbo;
        try {
          elbo = elbo_loss(data.images[order[k]], result.model, vlp, data.class_embeddings, cfg, noise);
        } catch (const NumericError& e) {
          const double nan = std::numeric_limits<double>::quiet_NaN();
          throw NumericAbort(step, {nan, nan, nan, nan, std::nullopt, std::nullopt}, e.what());
        }
        if (!finite(elbo.components)) throw NumericAbort(step, elbo.components);
        elbo.loss.backward();
        if (stop - start == 1) {
          rec.loss = elbo.components;
        } else {
          const double w = 1.0 / static_cast<double>(stop - start);
          rec.loss.nll += w * elbo.components.nll;
          rec.loss.kl += w * elbo.components.kl;
          rec.loss.ct += w * elbo.components.ct;
          rec.loss.total += w * elbo.components.total;
          if (elbo.components.ot_residual) {
            rec.loss.ot_residual = std::max(rec.loss.ot_residual.value_or(0.0), *elbo.components.ot_residual);
            rec.loss.ot_iterations = std::max(rec.loss.ot_iterations.value_or(0), *elbo.components.ot_iterations);
          }
        }
      }
      opt.step(lr, stop - start == batch ? inv_batch : 1.0 / static_cast<double>(stop - start));
      result.trace.push_back(rec);
      if (on_step) on_step(rec);
    }
  }
  result.steps = step;
  return result;
}

std::vector<double> predict(const LabeledImage& image, const spg::PromptModel& model, const vlp::SyntheticVlp& vlp,
                            const Tensor& class_embeddings, const RunConfig& cfg, std::uint64_t seed) {
  diff::NoGradGuard no_grad;
  const std::size_t classes = class_embeddings.rows();
  const std::size_t d = class_embeddings.cols();
  if (cfg.predict_mode == PredictMode::mean_latent) {
    auto prompts = encode_class_prompts(model, vlp, class_embeddings, nullptr, false);
    const auto p = ct::class_probs(image.global, prompts.embeddings, cfg.tau);
    return {p.values().begin(), p.values().end()};
  }
  std::vector<double> acc(classes, 0.0);
  for (std::size_t s = 0; s < cfg.samples; ++s) {
    const ClassNoise noise = cfg.deterministic_prompts ? ClassNoise(classes, std::vector<double>(d, 0.0))
                                                       : draw_noise(seed, "predict/latent", s, classes, d);
    auto prompts = encode_class_prompts(model, vlp, class_embeddings, &noise, false);
    const auto p = ct::class_probs(image.global, prompts.embeddings, cfg.tau);
    for (std::size_t c = 0; c < classes; ++c) acc[c] += p.at(c);
  }
  for (auto& v : acc) v /= static_cast<double>(cfg.samples);
  return acc;
}

std::vector<double> predict_frozen(const LabeledImage& image, const Tensor& class_embeddings, double tau) {
  diff::NoGradGuard no_grad;
  const auto p = ct::class_probs(image.global, class_embeddings, tau);
  return {p.values().begin(), p.values().end()};
}

double harmonic_mean(double base, double novel) {
  if (!(base >= 0.0) || !(novel >= 0.0)) throw ParameterError("harmonic mean needs nonnegative accuracies");
  if (base == 0.0 && novel == 0.0) throw ProtocolError("harmonic mean is undefined when both accuracies are zero");
  return 2.0 * base * novel / (base + novel);
}

std::size_t worker_count() {
  if (const char* env = std::getenv("PBP_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

namespace {

template <typename Predictor>
SplitAccuracy score(const TaskData& task, Predictor&& predictor) {
  const std::size_t n = task.images.size();
  std::vector<char> correct(n, 0);
  const std::size_t workers = std::max<std::size_t>(1, std::min(worker_count(), n));
  const auto run = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const auto probs = predictor(task.images[i]);
      correct[i] = argmax(probs) == task.images[i].label ? 1 : 0;
    }
  };
  if (workers == 1) {
    run(0, n);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
      if (lo < hi) pool.emplace_back(run, lo, hi);
    }
    for (auto& t : pool) t.join();
  }

  SplitAccuracy out;
  out.images = n;
  std::vector<std::size_t> hits(task.num_classes(), 0), counts(task.num_classes(), 0);
  std::size_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = task.images[i].label;
    ++counts[y];
    hits[y] += static_cast<std::size_t>(correct[i]);
    total += static_cast<std::size_t>(correct[i]);
  }
  out.accuracy = n ? static_cast<double>(total) / static_cast<double>(n) : 0.0;
  for (std::size_t c = 0; c < task.num_classes(); ++c) {
    if (counts[c]) out.per_class[task.class_ids[c]] = static_cast<double>(hits[c]) / static_cast<double>(counts[c]);
  }
  return out;
}

}  // namespace

SplitAccuracy evaluate(const TaskData& task, const spg::PromptModel& model, const vlp::SyntheticVlp& vlp,
                       const RunConfig& cfg) {
  return score(task, [&](const LabeledImage& img) {
    return predict(img, model, vlp, task.class_embeddings, cfg, derive_seed(cfg.seed, "eval/image", {img.source}));
  });
}

SplitAccuracy evaluate_frozen(const TaskData& task, double tau) {
  return score(task, [&](const LabeledImage& img) { return predict_frozen(img, task.class_embeddings, tau); });
}

Metrics eval_base_to_new(const spg::PromptModel& model, const vlp::SyntheticVlp& vlp,
                         const vlp::EmbeddingBundle& test, std::span<const std::size_t> base_classes,
                         std::span<const std::size_t> new_classes, const RunConfig& cfg) {
  if (base_classes.empty() || new_classes.empty()) throw ProtocolError("base and new splits must be nonempty");
  const std::set<std::size_t> base(base_classes.begin(), base_classes.end());
  const std::set<std::size_t> novel(new_classes.begin(), new_classes.end());
  if (base != novel) {
    for (auto c : novel) {
      if (base.count(c)) {
        throw ProtocolError("class " + std::to_string(c) + " appears in both the base and the new split");
      }
    }
  }
  const auto base_task = make_task(test, base_classes);
  const auto new_task = make_task(test, new_classes);
  const auto b = evaluate(base_task, model, vlp, cfg);
  const auto n = evaluate(new_task, model, vlp, cfg);

  Metrics m;
  m.base = b.accuracy;
  m.novel = n.accuracy;
  m.h = (m.base == 0.0 && m.novel == 0.0) ? 0.0 : harmonic_mean(m.base, m.novel);
  m.per_class = b.per_class;
  m.per_class.insert(n.per_class.begin(), n.per_class.end());
  return m;
}

}  // namespace pbp::trainer
