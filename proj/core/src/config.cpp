#include "pbp/config.hpp"

#include "json.hpp"
#include "pbp/errors.hpp"

namespace pbp {

namespace {

std::size_t count_value(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_unsigned()) throw ParameterError("config key '" + key + "' must be a nonnegative integer");
  return v.get<std::size_t>();
}

}  // namespace

std::string_view to_string(Regularizer r) {
  switch (r) {
    case Regularizer::ct: return "ct";
    case Regularizer::ot: return "ot";
    case Regularizer::none: return "none";
  }
  return "ct";
}

Regularizer parse_regularizer(std::string_view text) {
  if (text == "ct") return Regularizer::ct;
  if (text == "ot") return Regularizer::ot;
  if (text == "none") return Regularizer::none;
  throw ParameterError("unknown regularizer '" + std::string(text) + "' (expected ct, ot or none)");
}

std::string_view to_string(PredictMode m) {
  return m == PredictMode::sample ? "sample" : "mean-latent";
}

PredictMode parse_predict_mode(std::string_view text) {
  if (text == "sample") return PredictMode::sample;
  if (text == "mean-latent") return PredictMode::mean_latent;
  throw ParameterError("unknown prediction mode '" + std::string(text) + "' (expected sample or mean-latent)");
}

void RunConfig::validate() const {
  if (!(tau > 0.0)) throw ParameterError("tau must be positive");
  if (!(eta >= 0.0)) throw ParameterError("eta must be nonnegative");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("lambda must lie in [0, 1]");
  if (samples < 1) throw ParameterError("samples must be at least 1");
  if (heads < 1) throw ParameterError("heads must be at least 1");
  if (epochs < 1) throw ParameterError("epochs must be at least 1");
  if (batch_size < 1) throw ParameterError("batch_size must be at least 1");
  if (!(base_lr >= 0.0) || !(warmup_lr >= 0.0)) throw ParameterError("learning rates must be nonnegative");
  if (!(kl_weight >= 0.0)) throw ParameterError("kl_weight must be nonnegative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("momentum must lie in [0, 1)");
  if (!(sinkhorn.epsilon > 0.0)) throw ParameterError("sinkhorn.epsilon must be positive");
  if (sinkhorn.max_iters < 1) throw ParameterError("sinkhorn.max_iters must be at least 1");
  if (!(sinkhorn.tol > 0.0)) throw ParameterError("sinkhorn.tol must be positive");
}

void apply_json(RunConfig& c, std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParameterError("config must be a JSON object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& key = it.key();
      const auto& v = it.value();
      if (key == "tau") c.tau = v.get<double>();
      else if (key == "eta") c.eta = v.get<double>();
      else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "samples") c.samples = count_value(v, key);
      else if (key == "prompt_length") c.prompt_length = count_value(v, key);
      else if (key == "heads") c.heads = count_value(v, key);
      else if (key == "base_lr") c.base_lr = v.get<double>();
      else if (key == "warmup_epochs") c.warmup_epochs = count_value(v, key);
      else if (key == "warmup_lr") c.warmup_lr = v.get<double>();
      else if (key == "epochs") c.epochs = count_value(v, key);
      else if (key == "batch_size") c.batch_size = count_value(v, key);
      else if (key == "seed") c.seed = count_value(v, key);
      else if (key == "kl_weight") c.kl_weight = v.get<double>();
      else if (key == "detach_p") c.detach_p = v.get<bool>();
      else if (key == "regularizer") c.regularizer = parse_regularizer(v.get<std::string>());
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "literal_kl_sign") c.literal_kl_sign = v.get<bool>();
      else if (key == "deterministic_prompts") c.deterministic_prompts = v.get<bool>();
      else if (key == "predict_mode") c.predict_mode = parse_predict_mode(v.get<std::string>());
      else if (key == "sinkhorn") {
        if (!v.is_object()) throw ParameterError("config key 'sinkhorn' must be an object");
        for (auto s = v.begin(); s != v.end(); ++s) {
          if (s.key() == "epsilon") c.sinkhorn.epsilon = s.value().get<double>();
          else if (s.key() == "max_iters") c.sinkhorn.max_iters = s.value().get<int>();
          else if (s.key() == "tol") c.sinkhorn.tol = s.value().get<double>();
          else throw ParameterError("unknown sinkhorn config key '" + s.key() + "'");
        }
      } else {
        throw ParameterError("unknown config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("config value has the wrong type: ") + e.what());
  }
}

std::string to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["tau"] = c.tau;
  j["eta"] = c.eta;
  j["lambda"] = c.lambda;
  j["samples"] = c.samples;
  j["prompt_length"] = c.prompt_length;
  j["heads"] = c.heads;
  j["base_lr"] = c.base_lr;
  j["warmup_epochs"] = c.warmup_epochs;
  j["warmup_lr"] = c.warmup_lr;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["kl_weight"] = c.kl_weight;
  j["detach_p"] = c.detach_p;
  j["regularizer"] = std::string(to_string(c.regularizer));
  j["momentum"] = c.momentum;
  j["literal_kl_sign"] = c.literal_kl_sign;
  j["deterministic_prompts"] = c.deterministic_prompts;
  j["predict_mode"] = std::string(to_string(c.predict_mode));
  j["sinkhorn"] = {{"epsilon", c.sinkhorn.epsilon}, {"max_iters", c.sinkhorn.max_iters}, {"tol", c.sinkhorn.tol}};
  return j.dump(2);
}

}  // namespace pbp
