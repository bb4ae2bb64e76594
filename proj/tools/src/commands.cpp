#include "pbp/cli/commands.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pbp/checkpoint.hpp"
#include "pbp/cli/dataset.hpp"
#include "pbp/cli/experiment.hpp"
#include "pbp/ct.hpp"
#include "pbp/errors.hpp"
#include "pbp/plan_export.hpp"
#include "pbp/trainer.hpp"

namespace pbp::cli {

namespace {

using json = nlohmann::ordered_json;

enum class Kind { real, count, boolean, text };

struct ConfigFlag {
  const char* flag;
  const char* key;      // RunConfig JSON key
  const char* nested;   // sub-key inside "sinkhorn", or nullptr
  Kind kind;
  const char* help;
};

// "seed" is handled by --seed / --seeds.
constexpr ConfigFlag kConfigFlags[] = {
    {"--tau", "tau", nullptr, Kind::real, "softmax temperature"},
    {"--eta", "eta", nullptr, Kind::real, "weight of the transport regularizer"},
    {"--lambda", "lambda", nullptr, Kind::real, "patch-to-prompt share of the CT loss, in [0, 1]"},
    {"--samples", "samples", nullptr, Kind::count, "Monte Carlo prompt draws at prediction time"},
    {"--prompt-length", "prompt_length", nullptr, Kind::count, "prefix tokens per prompt"},
    {"--heads", "heads", nullptr, Kind::count, "attention heads in the prompt generator"},
    {"--base-lr", "base_lr", nullptr, Kind::real, "peak learning rate"},
    {"--warmup-epochs", "warmup_epochs", nullptr, Kind::count, "epochs at the constant warmup rate"},
    {"--warmup-lr", "warmup_lr", nullptr, Kind::real, "warmup learning rate"},
    {"--epochs", "epochs", nullptr, Kind::count, "training epochs"},
    {"--batch-size", "batch_size", nullptr, Kind::count, "images per SGD step"},
    {"--kl-weight", "kl_weight", nullptr, Kind::real, "weight of the KL term"},
    {"--detach-p", "detach_p", nullptr, Kind::boolean, "stop gradients through p in the regularizer"},
    {"--regularizer", "regularizer", nullptr, Kind::text, "ct, ot or none"},
    {"--momentum", "momentum", nullptr, Kind::real, "SGD momentum"},
    {"--literal-kl-sign", "literal_kl_sign", nullptr, Kind::boolean, "subtract the KL term"},
    {"--deterministic-prompts", "deterministic_prompts", nullptr, Kind::boolean, "train with zero latent noise"},
    {"--predict-mode", "predict_mode", nullptr, Kind::text, "sample or mean-latent"},
    {"--sinkhorn-epsilon", "sinkhorn", "epsilon", Kind::real, "entropic regularization"},
    {"--sinkhorn-max-iters", "sinkhorn", "max_iters", Kind::count, "iteration cap"},
    {"--sinkhorn-tol", "sinkhorn", "tol", Kind::real, "marginal tolerance"},
};

class UsageError : public Error {
 public:
  using Error::Error;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t parse_u64(const std::string& text, const std::string& what) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw UsageError("invalid " + what + " '" + text + "'");
  return v;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  const auto dots = text.find("..");
  if (dots == std::string::npos) return {parse_u64(text, "seed")};
  const auto lo = parse_u64(text.substr(0, dots), "seed range");
  const auto hi = parse_u64(text.substr(dots + 2), "seed range");
  if (hi < lo) throw UsageError("empty seed range '" + text + "'");
  if (hi - lo >= 100000) throw UsageError("seed range '" + text + "' is too long");
  std::vector<std::uint64_t> seeds;
  for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
  return seeds;
}

json flag_value(const ConfigFlag& f, const std::string& text) {
  switch (f.kind) {
    case Kind::text:
      return text;
    case Kind::boolean:
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw UsageError(std::string(f.flag) + " expects true or false, got '" + text + "'");
    case Kind::count:
      return parse_u64(text, std::string("value for ") + f.flag);
    case Kind::real: {
      double v = 0.0;
      const auto* end = text.data() + text.size();
      auto [ptr, ec] = std::from_chars(text.data(), end, v);
      if (ec != std::errc{} || ptr != end) throw UsageError(std::string(f.flag) + " expects a number, got '" + text + "'");
      return v;
    }
  }
  return nullptr;
}

// RunConfig assembled in precedence order: defaults, then `base_json`
// (saved run config), then --config, then individual flags.
struct ConfigOptions {
  std::string config_path;
  std::map<std::string, std::string> values;  // flag → raw text
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file (RunConfig field names)");
    for (const auto& f : kConfigFlags) options[f.flag] = app->add_option(f.flag, values[f.flag], f.help);
  }

  RunConfig resolve(const std::optional<std::string>& base_json = std::nullopt) const {
    RunConfig cfg;
    if (base_json) apply_json(cfg, *base_json);
    if (!config_path.empty()) apply_json(cfg, read_text(config_path));
    json overrides = json::object();
    for (const auto& f : kConfigFlags) {
      if (options.at(f.flag)->count() == 0) continue;
      const auto v = flag_value(f, values.at(f.flag));
      if (f.nested) {
        overrides[f.key][f.nested] = v;
      } else {
        overrides[f.key] = v;
      }
    }
    apply_json(cfg, overrides.dump());
    cfg.validate();
    return cfg;
  }
};

void add_synthetic_options(CLI::App* app, SyntheticSpec& spec, std::vector<CLI::Option*>& seen,
                           std::optional<double>& noise) {
  seen.push_back(app->add_option("--classes", spec.classes, "number of classes"));
  seen.push_back(app->add_option("--modes", spec.modes, "visual modes per class"));
  seen.push_back(app->add_option("--shots", spec.shots, "training images per class"));
  seen.push_back(app->add_option("--test-shots", spec.test_shots, "held-out images per class"));
  seen.push_back(app->add_option("--noise", noise, "patch noise scale"));
}

bool any_given(const std::vector<CLI::Option*>& opts) {
  return std::any_of(opts.begin(), opts.end(), [](const CLI::Option* o) { return o->count() > 0; });
}

// ---- gen-data ---------------------------------------------------------------

struct GenDataArgs {
  SyntheticSpec spec;
  std::optional<double> noise;
  std::vector<CLI::Option*> synthetic;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_gen_data(GenDataArgs& a, std::ostream& out) {
  a.spec.seed = a.seed;
  a.spec.noise = a.noise;
  const auto files = write_dataset(a.spec, a.out);
  json j;
  j["train"] = files.train.string();
  j["test"] = a.spec.test_shots ? json(files.test.string()) : json(nullptr);
  j["sidecar"] = files.sidecar.string();
  j["train_images"] = a.spec.shots * a.spec.classes;
  j["test_images"] = a.spec.test_shots * a.spec.classes;
  out << j.dump(2) << '\n';
  return kExitOk;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  ConfigOptions config;
  SyntheticSpec spec;
  std::optional<double> noise;
  std::vector<CLI::Option*> synthetic;
  std::string seed;
  std::string seeds;
  std::optional<std::uint64_t> data_seed;
  std::optional<std::size_t> base_classes;
  std::string bundle;
  std::string out;
};

std::vector<std::uint64_t> resolve_seeds(const std::string& seed, const std::string& seeds, const RunConfig& cfg) {
  if (!seed.empty() && !seeds.empty()) throw UsageError("use either --seed or --seeds, not both");
  if (!seeds.empty()) return parse_seeds(seeds);
  if (!seed.empty()) return parse_seeds(seed);
  return {cfg.seed};
}

int cmd_train(TrainArgs& a, std::ostream& out, std::ostream& err) {
  ExperimentSpec spec;
  spec.config = a.config.resolve();
  spec.seeds = resolve_seeds(a.seed, a.seeds, spec.config);
  spec.base_classes = a.base_classes;
  spec.out = a.out;
  if (!a.bundle.empty()) {
    if (any_given(a.synthetic) || a.data_seed) {
      throw UsageError("--bundle cannot be combined with synthetic dataset options");
    }
    spec.bundle = a.bundle;
  } else {
    a.spec.noise = a.noise;
    if (a.data_seed) {
      a.spec.seed = *a.data_seed;
      spec.fixed_data_seed = true;
    }
    spec.synthetic = a.spec;
  }
  run_experiment(spec, err);
  out << read_text(spec.out / "summary.json");
  return kExitOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  ConfigOptions config;
  std::string checkpoint;
  std::string bundle;
  std::string split = "all";
  std::string seed;
  std::optional<std::size_t> base_classes;
  std::string out;
};

struct SavedRun {
  std::optional<std::string> config;
  std::optional<std::size_t> base_count;
};

SavedRun saved_run(const fs::path& checkpoint) {
  SavedRun run;
  const auto path = checkpoint.parent_path() / "run.json";
  if (!fs::exists(path)) return run;
  try {
    const auto j = nlohmann::json::parse(read_text(path));
    if (j.contains("config")) {
      auto cfg = j["config"];
      cfg.erase("seed");  // evaluation seed comes from the command line or the default
      run.config = cfg.dump();
    }
    if (j.contains("base_classes")) run.base_count = j["base_classes"].size();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("header", path.string() + ": " + e.what());
  }
  return run;
}

json accuracy_json(const trainer::SplitAccuracy& acc) {
  json pc = json::object();
  for (const auto& [c, v] : acc.per_class) pc[std::to_string(c)] = v;
  return pc;
}

int cmd_eval(EvalArgs& a, std::ostream& out, std::ostream& err) {
  if (a.split != "base" && a.split != "new" && a.split != "all") {
    throw UsageError("--split must be base, new or all");
  }
  const auto saved = saved_run(a.checkpoint);
  RunConfig cfg = a.config.resolve(saved.config);
  if (!a.seed.empty()) cfg.seed = parse_u64(a.seed, "seed");

  const auto ckpt = spg::load_checkpoint(a.checkpoint);
  const auto ds = open_dataset(a.bundle);
  if (ckpt.model.dim() != ds.bundle.d) {
    throw LoadError("validation", "checkpoint width " + std::to_string(ckpt.model.dim()) + " does not match bundle d = " +
                                      std::to_string(ds.bundle.d));
  }
  if (ds.encoder && ds.encoder->b != ckpt.model.prompt_length()) {
    throw LoadError("validation", "checkpoint prompt length " + std::to_string(ckpt.model.prompt_length()) +
                                      " does not match the encoder's " + std::to_string(ds.encoder->b));
  }
  const auto parts = partition_classes(ds.bundle.c, a.base_classes ? a.base_classes : saved.base_count);

  std::optional<vlp::SyntheticVlp> encoder;
  if (ds.encoder) {
    encoder.emplace(*ds.encoder);
  } else {
    err << "no encoder config next to " << a.bundle << ": using the frozen label-embedding classifier\n";
  }
  const auto score = [&](const std::vector<std::size_t>& classes) {
    const auto task = trainer::make_task(ds.bundle, classes);
    return encoder ? trainer::evaluate(task, ckpt.model, *encoder, cfg) : trainer::evaluate_frozen(task, cfg.tau);
  };

  const auto base = score(parts.base);
  std::optional<trainer::SplitAccuracy> novel;
  if (!parts.novel.empty()) novel = score(parts.novel);

  trainer::SplitAccuracy chosen;
  if (a.split == "base") {
    chosen = base;
  } else if (a.split == "new") {
    if (!novel) throw UsageError("the class partition has no new classes");
    chosen = *novel;
  } else {
    std::vector<std::size_t> all = parts.base;
    all.insert(all.end(), parts.novel.begin(), parts.novel.end());
    chosen = score(all);
  }

  json j;
  j["split"] = a.split;
  j["classifier"] = encoder ? "prompt" : "frozen";
  j["samples"] = cfg.samples;
  j["predict_mode"] = std::string(to_string(cfg.predict_mode));
  j["images"] = chosen.images;
  j["accuracy"] = chosen.accuracy;
  j["per_class"] = accuracy_json(chosen);
  j["base"] = base.accuracy;
  if (novel) {
    j["new"] = novel->accuracy;
    const bool both_zero = base.accuracy == 0.0 && novel->accuracy == 0.0;
    j["h"] = both_zero ? 0.0 : trainer::harmonic_mean(base.accuracy, novel->accuracy);
  } else {
    j["new"] = nullptr;
    j["h"] = nullptr;
  }
  const auto text = j.dump(2) + "\n";
  if (!a.out.empty()) ct::write_text(a.out, text);
  out << text;
  return kExitOk;
}

// ---- viz --------------------------------------------------------------------

struct VizArgs {
  ConfigOptions config;
  std::string checkpoint;
  std::string bundle;
  std::size_t image_index = 0;
  std::size_t class_index = 0;
  bool all_classes = false;
  std::string out;
};

int cmd_viz(VizArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = a.config.resolve(a.checkpoint.empty() ? std::nullopt : saved_run(a.checkpoint).config);
  const auto ds = open_dataset(a.bundle);
  const auto& b = ds.bundle;
  if (a.image_index >= b.images.size()) {
    throw ParameterError("image index " + std::to_string(a.image_index) + " out of range (bundle has " +
                         std::to_string(b.images.size()) + " images)");
  }
  if (a.class_index >= b.c) {
    throw ParameterError("class index " + std::to_string(a.class_index) + " out of range (bundle has " +
                         std::to_string(b.c) + " classes)");
  }

  diff::NoGradGuard no_grad;
  const auto task = trainer::make_task(b);
  diff::Tensor prompts = task.class_embeddings;
  std::string source = "label-embeddings";
  if (!a.checkpoint.empty()) {
    const auto ckpt = spg::load_checkpoint(a.checkpoint);
    if (ckpt.model.dim() != b.d) {
      throw LoadError("validation", "checkpoint width " + std::to_string(ckpt.model.dim()) +
                                        " does not match bundle d = " + std::to_string(b.d));
    }
    if (ds.encoder) {
      const vlp::SyntheticVlp encoder(*ds.encoder);
      prompts = trainer::encode_class_prompts(ckpt.model, encoder, task.class_embeddings, nullptr, false).embeddings;
      source = "prompts";
    } else {
      err << "no encoder config next to " << a.bundle << ": plotting against the label embeddings\n";
    }
  }

  const auto& image = task.images[a.image_index];
  const auto probs = ct::class_probs(image.global, prompts, cfg.tau);
  const auto forward = ct::plan_patch_to_prompt(image.patches, prompts, probs);   // M×C
  const auto backward = ct::plan_prompt_to_patch(image.patches, prompts);         // C×M
  const std::size_t m = b.m, c = b.c;

  std::vector<double> column(m);
  for (std::size_t i = 0; i < m; ++i) column[i] = forward.plan.at(i, a.class_index);
  std::vector<double> reverse(m);
  for (std::size_t i = 0; i < m; ++i) reverse[i] = backward.plan.at(a.class_index, i);

  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw IoError("cannot create " + a.out + ": " + ec.message());
  const fs::path dir = a.out;
  const auto [w, h] = ct::patch_grid(m);
  if (a.all_classes) {
    ct::write_text(dir / "plan.csv", ct::plan_csv(forward.plan.values(), m, c));
  } else {
    ct::write_text(dir / "plan.csv", ct::plan_csv(column, m, 1));
  }
  ct::write_text(dir / "reverse.csv", ct::plan_csv(reverse, 1, m));
  ct::write_text(dir / "heatmap.pgm", ct::heatmap_pgm(column, w, h));

  json j;
  j["image_index"] = a.image_index;
  j["class_index"] = a.class_index;
  j["label"] = b.images[a.image_index].label;
  j["class_source"] = source;
  j["plan"] = (dir / "plan.csv").string();
  j["reverse"] = (dir / "reverse.csv").string();
  j["heatmap"] = (dir / "heatmap.pgm").string();
  j["grid"] = {w, h};
  out << j.dump(2) << '\n';
  return kExitOk;
}

}  // namespace

std::vector<std::string> config_flag_names() {
  std::vector<std::string> names;
  for (const auto& f : kConfigFlags) names.emplace_back(f.flag);
  return names;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Stochastic prompt learning with conditional-transport regularization", "pbprompt"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic few-shot dataset");
  add_synthetic_options(gen_cmd, gen.spec, gen.synthetic, gen.noise);
  gen_cmd->add_option("--seed", gen.seed, "dataset seed");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train and evaluate one run per seed");
  train.config.attach(train_cmd);
  add_synthetic_options(train_cmd, train.spec, train.synthetic, train.noise);
  train_cmd->add_option("--seed", train.seed, "run seed");
  train_cmd->add_option("--seeds", train.seeds, "seed range N..M");
  train_cmd->add_option("--data-seed", train.data_seed, "fixed synthetic dataset seed (default: the run seed)");
  train_cmd->add_option("--base-classes", train.base_classes, "train on the first N classes");
  train_cmd->add_option("--bundle", train.bundle, "training bundle written by gen-data");
  train_cmd->add_option("--out", train.out, "output directory")->required();

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a bundle");
  eval.config.attach(eval_cmd);
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--bundle", eval.bundle, "evaluation bundle")->required();
  eval_cmd->add_option("--split", eval.split, "base, new or all");
  eval_cmd->add_option("--seed", eval.seed, "prediction seed");
  eval_cmd->add_option("--base-classes", eval.base_classes, "first N classes form the base split");
  eval_cmd->add_option("--out", eval.out, "also write the metrics JSON here");

  VizArgs viz;
  auto* viz_cmd = app.add_subcommand("viz", "export transport plans for one image");
  viz.config.attach(viz_cmd);
  viz_cmd->add_option("--checkpoint", viz.checkpoint, "checkpoint file (label embeddings when omitted)");
  viz_cmd->add_option("--bundle", viz.bundle, "bundle holding the image")->required();
  viz_cmd->add_option("--image-index", viz.image_index, "image index in the bundle");
  viz_cmd->add_option("--class-index", viz.class_index, "class whose plan column is plotted");
  viz_cmd->add_flag("--all-classes", viz.all_classes, "write the full patch × class plan");
  viz_cmd->add_option("--out", viz.out, "output directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen, out);
    if (train_cmd->parsed()) return cmd_train(train, out, err);
    if (eval_cmd->parsed()) return cmd_eval(eval, out, err);
    if (viz_cmd->parsed()) return cmd_viz(viz, out, err);
  } catch (const trainer::NumericAbort& e) {
    err << e.diagnostic_json() << '\n';
    return kExitNumeric;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConvergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const LoadError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace pbp::cli
