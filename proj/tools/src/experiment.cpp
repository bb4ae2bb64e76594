#include "pbp/cli/experiment.hpp"

#include <ostream>
#include <sstream>

#include "json.hpp"
#include "pbp/checkpoint.hpp"
#include "pbp/errors.hpp"
#include "pbp/plan_export.hpp"

namespace pbp::cli {

namespace {

using json = nlohmann::ordered_json;

struct LoadedData {
  Dataset train;
  std::optional<vlp::EmbeddingBundle> test;
};

LoadedData load_data(const fs::path& bundle_path) {
  LoadedData d{open_dataset(bundle_path), std::nullopt};
  if (!d.train.encoder) {
    throw ParameterError("training needs a synthetic dataset (no " + std::string(kSidecarName) + " next to " +
                         bundle_path.string() + ")");
  }
  if (d.train.test) d.test = vlp::load_bundle(*d.train.test);
  return d;
}

json class_list(const std::vector<std::size_t>& ids) {
  json a = json::array();
  for (auto c : ids) a.push_back(c);
  return a;
}

}  // namespace

void ExperimentSpec::validate() const {
  if (synthetic.has_value() == bundle.has_value()) {
    throw ParameterError("exactly one dataset source is required (synthetic parameters or --bundle)");
  }
  if (seeds.empty()) throw ParameterError("seed list is empty");
  if (out.empty()) throw ParameterError("an output directory is required");
  if (synthetic) synthetic->validate();
  config.validate();
}

ClassPartition partition_classes(std::size_t classes, std::optional<std::size_t> base_count) {
  const std::size_t nb = base_count.value_or((classes + 1) / 2);
  if (nb < 1 || nb > classes) {
    throw ParameterError("base class count " + std::to_string(nb) + " must lie in [1, " + std::to_string(classes) +
                         "]");
  }
  ClassPartition p;
  for (std::size_t c = 0; c < classes; ++c) (c < nb ? p.base : p.novel).push_back(c);
  return p;
}

fs::path seed_dir(const fs::path& out, std::uint64_t seed) { return out / ("seed-" + std::to_string(seed)); }

std::string metrics_json(const trainer::Metrics& m, bool has_new) {
  json j;
  j["base"] = m.base;
  j["new"] = has_new ? json(m.novel) : json(nullptr);
  j["h"] = has_new ? json(m.h) : json(nullptr);
  json pc = json::object();
  for (const auto& [c, acc] : m.per_class) pc[std::to_string(c)] = acc;
  j["per_class"] = pc;
  return j.dump(2) + "\n";
}

std::vector<SeedOutcome> run_experiment(const ExperimentSpec& spec, std::ostream& log) {
  spec.validate();
  std::optional<LoadedData> shared;
  if (spec.bundle) shared = load_data(*spec.bundle);

  std::vector<SeedOutcome> outcomes;
  for (const auto seed : spec.seeds) {
    const auto dir = seed_dir(spec.out, seed);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    std::optional<LoadedData> local;
    if (spec.synthetic) {
      auto s = *spec.synthetic;
      if (!spec.fixed_data_seed) s.seed = seed;
      local = load_data(write_dataset(s, dir / "data").train);
    }
    const LoadedData& data = local ? *local : *shared;
    const vlp::SyntheticVlp encoder(*data.train.encoder);
    const auto& train_bundle = data.train.bundle;
    const auto parts = partition_classes(train_bundle.c, spec.base_classes);

    RunConfig cfg = spec.config;
    cfg.seed = seed;
    const auto task = trainer::make_task(train_bundle, parts.base);

    std::ostringstream trace;
    const std::size_t steps_per_epoch = (task.images.size() + cfg.batch_size - 1) / cfg.batch_size;
    const auto on_step = [&](const trainer::TraceRecord& r) {
      trace << trainer::trace_json(r) << '\n';
      if ((r.step + 1) % steps_per_epoch == 0) {
        const auto epoch = (r.step + 1) / steps_per_epoch;
        if (epoch == 1 || epoch % 10 == 0 || epoch == cfg.epochs) {
          log << "seed " << seed << ": epoch " << epoch << "/" << cfg.epochs << " loss " << r.loss.total << '\n';
        }
      }
    };

    trainer::TrainResult result;
    try {
      result = trainer::train(task, encoder, cfg, on_step);
    } catch (const trainer::NumericAbort& abort) {
      ct::write_text(dir / "trace.jsonl", trace.str());
      ct::write_text(dir / "diagnostic.json", abort.diagnostic_json() + "\n");
      throw;
    }

    const auto& test = data.test ? *data.test : train_bundle;
    if (!data.test) log << "seed " << seed << ": no held-out split, evaluating on the training bundle\n";

    SeedOutcome outcome{seed, dir, {}, !parts.novel.empty()};
    if (outcome.has_new) {
      outcome.metrics = trainer::eval_base_to_new(result.model, encoder, test, parts.base, parts.novel, cfg);
    } else {
      const auto acc = trainer::evaluate(trainer::make_task(test, parts.base), result.model, encoder, cfg);
      outcome.metrics.base = acc.accuracy;
      outcome.metrics.per_class = acc.per_class;
    }

    spg::write_checkpoint(result.model, result.steps, dir / "checkpoint.pbck");
    ct::write_text(dir / "trace.jsonl", trace.str());
    ct::write_text(dir / "metrics.json", metrics_json(outcome.metrics, outcome.has_new));

    json run;
    run["seed"] = seed;
    run["config"] = json::parse(to_json(cfg));
    run["base_classes"] = class_list(parts.base);
    run["new_classes"] = class_list(parts.novel);
    run["steps"] = result.steps;
    ct::write_text(dir / "run.json", run.dump(2) + "\n");

    log << "seed " << seed << ": base " << outcome.metrics.base;
    if (outcome.has_new) log << " new " << outcome.metrics.novel << " h " << outcome.metrics.h;
    log << '\n';
    outcomes.push_back(std::move(outcome));
  }

  json summary;
  json runs = json::array();
  double base = 0.0, novel = 0.0, h = 0.0;
  for (const auto& o : outcomes) {
    runs.push_back({{"seed", o.seed},
                    {"base", o.metrics.base},
                    {"new", o.has_new ? json(o.metrics.novel) : json(nullptr)},
                    {"h", o.has_new ? json(o.metrics.h) : json(nullptr)}});
    base += o.metrics.base;
    novel += o.metrics.novel;
    h += o.metrics.h;
  }
  const double n = static_cast<double>(outcomes.size());
  const bool has_new = !outcomes.empty() && outcomes.front().has_new;
  summary["runs"] = runs;
  summary["mean"] = {{"base", base / n},
                     {"new", has_new ? json(novel / n) : json(nullptr)},
                     {"h", has_new ? json(h / n) : json(nullptr)}};
  ct::write_text(spec.out / "summary.json", summary.dump(2) + "\n");
  return outcomes;
}

}  // namespace pbp::cli
