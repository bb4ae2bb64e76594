#pragma once

// Multi-seed train + base-to-new evaluation, one output directory per seed:
//
//   <out>/seed-<s>/checkpoint.pbck
//   <out>/seed-<s>/trace.jsonl     one JSON record per optimizer step
//   <out>/seed-<s>/metrics.json    {base, new, h, per_class}
//   <out>/seed-<s>/run.json        resolved config and class partition
//   <out>/seed-<s>/data/           generated dataset (synthetic source only)
//   <out>/summary.json

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pbp/cli/dataset.hpp"
#include "pbp/config.hpp"
#include "pbp/trainer.hpp"

namespace pbp::cli {

struct ExperimentSpec {
  // Exactly one dataset source.
  std::optional<SyntheticSpec> synthetic;
  std::optional<fs::path> bundle;
  // Synthetic data is regenerated per run seed unless this is set.
  bool fixed_data_seed = false;

  RunConfig config;
  std::vector<std::uint64_t> seeds;
  // The first `base_classes` classes are trained on; the rest are new.
  // Defaults to half of the classes, rounded up.
  std::optional<std::size_t> base_classes;
  fs::path out;

  void validate() const;
};

struct ClassPartition {
  std::vector<std::size_t> base;
  std::vector<std::size_t> novel;
};

ClassPartition partition_classes(std::size_t classes, std::optional<std::size_t> base_count);

struct SeedOutcome {
  std::uint64_t seed = 0;
  fs::path dir;
  trainer::Metrics metrics;
  bool has_new = false;
};

// Throws trainer::NumericAbort after writing <seed dir>/diagnostic.json.
std::vector<SeedOutcome> run_experiment(const ExperimentSpec& spec, std::ostream& log);

// {"base", "new", "h", "per_class"}; new and h are null without new classes.
std::string metrics_json(const trainer::Metrics& metrics, bool has_new);

fs::path seed_dir(const fs::path& out, std::uint64_t seed);

}  // namespace pbp::cli
