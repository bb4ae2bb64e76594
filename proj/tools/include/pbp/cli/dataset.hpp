#pragma once

// Synthetic dataset files as written by `gen-data`:
//
//   <dir>/train.pbeb    shots · classes images
//   <dir>/test.pbeb     test_shots · classes held-out images
//   <dir>/dataset.json  generator parameters, including the full encoder
//                       config so the frozen text side can be rebuilt
//
// A bundle without a dataset.json next to it is treated as real embeddings.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "pbp/bundle.hpp"
#include "pbp/vlp.hpp"

namespace pbp::cli {

namespace fs = std::filesystem;

inline constexpr const char* kSidecarName = "dataset.json";

struct SyntheticSpec {
  std::size_t classes = 8;
  std::size_t modes = 3;
  std::size_t shots = 16;
  std::size_t test_shots = 50;
  std::optional<double> noise;  // encoder default when unset
  std::uint64_t seed = 1;

  vlp::VlpConfig vlp_config() const;
  void validate() const;
};

struct DatasetFiles {
  fs::path train;
  fs::path test;
  fs::path sidecar;
};

DatasetFiles write_dataset(const SyntheticSpec& spec, const fs::path& dir);

std::string vlp_config_json(const vlp::VlpConfig& config);
vlp::VlpConfig parse_vlp_config(const std::string& json_text);

struct Dataset {
  vlp::EmbeddingBundle bundle;
  std::optional<vlp::VlpConfig> encoder;  // set for synthetic datasets
  std::optional<fs::path> test;           // held-out split named by the sidecar
};

// Loads a bundle and, when present, the sidecar in its directory.
Dataset open_dataset(const fs::path& bundle_path);

}  // namespace pbp::cli
