#pragma once

// Embedding bundle: frozen shared-space embeddings for a set of images.
//
// On-disk layout (little-endian, no padding):
//
//   "PBEB"            4 bytes magic
//   version           u32 (currently 1)
//   header_length     u32
//   header            UTF-8 JSON {"d","m","c","n_images","normalized","dtype":"f32"}
//   class embeddings  c·d f32
//   per image         global d f32 · patches m·d f32 · label u32

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace pbp::vlp {

inline constexpr char kBundleMagic[4] = {'P', 'B', 'E', 'B'};
inline constexpr std::uint32_t kBundleVersion = 1;
inline constexpr double kUnitNormTolerance = 1e-6;

struct ImageRecord {
  std::vector<float> global;   // d
  std::vector<float> patches;  // m × d
  std::uint32_t label = 0;
};

struct EmbeddingBundle {
  std::size_t d = 0;
  std::size_t m = 0;
  std::size_t c = 0;
  bool normalized = true;
  std::vector<float> class_embeddings;  // c × d
  std::vector<ImageRecord> images;

  // Throws LoadError("validation", ...) naming the first offending item.
  void validate() const;

  std::span<const float> class_embedding(std::size_t c) const;
};

struct BundleHeader {
  std::uint32_t version = kBundleVersion;
  std::size_t d = 0;
  std::size_t m = 0;
  std::size_t c = 0;
  std::size_t n_images = 0;
  bool normalized = true;
  std::string dtype = "f32";

  // Byte count the payload must have for these extents.
  std::uint64_t payload_bytes() const;
};

void write_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& path);
EmbeddingBundle load_bundle(const std::filesystem::path& path);
// Reads magic, version and JSON header only.
BundleHeader read_bundle_header(const std::filesystem::path& path);

}  // namespace pbp::vlp
