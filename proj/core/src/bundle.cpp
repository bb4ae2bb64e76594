#include "pbp/bundle.hpp"

#include <cmath>
#include <cstring>
#include "json.hpp"

#include "binary_io.hpp"
#include "pbp/errors.hpp"

namespace pbp::vlp {

namespace {

using ordered_json = nlohmann::ordered_json;

double norm_of(std::span<const float> v) {
  double ss = 0.0;
  for (float x : v) ss += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(ss);
}

void check_unit(std::span<const float> v, const std::string& what) {
  const double n = norm_of(v);
  if (!(std::abs(n - 1.0) <= kUnitNormTolerance)) {
    throw LoadError("validation", what + " has norm " + std::to_string(n) +
                                      " but the bundle is flagged normalized");
  }
}

void check_finite(std::span<const float> v, const std::string& what) {
  for (float x : v) {
    if (!std::isfinite(x)) throw LoadError("validation", what + " contains a non-finite value");
  }
}

constexpr std::size_t kPreambleBytes = 12;

BundleHeader parse_header(io::Reader& reader, const std::string& context) {
  const std::string magic = reader.raw(4, "magic");
  if (std::memcmp(magic.data(), kBundleMagic, 4) != 0) {
    throw LoadError("magic", context + ": bad magic bytes (not a PBEB bundle)");
  }
  BundleHeader h;
  h.version = reader.u32("version");
  if (h.version != kBundleVersion) {
    throw LoadError("version", context + ": unsupported bundle version " + std::to_string(h.version));
  }
  const std::uint32_t header_len = reader.u32("header length");
  const std::string text = reader.raw(header_len, "JSON header");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    h.d = j.at("d").get<std::size_t>();
    h.m = j.at("m").get<std::size_t>();
    h.c = j.at("c").get<std::size_t>();
    h.n_images = j.at("n_images").get<std::size_t>();
    h.normalized = j.at("normalized").get<bool>();
    h.dtype = j.at("dtype").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("header", context + ": malformed JSON header: " + e.what());
  }
  if (h.dtype != "f32") throw LoadError("header", context + ": unsupported dtype '" + h.dtype + "'");
  if (h.d == 0 || h.m == 0 || h.c == 0) {
    throw LoadError("header", context + ": extents d, m, c must all be positive");
  }
  return h;
}

}  // namespace

std::uint64_t BundleHeader::payload_bytes() const {
  const std::uint64_t per_image = 4ull * (d + m * d) + 4ull;
  return 4ull * c * d + per_image * n_images;
}

std::span<const float> EmbeddingBundle::class_embedding(std::size_t k) const {
  if (k >= c) throw ParameterError("class index " + std::to_string(k) + " out of range");
  return std::span<const float>(class_embeddings).subspan(k * d, d);
}

void EmbeddingBundle::validate() const {
  if (d == 0 || m == 0 || c == 0) throw LoadError("validation", "bundle extents must be positive");
  if (class_embeddings.size() != c * d) {
    throw LoadError("validation", "class embedding table has " +
                                      std::to_string(class_embeddings.size()) + " values, expected " +
                                      std::to_string(c * d));
  }
  for (std::size_t k = 0; k < c; ++k) {
    const auto name = "class embedding " + std::to_string(k);
    check_finite(class_embedding(k), name);
    if (normalized) check_unit(class_embedding(k), name);
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    const auto tag = "image " + std::to_string(i);
    if (img.global.size() != d) throw LoadError("validation", tag + " global feature has wrong dimension");
    if (img.patches.size() != m * d) throw LoadError("validation", tag + " patch table has wrong size");
    if (img.label >= c) {
      throw LoadError("validation", tag + " label " + std::to_string(img.label) +
                                        " out of range (c = " + std::to_string(c) + ")");
    }
    check_finite(img.global, tag + " global feature");
    check_finite(img.patches, tag + " patches");
    if (normalized) {
      check_unit(img.global, tag + " global feature");
      const std::span<const float> patches(img.patches);
      for (std::size_t p = 0; p < m; ++p) {
        check_unit(patches.subspan(p * d, d), tag + " patch " + std::to_string(p));
      }
    }
  }
}

void write_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& path) {
  bundle.validate();
  ordered_json header;
  header["d"] = bundle.d;
  header["m"] = bundle.m;
  header["c"] = bundle.c;
  header["n_images"] = bundle.images.size();
  header["normalized"] = bundle.normalized;
  header["dtype"] = "f32";
  const std::string text = header.dump();

  std::string out;
  BundleHeader h{kBundleVersion, bundle.d, bundle.m, bundle.c, bundle.images.size(), bundle.normalized};
  out.reserve(kPreambleBytes + text.size() + h.payload_bytes());
  out.append(kBundleMagic, 4);
  io::put_u32(out, kBundleVersion);
  io::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (float x : bundle.class_embeddings) io::put_f32(out, x);
  for (const auto& img : bundle.images) {
    for (float x : img.global) io::put_f32(out, x);
    for (float x : img.patches) io::put_f32(out, x);
    io::put_u32(out, img.label);
  }
  try {
    io::write_file(path, out);
  } catch (const IoError& e) {
    throw IoError(std::string("writing bundle: ") + e.what());
  }
}

BundleHeader read_bundle_header(const std::filesystem::path& path) {
  // Magic + version + length first, then exactly the header text.
  const std::string context = path.string();
  std::string bytes = io::read_prefix(path, kPreambleBytes);
  io::Reader pre(bytes, context);
  pre.raw(4, "magic");
  pre.u32("version");
  const std::uint32_t len = pre.u32("header length");
  bytes = io::read_prefix(path, kPreambleBytes + len);
  io::Reader reader(bytes, context);
  return parse_header(reader, context);
}

EmbeddingBundle load_bundle(const std::filesystem::path& path) {
  const std::string context = path.string();
  const std::string bytes = io::read_file(path);
  io::Reader reader(bytes, context);
  const BundleHeader h = parse_header(reader, context);

  const std::uint64_t expected = h.payload_bytes();
  if (reader.remaining() < expected) {
    throw LoadError("truncated", context + ": payload has " + std::to_string(reader.remaining()) +
                                     " bytes, header implies " + std::to_string(expected));
  }
  if (reader.remaining() > expected) {
    throw LoadError("trailing", context + ": " + std::to_string(reader.remaining() - expected) +
                                    " unexpected bytes after payload");
  }

  EmbeddingBundle b;
  b.d = h.d;
  b.m = h.m;
  b.c = h.c;
  b.normalized = h.normalized;
  b.class_embeddings.resize(h.c * h.d);
  for (auto& x : b.class_embeddings) x = reader.f32("class embeddings");
  b.images.resize(h.n_images);
  for (auto& img : b.images) {
    img.global.resize(h.d);
    for (auto& x : img.global) x = reader.f32("global feature");
    img.patches.resize(h.m * h.d);
    for (auto& x : img.patches) x = reader.f32("patches");
    img.label = reader.u32("label");
  }
  try {
    b.validate();
  } catch (const LoadError& e) {
    throw LoadError(e.kind(), context + ": " + e.what());
  }
  return b;
}

}  // namespace pbp::vlp
