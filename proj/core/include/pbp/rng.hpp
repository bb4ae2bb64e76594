#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace pbp {

// Every random stream in the project is derived from one master seed:
//
//   seed = mix(...mix(mix(master ^ fnv1a(tag)) ^ i0) ^ i1 ...)
//
// where mix is the splitmix64 finalizer. Streams with different tags or
// indices are statistically independent and never share state.
std::uint64_t mix64(std::uint64_t x) noexcept;
std::uint64_t fnv1a(std::string_view text) noexcept;
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                          std::initializer_list<std::uint64_t> indices = {}) noexcept;

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t master, std::string_view tag,
      std::initializer_list<std::uint64_t> indices = {})
      : engine_(derive_seed(master, tag, indices)) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::vector<double> normals(std::size_t n, double mean = 0.0, double stddev = 1.0);

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace pbp
