#include "pbp/rng.hpp"

namespace pbp {

std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                          std::initializer_list<std::uint64_t> indices) noexcept {
  std::uint64_t s = mix64(master ^ fnv1a(tag));
  for (std::uint64_t i : indices) s = mix64(s ^ i);
  return s;
}

std::vector<double> Rng::normals(std::size_t n, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(engine_);
  return out;
}

}  // namespace pbp
