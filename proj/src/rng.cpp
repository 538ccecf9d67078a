#include "grit/rng.hpp"

#include <cmath>

namespace grit {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::mt19937_64 make_stream(std::uint64_t seed, std::string_view stream, std::uint64_t counter) {
  const std::uint64_t mixed = splitmix64(splitmix64(seed) ^ fnv1a(stream)) ^ splitmix64(counter + 0x51ed27f1ULL);
  std::seed_seq seq{static_cast<std::uint32_t>(mixed), static_cast<std::uint32_t>(mixed >> 32)};
  return std::mt19937_64(seq);
}

// Box-Muller keeps the draw sequence independent of the standard library's
// normal_distribution implementation.
void fill_truncated_normal(std::span<double> out, double std, std::mt19937_64& rng) {
  auto uniform = [&rng] { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; };
  for (auto& v : out) {
    double z = 0.0;
    do {
      z = std::sqrt(-2.0 * std::log(uniform())) * std::cos(2.0 * M_PI * uniform());
    } while (std::abs(z) > 2.0);
    v = z * std;
  }
}

}  // namespace grit
