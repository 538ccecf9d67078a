#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace grit {

/// Independent generator derived from a master seed, a stream name and a
/// counter. Parameter init, dropout and shuffling each draw from their own
/// stream so that changing one never perturbs the others.
std::mt19937_64 make_stream(std::uint64_t seed, std::string_view stream, std::uint64_t counter = 0);

/// Normal(0, std) samples redrawn until they fall within two std.
void fill_truncated_normal(std::span<double> out, double std, std::mt19937_64& rng);

}  // namespace grit
