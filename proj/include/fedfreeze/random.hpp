#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedfreeze {

using Rng = std::mt19937_64;

/// Order-sensitive mix of several integers into one seed (splitmix64 steps).
std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts);

}  // namespace fedfreeze
