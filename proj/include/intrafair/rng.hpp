#pragma once

#include "intrafair/types.hpp"

#include <random>

namespace intrafair {

using Rng = std::mt19937_64;

/// Deterministically derives an independent child seed (splitmix64 finalizer over seed and stream).
inline Seed derive_seed(Seed seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace intrafair
