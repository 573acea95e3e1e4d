// SPDX-License-Identifier: Apache-2.0
//
// Seed derivation and random draws. Every stochastic stage takes its own
// sub-seed derived from the run's root seed, so reseeding one stage does
// not perturb any other.

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "clora/matrix.hpp"

namespace clora {

/// One splitmix64 output step.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// 64-bit FNV-1a, used to turn stage names into stable tags.
constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// derive(root, "stage", i) = splitmix64(splitmix64(root ^ fnv1a(stage)) + i).
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view stage, std::uint64_t index = 0) noexcept {
    return splitmix64(splitmix64(root ^ fnv1a(stage)) + index);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    /// Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }
    num::Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0) {
        num::Matrix m(rows, cols);
        for (double& v : m.data()) {
            v = normal(0.0, stddev);
        }
        return m;
    }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace clora
