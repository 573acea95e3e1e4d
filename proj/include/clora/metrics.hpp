// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: polynomial-kernel MMD, the generation-track
// accuracy/forgetting pair (A_mmd, F_mmd), the classification-track pair
// (A_N, F_N) and sequential-update interference statistics.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clora/matrix.hpp"

namespace clora::metrics {

using num::Matrix;

/// Raised for metric inputs that leave the value undefined.
class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Report-layer multiplier for MMD values.
inline constexpr double kMmdReportScale = 1e3;

/// k(u, v) = (scale·<u, v> + coef0)^degree; scale defaults to 1/dim.
struct PolyKernel {
    int degree = 3;
    double coef0 = 1.0;
    std::optional<double> scale;

    [[nodiscard]] double operator()(std::span<const double> u, std::span<const double> v) const;
    [[nodiscard]] PolyKernel resolved(std::size_t dim) const;
};

enum class Estimator { Biased, Unbiased };

/// Squared MMD between row sets x and y. The biased V-statistic is exactly 0
/// for identical sets; the unbiased U-statistic may be negative.
double mmd2(const Matrix& x, const Matrix& y, const PolyKernel& kernel = {}, Estimator est = Estimator::Biased);

/// Frozen feature map applied to samples before MMD.
class FeatureEmbedder {
public:
    static FeatureEmbedder identity();
    /// x ↦ x·M with M ~ N(0, 1/in_dim), fixed by seed.
    static FeatureEmbedder random_map(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed);

    [[nodiscard]] Matrix embed(const Matrix& x) const;
    [[nodiscard]] bool is_identity() const noexcept { return map_.empty(); }

private:
    Matrix map_;
};

struct MmdSettings {
    PolyKernel kernel;
    Estimator estimator = Estimator::Biased;
};

/// (1/N) Σ_j MMD(F(refs_j), F(finals_j)); unscaled.
double a_mmd(std::span<const Matrix> finals, std::span<const Matrix> refs, const FeatureEmbedder& embedder,
             const MmdSettings& settings = {});

/// (1/(N-1)) Σ_{j<N} MMD(F(own_j), F(finals_j)), where own_j was sampled right
/// after task j. `own` may hold N or N-1 sets; only the first N-1 are used.
double f_mmd(std::span<const Matrix> own, std::span<const Matrix> finals, const FeatureEmbedder& embedder,
             const MmdSettings& settings = {});

enum class ForgettingMode {
    MaxDrop,   // max_{i>=j} A_{i,j} - A_{N,j}
    DiagDrop,  // A_{j,j} - A_{N,j}
};

struct AccuracySummary {
    double a_n = 0.0;
    double f_n = 0.0;
};

/// acc[i][j] is accuracy on task j after training task i (j <= i); row i must
/// have exactly i+1 entries.
AccuracySummary a_n_f_n(const std::vector<std::vector<double>>& acc, ForgettingMode mode = ForgettingMode::MaxDrop);

struct PairInterference {
    int prev_task = 0;
    int task = 0;
    double opposite_fraction = 0.0;   // percent of entries with Δ_t·Δ_{t-1} < 0
    double opposite_magnitude = 0.0;  // mean |Δ_t| over those entries
};

/// Stats between two consecutive per-site delta lists (matching shapes).
PairInterference interference_pair(std::span<const Matrix> prev, std::span<const Matrix> cur);

/// deltas[t] holds the per-site deltas of task t+1; returns one entry per
/// consecutive pair.
std::vector<PairInterference> interference_stats(const std::vector<std::vector<Matrix>>& deltas);

/// Mean opposite_magnitude over pairs (0 when there are none).
double mean_interference_magnitude(std::span<const PairInterference> stats);

}  // namespace clora::metrics
