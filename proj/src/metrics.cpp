// SPDX-License-Identifier: Apache-2.0

#include "clora/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "clora/rng.hpp"

namespace clora::metrics {

double PolyKernel::operator()(std::span<const double> u, std::span<const double> v) const {
    double dot = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
    }
    const double s = scale.value_or(1.0 / static_cast<double>(u.size()));
    return std::pow(s * dot + coef0, degree);
}

PolyKernel PolyKernel::resolved(std::size_t dim) const {
    PolyKernel k = *this;
    if (!k.scale) {
        k.scale = 1.0 / static_cast<double>(dim);
    }
    return k;
}

namespace {

// Sum of k over all ordered pairs, optionally skipping the diagonal.
double kernel_sum(const Matrix& a, const Matrix& b, const PolyKernel& k, bool skip_diag) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            if (skip_diag && i == j) {
                continue;
            }
            acc += k(a.row(i), b.row(j));
        }
    }
    return acc;
}

}  // namespace

double mmd2(const Matrix& x, const Matrix& y, const PolyKernel& kernel, Estimator est) {
    if (x.rows() == 0 || y.rows() == 0) {
        throw MetricError("mmd2: empty sample set");
    }
    if (x.cols() != y.cols()) {
        throw MetricError(fmt::format("mmd2: dimension mismatch {} vs {}", x.shape_str(), y.shape_str()));
    }
    const PolyKernel k = kernel.resolved(x.cols());
    const auto n = static_cast<double>(x.rows());
    const auto m = static_cast<double>(y.rows());
    // Fixed argument order for the cross sum keeps mmd2(x, y) == mmd2(y, x) bitwise.
    const bool swap = std::ranges::lexicographical_compare(y.data(), x.data());
    const double kxy = (swap ? kernel_sum(y, x, k, false) : kernel_sum(x, y, k, false)) / (n * m);
    if (est == Estimator::Biased) {
        return kernel_sum(x, x, k, false) / (n * n) + kernel_sum(y, y, k, false) / (m * m) - 2.0 * kxy;
    }
    if (x.rows() < 2 || y.rows() < 2) {
        throw MetricError("mmd2: unbiased estimator needs at least 2 samples per set");
    }
    return kernel_sum(x, x, k, true) / (n * (n - 1.0)) + kernel_sum(y, y, k, true) / (m * (m - 1.0)) - 2.0 * kxy;
}

FeatureEmbedder FeatureEmbedder::identity() { return {}; }

FeatureEmbedder FeatureEmbedder::random_map(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed) {
    Rng rng(seed);
    FeatureEmbedder e;
    e.map_ = rng.normal_matrix(in_dim, out_dim, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    return e;
}

Matrix FeatureEmbedder::embed(const Matrix& x) const {
    if (map_.empty()) {
        return x;
    }
    return num::matmul(x, map_);
}

double a_mmd(std::span<const Matrix> finals, std::span<const Matrix> refs, const FeatureEmbedder& embedder,
             const MmdSettings& settings) {
    if (refs.empty()) {
        throw MetricError("a_mmd: no tasks");
    }
    if (finals.size() != refs.size()) {
        const std::size_t missing = std::min(finals.size(), refs.size()) + 1;
        throw MetricError(fmt::format("a_mmd: missing sample set for task {}", missing));
    }
    double total = 0.0;
    for (std::size_t j = 0; j < refs.size(); ++j) {
        if (finals[j].empty() || refs[j].empty()) {
            throw MetricError(fmt::format("a_mmd: missing sample set for task {}", j + 1));
        }
        total += mmd2(embedder.embed(refs[j]), embedder.embed(finals[j]), settings.kernel, settings.estimator);
    }
    return total / static_cast<double>(refs.size());
}

double f_mmd(std::span<const Matrix> own, std::span<const Matrix> finals, const FeatureEmbedder& embedder,
             const MmdSettings& settings) {
    const std::size_t n = finals.size();
    if (n < 2) {
        throw MetricError("f_mmd: undefined for fewer than 2 tasks");
    }
    if (own.size() < n - 1) {
        throw MetricError(fmt::format("f_mmd: missing own-time snapshot for task {}", own.size() + 1));
    }
    double total = 0.0;
    for (std::size_t j = 0; j + 1 < n; ++j) {
        if (own[j].empty() || finals[j].empty()) {
            throw MetricError(fmt::format("f_mmd: missing sample set for task {}", j + 1));
        }
        total += mmd2(embedder.embed(own[j]), embedder.embed(finals[j]), settings.kernel, settings.estimator);
    }
    return total / static_cast<double>(n - 1);
}

AccuracySummary a_n_f_n(const std::vector<std::vector<double>>& acc, ForgettingMode mode) {
    const std::size_t n = acc.size();
    if (n == 0) {
        throw MetricError("a_n_f_n: empty accuracy matrix");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (acc[i].size() != i + 1) {
            throw MetricError(fmt::format("a_n_f_n: row {} has {} entries, expected {}", i + 1, acc[i].size(), i + 1));
        }
    }
    AccuracySummary s;
    const auto& last = acc.back();
    for (double v : last) {
        s.a_n += v;
    }
    s.a_n /= static_cast<double>(n);
    if (n < 2) {
        return s;
    }
    for (std::size_t j = 0; j + 1 < n; ++j) {
        double peak = acc[j][j];
        if (mode == ForgettingMode::MaxDrop) {
            for (std::size_t i = j; i < n; ++i) {
                peak = std::max(peak, acc[i][j]);
            }
        }
        s.f_n += peak - last[j];
    }
    s.f_n /= static_cast<double>(n - 1);
    return s;
}

PairInterference interference_pair(std::span<const Matrix> prev, std::span<const Matrix> cur) {
    if (prev.size() != cur.size()) {
        throw MetricError(fmt::format("interference: {} sites vs {} sites", prev.size(), cur.size()));
    }
    std::size_t total = 0;
    std::size_t opposite = 0;
    double magnitude = 0.0;
    for (std::size_t s = 0; s < prev.size(); ++s) {
        if (!prev[s].same_shape(cur[s])) {
            throw MetricError(fmt::format("interference: site {} shape {} vs {}", s, prev[s].shape_str(),
                                          cur[s].shape_str()));
        }
        const auto p = prev[s].data();
        const auto c = cur[s].data();
        total += p.size();
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (p[i] * c[i] < 0.0) {
                ++opposite;
                magnitude += std::fabs(c[i]);
            }
        }
    }
    PairInterference out;
    if (total > 0) {
        out.opposite_fraction = 100.0 * static_cast<double>(opposite) / static_cast<double>(total);
    }
    if (opposite > 0) {
        out.opposite_magnitude = magnitude / static_cast<double>(opposite);
    }
    return out;
}

std::vector<PairInterference> interference_stats(const std::vector<std::vector<Matrix>>& deltas) {
    std::vector<PairInterference> out;
    for (std::size_t t = 1; t < deltas.size(); ++t) {
        PairInterference p = interference_pair(deltas[t - 1], deltas[t]);
        p.prev_task = static_cast<int>(t);
        p.task = static_cast<int>(t) + 1;
        out.push_back(p);
    }
    return out;
}

double mean_interference_magnitude(std::span<const PairInterference> stats) {
    if (stats.empty()) {
        return 0.0;
    }
    double acc = 0.0;
    for (const auto& s : stats) {
        acc += s.opposite_magnitude;
    }
    return acc / static_cast<double>(stats.size());
}

}  // namespace clora::metrics
