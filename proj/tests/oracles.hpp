// Straight-line reference implementations used as test oracles. Nothing here
// shares code with the library beyond the Matrix container.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "clora/matrix.hpp"
#include "clora/rng.hpp"

namespace oracle {

using clora::num::Matrix;

inline Matrix random(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
    clora::Rng rng(seed);
    return rng.normal_matrix(r, c, scale);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            out(i, j) = s;
        }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) += b(i, j);
    return out;
}

inline Matrix softmax_rows(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double m = a(i, 0);
        for (std::size_t j = 1; j < a.cols(); ++j) m = std::max(m, a(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) z += std::exp(a(i, j) - m);
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = std::exp(a(i, j) - m) / z;
    }
    return out;
}

// softmax(q kᵀ / sqrt(d)) v with explicit loops.
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v) {
    const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Matrix logits(q.rows(), k.rows());
    for (std::size_t i = 0; i < q.rows(); ++i)
        for (std::size_t j = 0; j < k.rows(); ++j) {
            double d = 0.0;
            for (std::size_t c = 0; c < q.cols(); ++c) d += q(i, c) * k(j, c);
            logits(i, j) = d * s;
        }
    return oracle::matmul(oracle::softmax_rows(logits), v);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
    return m;
}

inline double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double v : a.data()) m = std::max(m, std::abs(v));
    return m;
}

inline double rel_diff(const Matrix& a, const Matrix& b) {
    return oracle::max_abs_diff(a, b) / std::max(1e-300, std::max(oracle::max_abs(a), oracle::max_abs(b)));
}

// Biased V-statistic MMD² with a polynomial kernel, as three double loops.
inline double mmd2(const Matrix& x, const Matrix& y, int degree, double coef0, double scale) {
    auto k = [&](const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
        double d = 0.0;
        for (std::size_t c = 0; c < a.cols(); ++c) d += a(i, c) * b(j, c);
        return std::pow(scale * d + coef0, degree);
    };
    double xx = 0.0, yy = 0.0, xy = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.rows(); ++j) xx += k(x, i, x, j);
    for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < y.rows(); ++j) yy += k(y, i, y, j);
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < y.rows(); ++j) xy += k(x, i, y, j);
    const double nx = static_cast<double>(x.rows());
    const double ny = static_cast<double>(y.rows());
    return xx / (nx * nx) + yy / (ny * ny) - 2.0 * xy / (nx * ny);
}

// Singular values by one-sided Jacobi rotations.
inline std::vector<double> singular_values(Matrix a) {
    const std::size_t n = a.cols();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    alpha += a(i, p) * a(i, p);
                    beta += a(i, q) * a(i, q);
                    gamma += a(i, p) * a(i, q);
                }
                if (std::abs(gamma) < 1e-300) continue;
                off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    const double ap = a(i, p), aq = a(i, q);
                    a(i, p) = c * ap - s * aq;
                    a(i, q) = s * ap + c * aq;
                }
            }
        if (off < 1e-15) break;
    }
    std::vector<double> sv;
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, j) * a(i, j);
        sv.push_back(std::sqrt(s));
    }
    std::ranges::sort(sv, std::greater<>());
    return sv;
}

}  // namespace oracle
