// SPDX-License-Identifier: Apache-2.0

#include "clora/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

namespace clora::num {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError(fmt::format("matrix data length {} does not match {}x{}", data_.size(), rows, cols));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) {
            throw ShapeError("ragged initializer list");
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

std::string Matrix::shape_str() const { return fmt::format("{}x{}", rows_, cols_); }

bool Matrix::all_finite() const noexcept {
    return std::ranges::all_of(data_, [](double v) { return std::isfinite(v); });
}

namespace {

void require_same(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, a.shape_str(), b.shape_str()));
    }
}

template <class F>
Matrix zip(const Matrix& a, const Matrix& b, const char* op, F f) {
    require_same(a, b, op);
    Matrix out(a.rows(), a.cols());
    auto x = a.data();
    auto y = b.data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = f(x[i], y[i]);
    }
    return out;
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError(fmt::format("matmul: cannot multiply {} by {}", a.shape_str(), b.shape_str()));
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = a.cols();
    const std::size_t m = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* orow = out.data().data() + i * m;
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) {
                continue;
            }
            const double* brow = b.data().data() + k * m;
            for (std::size_t j = 0; j < m; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError(fmt::format("matmul_tn: cannot multiply ({})T by {}", a.shape_str(), b.shape_str()));
    }
    Matrix out(a.cols(), b.cols());
    const std::size_t m = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* brow = b.data().data() + k * m;
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) {
                continue;
            }
            double* orow = out.data().data() + i * m;
            for (std::size_t j = 0; j < m; ++j) {
                orow[j] += aki * brow[j];
            }
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError(fmt::format("matmul_nt: cannot multiply {} by ({})T", a.shape_str(), b.shape_str()));
    }
    Matrix out(a.rows(), b.rows());
    const std::size_t n = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* arow = a.data().data() + i * n;
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* brow = b.data().data() + j * n;
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                acc += arow[k] * brow[k];
            }
            out(i, j) = acc;
        }
    }
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
    return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Matrix sub(const Matrix& a, const Matrix& b) {
    return zip(a, b, "sub", [](double x, double y) { return x - y; });
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    return zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}

Matrix scale(const Matrix& a, double s) {
    Matrix out = a;
    for (double& v : out.data()) {
        v *= s;
    }
    return out;
}

Matrix abs(const Matrix& a) {
    Matrix out = a;
    for (double& v : out.data()) {
        v = std::fabs(v);
    }
    return out;
}

Matrix row_softmax(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto in = a.row(i);
        auto o = out.row(i);
        const double mx = *std::ranges::max_element(in);
        double z = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            o[j] = std::exp(in[j] - mx);
            z += o[j];
        }
        for (double& v : o) {
            v /= z;
        }
    }
    return out;
}

double frobenius_sq(const Matrix& a) {
    double acc = 0.0;
    for (double v : a.data()) {
        acc += v * v;
    }
    return acc;
}

double sum(const Matrix& a) {
    double acc = 0.0;
    for (double v : a.data()) {
        acc += v;
    }
    return acc;
}

double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double v : a.data()) {
        m = std::max(m, std::fabs(v));
    }
    return m;
}

void add_inplace(Matrix& dst, const Matrix& src) { axpy_inplace(dst, 1.0, src); }

void axpy_inplace(Matrix& dst, double alpha, const Matrix& src) {
    require_same(dst, src, "axpy");
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += alpha * s[i];
    }
}

double max_rel_diff(const Matrix& a, const Matrix& b) {
    require_same(a, b, "max_rel_diff");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.data()[i];
        const double y = b.data()[i];
        const double denom = std::max({1.0, std::fabs(x), std::fabs(y)});
        worst = std::max(worst, std::fabs(x - y) / denom);
    }
    return worst;
}

Matrix concat_rows(std::span<const Matrix> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no parts");
    }
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) {
            throw ShapeError(fmt::format("concat_rows: column mismatch {} vs {}", parts.front().shape_str(), p.shape_str()));
        }
        rows += p.rows();
    }
    std::vector<double> data;
    data.reserve(rows * cols);
    for (const auto& p : parts) {
        data.insert(data.end(), p.data().begin(), p.data().end());
    }
    return {rows, cols, std::move(data)};
}

Matrix slice_rows(const Matrix& a, std::size_t begin, std::size_t count) {
    if (begin + count > a.rows()) {
        throw ShapeError(fmt::format("slice_rows: [{}, {}) out of range for {}", begin, begin + count, a.shape_str()));
    }
    auto first = a.data().begin() + static_cast<std::ptrdiff_t>(begin * a.cols());
    return {count, a.cols(), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * a.cols()))};
}

}  // namespace clora::num
