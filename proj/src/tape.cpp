// SPDX-License-Identifier: Apache-2.0

#include "clora/tape.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

namespace clora::num {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void accumulate(Matrix& dst, const Matrix& src) {
    if (dst.empty() && !src.empty()) {
        dst = src;
        return;
    }
    add_inplace(dst, src);
}

}  // namespace

Var Tape::push(Node n) {
    if (nodes_.size() >= UINT32_MAX - 1) {
        throw ContractError("tape is full");
    }
    if (n.op != Op::Leaf && n.op != Op::Constant) {
        n.requires_grad = std::ranges::any_of(n.parents, [&](std::uint32_t p) { return nodes_[p].requires_grad; });
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Matrix value) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
}

Var Tape::constant(Matrix value) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(value);
    return push(std::move(n));
}

double Tape::scalar_value(Var v) const {
    const auto& m = value(v);
    if (m.rows() != 1 || m.cols() != 1) {
        throw ContractError(fmt::format("scalar_value on {} node", m.shape_str()));
    }
    return m(0, 0);
}

Var Tape::matmul(Var a, Var b) {
    Node n;
    n.op = Op::MatMul;
    n.value = num::matmul(value(a), value(b));
    n.parents = {a.id, b.id};
    return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
    Node n;
    n.op = Op::Add;
    n.value = num::add(value(a), value(b));
    n.parents = {a.id, b.id};
    return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
    Node n;
    n.op = Op::Sub;
    n.value = num::sub(value(a), value(b));
    n.parents = {a.id, b.id};
    return push(std::move(n));
}

Var Tape::hadamard(Var a, Var b) {
    Node n;
    n.op = Op::Hadamard;
    n.value = num::hadamard(value(a), value(b));
    n.parents = {a.id, b.id};
    return push(std::move(n));
}

Var Tape::scale(Var a, double s) {
    Node n;
    n.op = Op::Scale;
    n.value = num::scale(value(a), s);
    n.param = s;
    n.parents = {a.id};
    return push(std::move(n));
}

Var Tape::abs(Var a) {
    Node n;
    n.op = Op::Abs;
    n.value = num::abs(value(a));
    n.parents = {a.id};
    return push(std::move(n));
}

Var Tape::row_softmax(Var a) {
    Node n;
    n.op = Op::RowSoftmax;
    n.value = num::row_softmax(value(a));
    n.parents = {a.id};
    return push(std::move(n));
}

Var Tape::frobenius_sq(Var a) {
    Node n;
    n.op = Op::FrobeniusSq;
    n.value = Matrix(1, 1, num::frobenius_sq(value(a)));
    n.parents = {a.id};
    return push(std::move(n));
}

Var Tape::sum(Var a) {
    Node n;
    n.op = Op::Sum;
    n.value = Matrix(1, 1, num::sum(value(a)));
    n.parents = {a.id};
    return push(std::move(n));
}

Var Tape::mean(Var a) {
    const auto count = static_cast<double>(value(a).size());
    return scale(sum(a), 1.0 / count);
}

Var Tape::transpose(Var a) {
    Node n;
    n.op = Op::Transpose;
    n.value = num::transpose(value(a));
    n.parents = {a.id};
    return push(std::move(n));
}

Var Tape::add_row(Var a, Var b) {
    const auto& x = value(a);
    const auto& r = value(b);
    if (r.rows() != 1 || r.cols() != x.cols()) {
        throw ShapeError(fmt::format("add_row: cannot broadcast {} over {}", r.shape_str(), x.shape_str()));
    }
    Node n;
    n.op = Op::AddRow;
    n.value = x;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto row = n.value.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] += r(0, j);
        }
    }
    n.parents = {a.id, b.id};
    return push(std::move(n));
}

Var Tape::concat_rows(std::span<const Var> parts) {
    std::vector<Matrix> vals;
    vals.reserve(parts.size());
    Node n;
    n.op = Op::ConcatRows;
    for (Var p : parts) {
        vals.push_back(value(p));
        n.parents.push_back(p.id);
    }
    n.value = num::concat_rows(vals);
    return push(std::move(n));
}

Var Tape::concat_cols(std::span<const Var> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_cols: no parts");
    }
    const std::size_t rows = value(parts.front()).rows();
    std::size_t cols = 0;
    Node n;
    n.op = Op::ConcatCols;
    for (Var p : parts) {
        if (value(p).rows() != rows) {
            throw ShapeError(fmt::format("concat_cols: row mismatch {} vs {}", value(parts.front()).shape_str(),
                                         value(p).shape_str()));
        }
        cols += value(p).cols();
        n.parents.push_back(p.id);
    }
    n.value = Matrix(rows, cols);
    std::size_t offset = 0;
    for (Var p : parts) {
        const auto& m = value(p);
        for (std::size_t i = 0; i < rows; ++i) {
            std::ranges::copy(m.row(i), n.value.row(i).begin() + static_cast<std::ptrdiff_t>(offset));
        }
        offset += m.cols();
    }
    return push(std::move(n));
}

Var Tape::slice_rows(Var a, std::size_t begin, std::size_t count) {
    Node n;
    n.op = Op::SliceRows;
    n.value = num::slice_rows(value(a), begin, count);
    n.index = begin;
    n.parents = {a.id};
    return push(std::move(n));
}

Var Tape::slice_cols(Var a, std::size_t begin, std::size_t count) {
    const auto& x = value(a);
    if (begin + count > x.cols()) {
        throw ShapeError(fmt::format("slice_cols: [{}, {}) out of range for {}", begin, begin + count, x.shape_str()));
    }
    Node n;
    n.op = Op::SliceCols;
    n.value = Matrix(x.rows(), count);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto src = x.row(i).subspan(begin, count);
        std::ranges::copy(src, n.value.row(i).begin());
    }
    n.index = begin;
    n.parents = {a.id};
    return push(std::move(n));
}

Var Tape::reshape(Var a, std::size_t rows, std::size_t cols) {
    const auto& x = value(a);
    if (rows * cols != x.size()) {
        throw ShapeError(fmt::format("reshape: {} cannot become {}x{}", x.shape_str(), rows, cols));
    }
    Node n;
    n.op = Op::Reshape;
    n.value = Matrix(rows, cols, std::vector<double>(x.data().begin(), x.data().end()));
    n.parents = {a.id};
    return push(std::move(n));
}

Var Tape::silu(Var a) {
    Node n;
    n.op = Op::Silu;
    n.value = value(a);
    for (double& v : n.value.data()) {
        v = v * sigmoid(v);
    }
    n.parents = {a.id};
    return push(std::move(n));
}

Var Tape::tanh(Var a) {
    Node n;
    n.op = Op::Tanh;
    n.value = value(a);
    for (double& v : n.value.data()) {
        v = std::tanh(v);
    }
    n.parents = {a.id};
    return push(std::move(n));
}

Var Tape::cross_entropy(Var logits, std::span<const int> labels) {
    const auto& z = value(logits);
    if (labels.size() != z.rows()) {
        throw ShapeError(fmt::format("cross_entropy: {} labels for {} logits", labels.size(), z.shape_str()));
    }
    const Matrix p = num::row_softmax(z);
    double loss = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= z.cols()) {
            throw ShapeError(fmt::format("cross_entropy: label {} outside {} classes", y, z.cols()));
        }
        loss -= std::log(std::max(p(i, static_cast<std::size_t>(y)), 1e-300));
    }
    Node n;
    n.op = Op::CrossEntropy;
    n.value = Matrix(1, 1, loss / static_cast<double>(z.rows()));
    n.labels.assign(labels.begin(), labels.end());
    n.parents = {logits.id};
    return push(std::move(n));
}

Gradients Tape::backward(Var root) const {
    const auto& r = node(root).value;
    if (r.rows() != 1 || r.cols() != 1) {
        throw ContractError(fmt::format("backward: root must be 1x1, got {}", r.shape_str()));
    }
    std::vector<Matrix> g(nodes_.size());
    g[root.id] = Matrix(1, 1, 1.0);

    for (std::size_t idx = root.id + 1; idx-- > 0;) {
        const Node& n = nodes_[idx];
        if (!n.requires_grad || g[idx].empty() || n.op == Op::Leaf || n.op == Op::Constant) {
            continue;
        }
        const Matrix& gy = g[idx];
        auto wants = [&](std::size_t k) { return nodes_[n.parents[k]].requires_grad; };
        auto pval = [&](std::size_t k) -> const Matrix& { return nodes_[n.parents[k]].value; };
        auto acc = [&](std::size_t k, const Matrix& m) { accumulate(g[n.parents[k]], m); };

        switch (n.op) {
        case Op::MatMul:
            if (wants(0)) acc(0, matmul_nt(gy, pval(1)));
            if (wants(1)) acc(1, matmul_tn(pval(0), gy));
            break;
        case Op::Add:
            if (wants(0)) acc(0, gy);
            if (wants(1)) acc(1, gy);
            break;
        case Op::Sub:
            if (wants(0)) acc(0, gy);
            if (wants(1)) acc(1, num::scale(gy, -1.0));
            break;
        case Op::Hadamard:
            if (wants(0)) acc(0, num::hadamard(gy, pval(1)));
            if (wants(1)) acc(1, num::hadamard(gy, pval(0)));
            break;
        case Op::Scale:
            acc(0, num::scale(gy, n.param));
            break;
        case Op::Abs: {
            Matrix d = gy;
            const auto x = pval(0).data();
            auto dd = d.data();
            for (std::size_t i = 0; i < dd.size(); ++i) {
                dd[i] *= x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
            }
            acc(0, d);
            break;
        }
        case Op::RowSoftmax: {
            Matrix d(n.value.rows(), n.value.cols());
            for (std::size_t i = 0; i < d.rows(); ++i) {
                auto y = n.value.row(i);
                auto gr = gy.row(i);
                double dot = 0.0;
                for (std::size_t j = 0; j < y.size(); ++j) {
                    dot += gr[j] * y[j];
                }
                auto dr = d.row(i);
                for (std::size_t j = 0; j < y.size(); ++j) {
                    dr[j] = y[j] * (gr[j] - dot);
                }
            }
            acc(0, d);
            break;
        }
        case Op::FrobeniusSq:
            acc(0, num::scale(pval(0), 2.0 * gy(0, 0)));
            break;
        case Op::Sum:
            acc(0, Matrix(pval(0).rows(), pval(0).cols(), gy(0, 0)));
            break;
        case Op::Transpose:
            acc(0, num::transpose(gy));
            break;
        case Op::AddRow:
            if (wants(0)) acc(0, gy);
            if (wants(1)) {
                Matrix col(1, gy.cols());
                for (std::size_t i = 0; i < gy.rows(); ++i) {
                    for (std::size_t j = 0; j < gy.cols(); ++j) {
                        col(0, j) += gy(i, j);
                    }
                }
                acc(1, col);
            }
            break;
        case Op::ConcatRows: {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                const std::size_t rows = pval(k).rows();
                if (wants(k)) acc(k, num::slice_rows(gy, offset, rows));
                offset += rows;
            }
            break;
        }
        case Op::ConcatCols: {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                const std::size_t cols = pval(k).cols();
                if (wants(k)) {
                    Matrix part(gy.rows(), cols);
                    for (std::size_t i = 0; i < gy.rows(); ++i) {
                        std::ranges::copy(gy.row(i).subspan(offset, cols), part.row(i).begin());
                    }
                    acc(k, part);
                }
                offset += cols;
            }
            break;
        }
        case Op::SliceRows: {
            Matrix d(pval(0).rows(), pval(0).cols());
            std::ranges::copy(gy.data(), d.data().begin() + static_cast<std::ptrdiff_t>(n.index * d.cols()));
            acc(0, d);
            break;
        }
        case Op::SliceCols: {
            Matrix d(pval(0).rows(), pval(0).cols());
            for (std::size_t i = 0; i < gy.rows(); ++i) {
                std::ranges::copy(gy.row(i), d.row(i).begin() + static_cast<std::ptrdiff_t>(n.index));
            }
            acc(0, d);
            break;
        }
        case Op::Reshape:
            acc(0, Matrix(pval(0).rows(), pval(0).cols(), std::vector<double>(gy.data().begin(), gy.data().end())));
            break;
        case Op::Silu: {
            Matrix d = gy;
            const auto x = pval(0).data();
            auto dd = d.data();
            for (std::size_t i = 0; i < dd.size(); ++i) {
                const double s = sigmoid(x[i]);
                dd[i] *= s * (1.0 + x[i] * (1.0 - s));
            }
            acc(0, d);
            break;
        }
        case Op::Tanh: {
            Matrix d = gy;
            const auto y = n.value.data();
            auto dd = d.data();
            for (std::size_t i = 0; i < dd.size(); ++i) {
                dd[i] *= 1.0 - y[i] * y[i];
            }
            acc(0, d);
            break;
        }
        case Op::CrossEntropy: {
            Matrix d = num::row_softmax(pval(0));
            const double w = gy(0, 0) / static_cast<double>(d.rows());
            for (std::size_t i = 0; i < d.rows(); ++i) {
                d(i, static_cast<std::size_t>(n.labels[i])) -= 1.0;
            }
            for (double& v : d.data()) {
                v *= w;
            }
            acc(0, d);
            break;
        }
        case Op::Leaf:
        case Op::Constant:
            break;
        }
    }

    for (std::size_t idx = 0; idx < nodes_.size(); ++idx) {
        if (g[idx].empty()) {
            g[idx] = Matrix(nodes_[idx].value.rows(), nodes_[idx].value.cols());
        }
    }
    Gradients out;
    out.grads_ = std::move(g);
    return out;
}

double finite_diff_check(const LossBuilder& loss, std::span<const Matrix> point, double eps) {
    if (!(eps > 0.0)) {
        throw ContractError("finite_diff_check: eps must be positive");
    }
    auto evaluate = [&](std::span<const Matrix> at) {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(at.size());
        for (const auto& m : at) {
            vars.push_back(tape.constant(m));
        }
        const double v = tape.scalar_value(loss(tape, vars));
        if (!std::isfinite(v)) {
            throw EvaluationError("finite_diff_check: loss is not finite");
        }
        return v;
    };

    Tape tape;
    std::vector<Var> vars;
    vars.reserve(point.size());
    for (const auto& m : point) {
        vars.push_back(tape.leaf(m));
    }
    const Var root = loss(tape, vars);
    if (!std::isfinite(tape.scalar_value(root))) {
        throw EvaluationError("finite_diff_check: loss is not finite");
    }
    const Gradients grads = tape.backward(root);

    std::vector<Matrix> probe(point.begin(), point.end());
    double worst = 0.0;
    for (std::size_t k = 0; k < probe.size(); ++k) {
        const Matrix& analytic = grads.of(vars[k]);
        for (std::size_t i = 0; i < probe[k].size(); ++i) {
            const double saved = probe[k].data()[i];
            probe[k].data()[i] = saved + eps;
            const double up = evaluate(probe);
            probe[k].data()[i] = saved - eps;
            const double down = evaluate(probe);
            probe[k].data()[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic.data()[i];
            const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace clora::num
