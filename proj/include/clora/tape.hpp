// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode differentiation over a fixed set of matrix
// primitives. A Tape records nodes in creation order, which is already a
// topological order, so backward is a single reverse sweep.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "clora/matrix.hpp"

namespace clora::num {

/// Raised when a tape is used outside its contract (e.g. non-scalar root).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Raised when a loss evaluation produces NaN or Inf.
class EvaluationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Var {
    std::uint32_t id = UINT32_MAX;
    [[nodiscard]] bool valid() const noexcept { return id != UINT32_MAX; }
};

enum class Op : std::uint8_t {
    Leaf,
    Constant,
    MatMul,
    Add,
    Sub,
    Hadamard,
    Scale,
    Abs,
    RowSoftmax,
    FrobeniusSq,
    Sum,
    Transpose,
    AddRow,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    Reshape,
    Silu,
    Tanh,
    CrossEntropy,
};

class Gradients;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// Trainable leaf; backward produces a gradient for it.
    Var leaf(Matrix value);
    /// Constant input; never receives a gradient.
    Var constant(Matrix value);
    Var scalar(double v) { return constant(Matrix(1, 1, v)); }

    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var hadamard(Var a, Var b);
    Var scale(Var a, double s);
    /// Entrywise |x|; subgradient 0 at x == 0.
    Var abs(Var a);
    Var row_softmax(Var a);
    Var frobenius_sq(Var a);
    Var sum(Var a);
    Var mean(Var a);
    Var transpose(Var a);
    /// a (m×n) plus row vector b (1×n) broadcast over rows.
    Var add_row(Var a, Var b);
    Var concat_rows(std::span<const Var> parts);
    Var concat_cols(std::span<const Var> parts);
    Var slice_rows(Var a, std::size_t begin, std::size_t count);
    Var slice_cols(Var a, std::size_t begin, std::size_t count);
    /// Reinterpret the row-major buffer with a new shape.
    Var reshape(Var a, std::size_t rows, std::size_t cols);
    Var silu(Var a);
    Var tanh(Var a);
    /// Mean softmax cross-entropy of logits (B×C) against integer labels.
    Var cross_entropy(Var logits, std::span<const int> labels);

    [[nodiscard]] const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
    [[nodiscard]] double scalar_value(Var v) const;
    [[nodiscard]] bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse sweep from a 1×1 root. Throws ContractError otherwise.
    [[nodiscard]] Gradients backward(Var root) const;

private:
    struct Node {
        Op op = Op::Constant;
        Matrix value;
        std::vector<std::uint32_t> parents;
        bool requires_grad = false;
        double param = 0.0;
        std::size_t index = 0;
        std::vector<int> labels;
    };

    Var push(Node n);
    const Node& node(Var v) const { return nodes_.at(v.id); }

    std::vector<Node> nodes_;
};

class Gradients {
public:
    /// Gradient of the root with respect to v; zeros when v is unreachable.
    [[nodiscard]] const Matrix& of(Var v) const { return grads_.at(v.id); }

private:
    friend class Tape;
    std::vector<Matrix> grads_;
};

/// Builds a scalar loss on a tape from one Var per trainable input.
using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares reverse-mode gradients of `loss` at `point` against central
/// differences with step eps. Returns the largest per-coordinate
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
double finite_diff_check(const LossBuilder& loss, std::span<const Matrix> point, double eps);

}  // namespace clora::num
