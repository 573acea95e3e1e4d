// SPDX-License-Identifier: Apache-2.0
//
// Single-head attention with adapter hook points.
//
//   Q = f·W_Q,  K = c·W_K,  V = c·W_V,  out = softmax(Q Kᵀ / sqrt(d')) V
//
// Cross-attention takes queries from latent features f and keys/values from
// condition tokens c; only W_K and W_V carry adapters. Self-attention uses
// f = c = x and adapts all three projections.

#pragma once

#include <optional>
#include <variant>

#include "clora/adapter.hpp"
#include "clora/matrix.hpp"
#include "clora/tape.hpp"

namespace clora::attn {

using lora::AdapterStack;
using num::Matrix;
using num::Tape;
using num::Var;

struct AttentionWeights {
    std::variant<Matrix, AdapterStack> w_q;
    AdapterStack w_k;
    AdapterStack w_v;
    std::size_t d_prime = 0;

    [[nodiscard]] bool self_mode() const noexcept { return std::holds_alternative<AdapterStack>(w_q); }
    [[nodiscard]] Matrix query_weight() const;
    /// Throws ShapeError unless all projections map into d_prime columns.
    void validate() const;
};

/// Weights for cross mode: plain frozen W_Q, fresh stacks on W_K and W_V.
AttentionWeights make_cross_weights(Matrix w_q, Matrix w_k, Matrix w_v, const std::string& prefix = "attn");
/// Weights for self mode: stacks on all three projections.
AttentionWeights make_self_weights(Matrix w_q, Matrix w_k, Matrix w_v, const std::string& prefix = "attn");

/// softmax(q_src·wq (kv_src·wk)ᵀ / sqrt(d') + mask) · kv_src·wv on the tape.
/// The optional additive mask is a constant (e.g. block-diagonal batching).
Var attention(Tape& tape, Var q_src, Var kv_src, Var wq, Var wk, Var wv, const Matrix* logit_mask = nullptr);

/// Untracked cross-attention through the stacks' effective weights.
Matrix cross_attention(const Matrix& f, const Matrix& c, const AttentionWeights& w);
/// Untracked self-attention through the stacks' effective weights.
Matrix self_attention_qkv(const Matrix& x, const AttentionWeights& w);

}  // namespace clora::attn
