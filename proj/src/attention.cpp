// SPDX-License-Identifier: Apache-2.0

#include "clora/attention.hpp"

#include <cmath>
#include <fmt/format.h>

namespace clora::attn {

Matrix AttentionWeights::query_weight() const {
    if (const auto* m = std::get_if<Matrix>(&w_q)) {
        return *m;
    }
    return std::get<AdapterStack>(w_q).effective_weight();
}

void AttentionWeights::validate() const {
    const std::size_t q_cols = self_mode() ? std::get<AdapterStack>(w_q).d2() : std::get<Matrix>(w_q).cols();
    if (q_cols != d_prime || w_k.d2() != d_prime || w_v.d2() != d_prime) {
        throw num::ShapeError(fmt::format("attention: projections map to ({}, {}, {}) columns, expected d'={}", q_cols,
                                          w_k.d2(), w_v.d2(), d_prime));
    }
    if (w_k.d1() != w_v.d1()) {
        throw num::ShapeError(fmt::format("attention: W_K is {}x{} but W_V is {}x{}", w_k.d1(), w_k.d2(), w_v.d1(),
                                          w_v.d2()));
    }
}

AttentionWeights make_cross_weights(Matrix w_q, Matrix w_k, Matrix w_v, const std::string& prefix) {
    AttentionWeights w;
    w.d_prime = w_q.cols();
    w.w_q = std::move(w_q);
    w.w_k = AdapterStack(prefix + ".k", std::move(w_k));
    w.w_v = AdapterStack(prefix + ".v", std::move(w_v));
    w.validate();
    return w;
}

AttentionWeights make_self_weights(Matrix w_q, Matrix w_k, Matrix w_v, const std::string& prefix) {
    AttentionWeights w;
    w.d_prime = w_q.cols();
    w.w_q = AdapterStack(prefix + ".q", std::move(w_q));
    w.w_k = AdapterStack(prefix + ".k", std::move(w_k));
    w.w_v = AdapterStack(prefix + ".v", std::move(w_v));
    w.validate();
    return w;
}

Var attention(Tape& tape, Var q_src, Var kv_src, Var wq, Var wk, Var wv, const Matrix* logit_mask) {
    const Var q = tape.matmul(q_src, wq);
    const Var k = tape.matmul(kv_src, wk);
    const Var v = tape.matmul(kv_src, wv);
    const double d_prime = static_cast<double>(tape.value(q).cols());
    Var logits = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / std::sqrt(d_prime));
    if (logit_mask != nullptr) {
        logits = tape.add(logits, tape.constant(*logit_mask));
    }
    return tape.matmul(tape.row_softmax(logits), v);
}

Matrix cross_attention(const Matrix& f, const Matrix& c, const AttentionWeights& w) {
    if (w.self_mode()) {
        throw num::ShapeError("cross_attention: weights are in self-attention mode");
    }
    Tape tape;
    const Var out = attention(tape, tape.constant(f), tape.constant(c), tape.constant(w.query_weight()),
                              tape.constant(w.w_k.effective_weight()), tape.constant(w.w_v.effective_weight()));
    return tape.value(out);
}

Matrix self_attention_qkv(const Matrix& x, const AttentionWeights& w) {
    if (!w.self_mode()) {
        throw num::ShapeError("self_attention_qkv: weights are in cross-attention mode");
    }
    Tape tape;
    const Var xv = tape.constant(x);
    const Var out = attention(tape, xv, xv, tape.constant(w.query_weight()), tape.constant(w.w_k.effective_weight()),
                              tape.constant(w.w_v.effective_weight()));
    return tape.value(out);
}

}  // namespace clora::attn
