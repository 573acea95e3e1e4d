#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "clora/attention.hpp"
#include "oracles.hpp"

using namespace clora;
using attn::AttentionWeights;
using num::Matrix;
using num::Tape;
using num::Var;

namespace {

Matrix rnd(std::size_t r, std::size_t c, std::uint64_t seed, double s = 1.0) { return oracle::random(r, c, seed, s); }

AttentionWeights cross_weights(std::size_t d_f, std::size_t d_c, std::size_t d_prime, std::uint64_t seed) {
    return attn::make_cross_weights(rnd(d_f, d_prime, seed), rnd(d_c, d_prime, seed + 1), rnd(d_c, d_prime, seed + 2));
}

AttentionWeights self_weights(std::size_t d, std::size_t d_prime, std::uint64_t seed) {
    return attn::make_self_weights(rnd(d, d_prime, seed), rnd(d, d_prime, seed + 1), rnd(d, d_prime, seed + 2));
}

void set_random_active(lora::AdapterStack& s, std::size_t r, std::uint64_t seed) {
    s.new_task_pair(r, seed);
    s.active_mut().b = rnd(r, s.d2(), seed + 1, 0.3);
}

}  // namespace

TEST_CASE("single condition token gives the value row everywhere") {
    const AttentionWeights w = cross_weights(5, 3, 4, 1);
    const Matrix f = rnd(6, 5, 2);
    const Matrix c = rnd(1, 3, 3);
    const Matrix out = attn::cross_attention(f, c, w);
    const Matrix v = oracle::matmul(c, w.w_v.effective_weight());
    REQUIRE(out.rows() == 6);
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) CHECK(std::abs(out(i, j) - v(0, j)) <= 1e-14);
}

TEST_CASE("fresh adapters leave the pretrained block unchanged") {
    AttentionWeights w = cross_weights(4, 4, 4, 5);
    const Matrix f = rnd(3, 4, 6), c = rnd(2, 4, 7);
    const Matrix before = attn::cross_attention(f, c, w);
    w.w_k.new_task_pair(2, 8);
    w.w_v.new_task_pair(2, 9);
    CHECK(oracle::max_abs_diff(attn::cross_attention(f, c, w), before) <= 1e-14);

    AttentionWeights s = self_weights(8, 4, 10);
    const Matrix x = rnd(4, 8, 11);
    const Matrix self_before = attn::self_attention_qkv(x, s);
    std::get<lora::AdapterStack>(s.w_q).new_task_pair(2, 12);
    s.w_k.new_task_pair(2, 13);
    s.w_v.new_task_pair(2, 14);
    CHECK(oracle::max_abs_diff(attn::self_attention_qkv(x, s), self_before) <= 1e-14);
}

TEST_CASE("cross attention matches the brute-force oracle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        AttentionWeights w = cross_weights(4, 4, 4, 20 * seed);
        set_random_active(w.w_k, 2, 20 * seed + 5);
        set_random_active(w.w_v, 2, 20 * seed + 7);
        const Matrix f = rnd(3, 4, 20 * seed + 9), c = rnd(2, 4, 20 * seed + 10);
        const Matrix expected = oracle::attention(oracle::matmul(f, w.query_weight()),
                                                  oracle::matmul(c, w.w_k.effective_weight()),
                                                  oracle::matmul(c, w.w_v.effective_weight()));
        const Matrix out = attn::cross_attention(f, c, w);
        CHECK(out.rows() == 3);
        CHECK(out.cols() == 4);
        CHECK(oracle::max_abs_diff(out, expected) <= 1e-12);
    }
}

TEST_CASE("self attention matches the brute-force oracle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        AttentionWeights w = self_weights(8, 4, 30 * seed);
        set_random_active(std::get<lora::AdapterStack>(w.w_q), 2, 30 * seed + 3);
        set_random_active(w.w_k, 2, 30 * seed + 5);
        set_random_active(w.w_v, 2, 30 * seed + 7);
        const Matrix x = rnd(4, 8, 30 * seed + 9);
        const Matrix expected = oracle::attention(oracle::matmul(x, w.query_weight()),
                                                  oracle::matmul(x, w.w_k.effective_weight()),
                                                  oracle::matmul(x, w.w_v.effective_weight()));
        CHECK(oracle::max_abs_diff(attn::self_attention_qkv(x, w), expected) <= 1e-12);
    }
}

TEST_CASE("self attention on one token is its value projection") {
    const AttentionWeights w = self_weights(6, 3, 40);
    const Matrix x = rnd(1, 6, 41);
    CHECK(oracle::max_abs_diff(attn::self_attention_qkv(x, w), oracle::matmul(x, w.w_v.effective_weight())) <= 1e-14);
}

TEST_CASE("self attention is permutation equivariant") {
    const AttentionWeights w = self_weights(8, 4, 50);
    const Matrix x = rnd(5, 8, 51);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    Matrix px(5, 8);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 8; ++j) px(i, j) = x(perm[i], j);
    const Matrix out = attn::self_attention_qkv(x, w);
    const Matrix pout = attn::self_attention_qkv(px, w);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) CHECK(std::abs(pout(i, j) - out(perm[i], j)) <= 1e-12);
}

TEST_CASE("adding a constant to a logit row leaves the output unchanged") {
    const Matrix f = rnd(4, 5, 60), c = rnd(3, 5, 61);
    const Matrix wq = rnd(5, 4, 62), wk = rnd(5, 4, 63), wv = rnd(5, 4, 64);
    Matrix shift(4, 3);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) shift(i, j) = 10.0 * static_cast<double>(i) - 7.5;
    Tape t;
    const Var plain = attn::attention(t, t.constant(f), t.constant(c), t.constant(wq), t.constant(wk), t.constant(wv));
    const Var shifted =
        attn::attention(t, t.constant(f), t.constant(c), t.constant(wq), t.constant(wk), t.constant(wv), &shift);
    CHECK(oracle::max_abs_diff(t.value(plain), t.value(shifted)) <= 1e-10);
}

TEST_CASE("gradients reach the active K and V pairs") {
    AttentionWeights w = cross_weights(4, 3, 4, 70);
    set_random_active(w.w_k, 2, 71);
    set_random_active(w.w_v, 2, 73);
    const Matrix f = rnd(3, 4, 75), c = rnd(2, 3, 76), target = rnd(3, 4, 77);
    const Matrix wq = w.query_weight();
    const num::LossBuilder loss = [&](Tape& t, std::span<const Var> v) {
        const lora::ActiveVars k{v[0], v[1], t.matmul(v[0], v[1])};
        const lora::ActiveVars vv{v[2], v[3], t.matmul(v[2], v[3])};
        const Var out = attn::attention(t, t.constant(f), t.constant(c), t.constant(wq), w.w_k.effective_weight(t, k),
                                        w.w_v.effective_weight(t, vv));
        return t.frobenius_sq(t.sub(out, t.constant(target)));
    };
    const std::vector<Matrix> point{w.w_k.active().a, w.w_k.active().b, w.w_v.active().a, w.w_v.active().b};
    CHECK(num::finite_diff_check(loss, point, 1e-5) <= 1e-5);

    Tape t;
    std::vector<Var> leaves;
    for (const auto& m : point) leaves.push_back(t.leaf(m));
    const auto g = t.backward(loss(t, leaves));
    for (const Var l : leaves) CHECK(num::frobenius_sq(g.of(l)) > 0.0);
}

TEST_CASE("shape errors") {
    CHECK_THROWS_AS((void)attn::make_cross_weights(rnd(4, 4, 1), rnd(3, 5, 2), rnd(3, 4, 3)), num::ShapeError);
    CHECK_THROWS_AS((void)attn::make_cross_weights(rnd(4, 4, 1), rnd(3, 4, 2), rnd(2, 4, 3)), num::ShapeError);
    const AttentionWeights w = cross_weights(4, 3, 4, 80);
    CHECK_THROWS_AS((void)attn::cross_attention(rnd(2, 5, 81), rnd(2, 3, 82), w), num::ShapeError);
    CHECK_THROWS_AS((void)attn::cross_attention(rnd(2, 4, 81), rnd(2, 4, 82), w), num::ShapeError);
    CHECK_THROWS_AS((void)attn::self_attention_qkv(rnd(2, 4, 83), w), num::ShapeError);
    const AttentionWeights s = self_weights(4, 4, 84);
    CHECK_THROWS_AS((void)attn::cross_attention(rnd(2, 4, 85), rnd(2, 4, 86), s), num::ShapeError);
}
