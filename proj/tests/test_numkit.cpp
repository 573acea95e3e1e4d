#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "clora/matrix.hpp"
#include "clora/tape.hpp"
#include "oracles.hpp"

using namespace clora::num;

namespace {

constexpr double kFdEps = 1e-5;
constexpr int kPointsPerPrimitive = 100;

Matrix rnd(std::size_t r, std::size_t c, std::uint64_t seed, double s = 1.0) { return oracle::random(r, c, seed, s); }

// Random entries kept away from 0 so |x| stays differentiable under the step.
Matrix rnd_away_from_zero(std::size_t r, std::size_t c, std::uint64_t seed) {
    Matrix m = rnd(r, c, seed);
    for (double& v : m.data()) v += v >= 0 ? 0.5 : -0.5;
    return m;
}

// Projects a matrix-valued expression to a scalar with fixed random weights so
// every output entry contributes to the checked gradient.
Var project(Tape& t, Var y, std::uint64_t seed) {
    const Matrix& v = t.value(y);
    return t.sum(t.hadamard(y, t.constant(rnd(v.rows(), v.cols(), seed))));
}

}  // namespace

TEST_CASE("matmul examples") {
    CHECK(matmul(Matrix{{1, 0}, {0, 1}}, Matrix{{5, 6}, {7, 8}}) == Matrix{{5, 6}, {7, 8}});
    // hand dot product: 1*3 + 2*4
    CHECK(matmul(Matrix{{1, 2}}, Matrix{{3}, {4}}) == Matrix{{11}});
    try {
        (void)matmul(Matrix(2, 3), Matrix(4, 2));
        FAIL("expected shape error");
    } catch (const ShapeError& e) {
        const std::string what = e.what();
        CHECK(what.find("2x3") != std::string::npos);
        CHECK(what.find("4x2") != std::string::npos);
    }
}

TEST_CASE("matmul variants agree with the loop oracle") {
    const Matrix a = rnd(5, 3, 1), b = rnd(3, 4, 2), c = rnd(5, 4, 3);
    CHECK(oracle::max_abs_diff(matmul(a, b), oracle::matmul(a, b)) < 1e-14);
    CHECK(oracle::max_abs_diff(matmul_tn(a, c), oracle::matmul(oracle::transpose(a), c)) < 1e-14);
    CHECK(oracle::max_abs_diff(matmul_nt(c, b), oracle::matmul(c, oracle::transpose(b))) < 1e-14);
}

TEST_CASE("hadamard examples") {
    CHECK(hadamard(Matrix{{1, -2}, {0, 3}}, Matrix{{2, 1}, {5, -1}}) == Matrix{{2, -2}, {0, -3}});
    const Matrix x = rnd(3, 4, 4);
    CHECK(hadamard(x, Matrix::zeros(3, 4)) == Matrix::zeros(3, 4));
    CHECK(hadamard(x, Matrix::ones(3, 4)) == x);
    CHECK_THROWS_AS((void)hadamard(x, Matrix(4, 3)), ShapeError);
}

TEST_CASE("row_softmax examples") {
    CHECK(row_softmax(Matrix{{0, 0}}) == Matrix{{0.5, 0.5}});
    const Matrix big = row_softmax(Matrix{{1000, 1000}});
    CHECK(big(0, 0) == 0.5);
    CHECK(big(0, 1) == 0.5);
    const Matrix s = row_softmax(Matrix{{0, std::log(3.0)}});
    CHECK(s(0, 0) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(s(0, 1) == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("row_softmax rows sum to one and ignore row shifts") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Matrix x = rnd(4, 7, seed, 5.0);
        const Matrix s = row_softmax(x);
        for (std::size_t i = 0; i < s.rows(); ++i) {
            double sum = 0.0;
            for (double v : s.row(i)) {
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (double& v : x.row(i)) v += 3.7 * static_cast<double>(i + 1);
        CHECK(oracle::max_abs_diff(row_softmax(x), s) <= 1e-12);
    }
}

TEST_CASE("frobenius_sq examples") {
    CHECK(frobenius_sq(Matrix::zeros(3, 2)) == 0.0);
    CHECK(frobenius_sq(Matrix{{3, 4}}) == 25.0);
    CHECK(frobenius_sq(Matrix::identity(6)) == 6.0);
}

TEST_CASE("matmul is associative on random triples") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const Matrix a = rnd(3, 5, 3 * seed), b = rnd(5, 4, 3 * seed + 1), c = rnd(4, 2, 3 * seed + 2);
        CHECK(oracle::rel_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) <= 1e-9);
    }
}

TEST_CASE("operations are deterministic and keep finite inputs finite") {
    const Matrix a = rnd(6, 6, 9), b = rnd(6, 6, 10);
    const Matrix r1 = row_softmax(matmul(a, b));
    const Matrix r2 = row_softmax(matmul(a, b));
    CHECK(r1 == r2);
    CHECK(r1.all_finite());
    CHECK(row_softmax(Matrix{{1e300, -1e300}}).all_finite());
}

TEST_CASE("backward examples") {
    SUBCASE("grad of frobenius_sq is 2A") {
        Tape t;
        const Matrix a = rnd(3, 4, 11);
        const Var x = t.leaf(a);
        const auto g = t.backward(t.frobenius_sq(x));
        CHECK(oracle::max_abs_diff(g.of(x), scale(a, 2.0)) == 0.0);
    }
    SUBCASE("unreachable leaf gets zeros") {
        Tape t;
        const Var x = t.leaf(rnd(2, 2, 12));
        const Var y = t.leaf(rnd(2, 3, 13));
        const auto g = t.backward(t.frobenius_sq(x));
        CHECK(g.of(y) == Matrix::zeros(2, 3));
    }
    SUBCASE("sum(C ⊙ A) gives C") {
        Tape t;
        const Matrix c = rnd(3, 3, 14);
        const Var x = t.leaf(rnd(3, 3, 15));
        const auto g = t.backward(t.sum(t.hadamard(t.constant(c), x)));
        CHECK(g.of(x) == c);
    }
    SUBCASE("non-scalar root is a contract error") {
        Tape t;
        const Var x = t.leaf(rnd(2, 2, 16));
        CHECK_THROWS_AS((void)t.backward(x), ContractError);
    }
    SUBCASE("abs has zero gradient at zero") {
        Tape t;
        const Var x = t.leaf(Matrix{{0.0, 2.0, -3.0}});
        const auto g = t.backward(t.sum(t.abs(x)));
        CHECK(g.of(x) == Matrix{{0.0, 1.0, -1.0}});
    }
    SUBCASE("constants do not require gradients") {
        Tape t;
        const Var c = t.constant(rnd(2, 2, 17));
        const Var x = t.leaf(rnd(2, 2, 18));
        CHECK_FALSE(t.requires_grad(c));
        CHECK(t.requires_grad(t.add(c, x)));
        CHECK_FALSE(t.requires_grad(t.scale(c, 2.0)));
    }
}

TEST_CASE("finite_diff_check examples") {
    SUBCASE("quadratic loss is exact up to roundoff") {
        const Matrix c = rnd(3, 3, 20);
        const LossBuilder loss = [&](Tape& t, std::span<const Var> v) {
            return t.add(t.frobenius_sq(v[0]), t.sum(t.hadamard(t.constant(c), v[0])));
        };
        const std::vector<Matrix> point{rnd(3, 3, 21)};
        CHECK(finite_diff_check(loss, point, kFdEps) <= 1e-7);
    }
    SUBCASE("constant loss") {
        const LossBuilder loss = [](Tape& t, std::span<const Var>) { return t.scalar(4.0); };
        const std::vector<Matrix> point{rnd(2, 2, 22)};
        CHECK(finite_diff_check(loss, point, kFdEps) == 0.0);
    }
    SUBCASE("forgetting penalty on a random 4x4 instance") {
        const Matrix past_abs = abs(matmul(rnd(4, 2, 23), rnd(2, 4, 24)));
        const LossBuilder loss = [&](Tape& t, std::span<const Var> v) {
            return t.frobenius_sq(t.hadamard(t.constant(past_abs), t.matmul(v[0], v[1])));
        };
        const std::vector<Matrix> point{rnd(4, 2, 25), rnd(2, 4, 26)};
        CHECK(finite_diff_check(loss, point, kFdEps) <= 1e-5);
    }
    SUBCASE("non-finite loss is an evaluation error") {
        const LossBuilder loss = [](Tape& t, std::span<const Var> v) {
            return t.scale(t.sum(v[0]), std::numeric_limits<double>::infinity());
        };
        const std::vector<Matrix> point{rnd(1, 2, 27)};
        CHECK_THROWS_AS((void)finite_diff_check(loss, point, kFdEps), EvaluationError);
    }
    SUBCASE("eps must be positive") {
        const LossBuilder loss = [](Tape& t, std::span<const Var> v) { return t.sum(v[0]); };
        const std::vector<Matrix> point{rnd(1, 2, 28)};
        CHECK_THROWS((void)finite_diff_check(loss, point, 0.0));
    }
}

TEST_CASE("every primitive matches central differences at 100 random points") {
    struct Case {
        const char* name;
        std::vector<std::pair<std::size_t, std::size_t>> shapes;
        std::function<Var(Tape&, std::span<const Var>)> body;
        bool away_from_zero = false;
    };
    std::vector<int> labels{2, 0, 1};
    const Matrix mask{{0.0, -1.0, 2.0}, {1.0, 0.0, -0.5}, {0.3, 0.2, 0.0}};
    const std::vector<Case> cases{
        {"matmul", {{3, 4}, {4, 2}}, [](Tape& t, auto v) { return t.matmul(v[0], v[1]); }},
        {"add", {{3, 2}, {3, 2}}, [](Tape& t, auto v) { return t.add(v[0], v[1]); }},
        {"sub", {{3, 2}, {3, 2}}, [](Tape& t, auto v) { return t.sub(v[0], v[1]); }},
        {"hadamard", {{3, 2}, {3, 2}}, [](Tape& t, auto v) { return t.hadamard(v[0], v[1]); }},
        {"scale", {{3, 2}}, [](Tape& t, auto v) { return t.scale(v[0], -1.7); }},
        {"abs", {{3, 3}}, [](Tape& t, auto v) { return t.abs(v[0]); }, true},
        {"row_softmax", {{3, 5}}, [](Tape& t, auto v) { return t.row_softmax(v[0]); }},
        {"frobenius_sq", {{3, 4}}, [](Tape& t, auto v) { return t.frobenius_sq(v[0]); }},
        {"sum", {{2, 5}}, [](Tape& t, auto v) { return t.sum(v[0]); }},
        {"mean", {{2, 5}}, [](Tape& t, auto v) { return t.mean(v[0]); }},
        {"transpose", {{2, 3}}, [](Tape& t, auto v) { return t.transpose(v[0]); }},
        {"add_row", {{4, 3}, {1, 3}}, [](Tape& t, auto v) { return t.add_row(v[0], v[1]); }},
        {"concat_rows", {{2, 3}, {1, 3}}, [](Tape& t, auto v) { return t.concat_rows(v); }},
        {"concat_cols", {{2, 3}, {2, 2}}, [](Tape& t, auto v) { return t.concat_cols(v); }},
        {"slice_rows", {{5, 2}}, [](Tape& t, auto v) { return t.slice_rows(v[0], 1, 3); }},
        {"slice_cols", {{2, 5}}, [](Tape& t, auto v) { return t.slice_cols(v[0], 2, 2); }},
        {"reshape", {{4, 6}}, [](Tape& t, auto v) { return t.reshape(v[0], 8, 3); }},
        {"silu", {{3, 3}}, [](Tape& t, auto v) { return t.silu(v[0]); }},
        {"tanh", {{3, 3}}, [](Tape& t, auto v) { return t.tanh(v[0]); }},
        {"cross_entropy", {{3, 4}}, [&](Tape& t, auto v) { return t.cross_entropy(v[0], labels); }},
        {"masked attention chain", {{3, 4}, {4, 4}},
         [&](Tape& t, auto v) {
             const Var logits = t.add(t.matmul(v[0], t.transpose(t.matmul(v[0], v[1]))), t.constant(mask));
             return t.matmul(t.row_softmax(logits), v[0]);
         }},
    };
    for (const auto& c : cases) {
        CAPTURE(c.name);
        double worst = 0.0;
        for (int p = 0; p < kPointsPerPrimitive; ++p) {
            std::vector<Matrix> point;
            for (std::size_t k = 0; k < c.shapes.size(); ++k) {
                const auto seed = static_cast<std::uint64_t>(1000 * p + 10 * k + 7);
                point.push_back(c.away_from_zero ? rnd_away_from_zero(c.shapes[k].first, c.shapes[k].second, seed)
                                                 : rnd(c.shapes[k].first, c.shapes[k].second, seed));
            }
            const LossBuilder loss = [&](Tape& t, std::span<const Var> v) {
                const Var y = c.body(t, v);
                return t.value(y).size() == 1 ? y : project(t, y, 99 + static_cast<std::uint64_t>(p));
            };
            worst = std::max(worst, finite_diff_check(loss, point, kFdEps));
        }
        CHECK(worst <= 1e-5);
    }
}
