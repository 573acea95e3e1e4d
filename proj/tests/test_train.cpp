#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "clora/checkpoint.hpp"
#include "clora/train.hpp"
#include "oracles.hpp"

using namespace clora;
using namespace clora::train;
using num::Matrix;

namespace {

ExperimentConfig small_diffusion(Method m) {
    auto c = default_config(m, Workload::Diffusion);
    c.n_tasks = 2;
    c.steps_per_task = 60;
    c.batch_size = 16;
    c.rank = 4;
    c.samples_per_snapshot = 30;
    c.fisher_batches = 2;
    c.log_every = 20;
    c.diffusion.n_train = 64;
    c.diffusion.pretrain_steps = 150;
    c.diffusion.pretrain_concepts = 4;
    c.diffusion.replay_refresh = 30;
    return c;
}

ExperimentConfig small_classification(Method m) {
    auto c = default_config(m, Workload::Classification);
    c.n_tasks = 3;
    c.steps_per_task = 30;
    c.batch_size = 16;
    c.rank = 4;
    c.log_every = 10;
    c.classification.n_train_per_class = 20;
    c.classification.n_test_per_class = 20;
    c.classification.pretrain_steps = 60;
    c.classification.pretrain_classes = 4;
    return c;
}

std::vector<double> step_losses(const RunArtifacts& a, int task) {
    std::vector<double> out;
    for (const auto& s : a.steps)
        if (s.task == task) out.push_back(s.loss);
    return out;
}

}  // namespace

TEST_CASE("Adam matches the bias-corrected update") {
    Adam opt(0.1);
    Matrix p{{1.0, -2.0}};
    const std::vector<Matrix> grads{Matrix{{0.5, -1.0}}, Matrix{{0.25, 3.0}}, Matrix{{-1.0, 0.0}}};
    std::vector<double> q{1.0, -2.0}, m(2, 0.0), v(2, 0.0);
    for (std::size_t t = 1; t <= grads.size(); ++t) {
        opt.step("w", p, grads[t - 1]);
        for (std::size_t i = 0; i < 2; ++i) {
            const double g = grads[t - 1](0, i);
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            const double mh = m[i] / (1.0 - std::pow(0.9, static_cast<double>(t)));
            const double vh = v[i] / (1.0 - std::pow(0.999, static_cast<double>(t)));
            q[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        }
        CHECK(std::abs(p(0, 0) - q[0]) <= 1e-15);
        CHECK(std::abs(p(0, 1) - q[1]) <= 1e-15);
    }
    // first step moves each coordinate by ~lr against the gradient sign
    Adam fresh(0.1);
    Matrix r{{0.0}};
    fresh.step("x", r, Matrix{{7.0}});
    CHECK(r(0, 0) == doctest::Approx(-0.1).epsilon(1e-8));
    CHECK_THROWS_AS(fresh.step("x", r, Matrix{{1.0, 2.0}}), num::ShapeError);
}

TEST_CASE("EWC penalty hand case") {
    EwcState s;
    s.fisher["w"] = Matrix{{1.0, 2.0, 0.5}};
    s.anchor["w"] = Matrix{{0.0, 1.0, -1.0}};
    const work::ParamMap at{{"w", Matrix{{2.0, 0.0, 1.0}}}};
    // 1·2² + 2·1² + 0.5·2² = 8
    CHECK(s.penalty_value(at) == 8.0);
    CHECK(s.penalty_value(work::ParamMap{{"w", s.anchor["w"]}}) == 0.0);
    num::Tape t;
    const std::map<std::string, num::Var> vars{{"w", t.leaf(at.at("w"))}};
    const num::Var pen = s.penalty(t, vars);
    CHECK(t.value(pen)(0, 0) == 8.0);
    const auto g = t.backward(pen);
    // d/dθ F(θ−θ*)² = 2F(θ−θ*)
    CHECK(g.of(vars.at("w")) == Matrix{{4.0, -4.0, 2.0}});
}

TEST_CASE("ewc_prepare averages squared gradients and sums over tasks") {
    EwcState s;
    const std::vector<work::ParamMap> batches{{{"w", Matrix{{1.0, -2.0}}}}, {{"w", Matrix{{3.0, 0.0}}}}};
    ewc_prepare(s, batches, {{"w", Matrix{{0.5, 0.5}}}});
    CHECK(s.fisher.at("w") == Matrix{{5.0, 2.0}});
    CHECK(s.anchor.at("w") == Matrix{{0.5, 0.5}});
    ewc_prepare(s, batches, {{"w", Matrix{{1.0, 1.0}}}});
    CHECK(s.fisher.at("w") == Matrix{{10.0, 4.0}});
    CHECK(s.anchor.at("w") == Matrix{{1.0, 1.0}});
    CHECK_THROWS_AS(ewc_prepare(s, std::span<const work::ParamMap>{}, {}), std::invalid_argument);
}

TEST_CASE("zero Fisher leaves the penalty inert") {
    EwcState s;
    const std::vector<work::ParamMap> zero{{{"w", Matrix::zeros(2, 2)}}};
    ewc_prepare(s, zero, {{"w", Matrix::ones(2, 2)}});
    CHECK(s.penalty_value({{"w", oracle::random(2, 2, 1, 10.0)}}) == 0.0);
}

TEST_CASE("replay batch composition") {
    const Matrix fresh = oracle::random(50, 2, 1);
    const std::map<int, Matrix> pools{{1, oracle::random(40, 2, 2)}, {2, oracle::random(40, 2, 3)},
                                      {3, oracle::random(40, 2, 4)}};
    for (double mix : {0.0, 0.25, 0.5, 0.7, 1.0}) {
        Rng rng(5);
        const auto b = gen_replay_step(fresh, pools, 64, mix, rng);
        const auto expected = static_cast<std::size_t>(std::floor(mix * 64));
        CHECK(b.replay_rows() == expected);
        CHECK(b.fresh.rows() + b.replay_rows() == 64);
        for (const auto& [id, rows] : b.replay) {
            CHECK(pools.contains(id));
            CHECK(rows.rows() >= expected / 3);
            CHECK(rows.rows() <= expected / 3 + 1);
        }
    }
    Rng a(9), b(9);
    CHECK(gen_replay_step(fresh, pools, 32, 0.0, a).fresh == gen_replay_step(fresh, {}, 32, 0.5, b).fresh);
    Rng c(1);
    CHECK_THROWS_AS((void)gen_replay_step(fresh, pools, 8, 1.5, c), std::invalid_argument);
}

TEST_CASE("lambda is forced off where no penalty applies") {
    auto c = small_diffusion(Method::LoraSeq);
    c.lambda = 1e8;
    CHECK(c.penalty_weight() == 0.0);
    c.method = Method::CLora;
    CHECK(c.penalty_weight() == 1e8);
    c.ablations.eq3 = true;
    CHECK(c.penalty_weight() == 0.0);
}

TEST_CASE("paper defaults") {
    const auto c = default_config(Method::CLora, Workload::Diffusion);
    CHECK(c.lambda == 1e8);
    CHECK(c.rank == 16);
    CHECK(c.learning_rate == 5e-4);
    CHECK(default_config(Method::Ewc, Workload::Diffusion).lambda == 1e6);
    CHECK(default_config(Method::LoraSeq, Workload::Diffusion).learning_rate == 5e-4);
    const auto grid = default_lr_grid();
    REQUIRE(grid.size() == 7);
    CHECK(grid.front() == 5e-2);
    CHECK(grid.back() == doctest::Approx(5e-8).epsilon(1e-12));
    for (std::size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] == doctest::Approx(grid[i - 1] / 10.0));
}

TEST_CASE("adapter methods share the first task trajectory") {
    auto clora = small_diffusion(Method::CLora);
    clora.n_tasks = 1;
    auto seq = clora;
    seq.method = Method::LoraSeq;
    auto ablated = clora;
    ablated.ablations.eq3 = true;
    auto zero = clora;
    zero.lambda = 0.0;
    const auto a = run_experiment(clora);
    const auto b = run_experiment(seq);
    const auto c = run_experiment(ablated);
    const auto d = run_experiment(zero);
    CHECK(step_losses(a, 1) == step_losses(b, 1));
    CHECK(step_losses(a, 1) == step_losses(c, 1));
    CHECK(step_losses(a, 1) == step_losses(d, 1));
    for (const auto& s : a.steps) CHECK(s.penalty == 0.0);
    CHECK(a.checkpoints[0]["sites"] == b.checkpoints[0]["sites"]);
    CHECK(a.checkpoints[0]["sites"] == c.checkpoints[0]["sites"]);
    CHECK(a.final_snapshots[0] == b.final_snapshots[0]);
}

TEST_CASE("EWC without a penalty weight matches replay without replay") {
    auto ewc = small_diffusion(Method::Ewc);
    ewc.lambda = 0.0;
    auto replay = small_diffusion(Method::GenReplay);
    replay.diffusion.replay_mix = 0.0;
    const auto a = run_experiment(ewc);
    const auto b = run_experiment(replay);
    CHECK(step_losses(a, 1) == step_losses(b, 1));
    CHECK(step_losses(a, 2) == step_losses(b, 2));
    CHECK(a.final_snapshots == b.final_snapshots);
}

TEST_CASE("runs are deterministic and keep frozen pairs intact") {
    const auto cfg = small_diffusion(Method::CLora);
    const auto a = run_experiment(cfg);
    const auto b = run_experiment(cfg);
    CHECK(metrics::to_json(a.report).dump() == metrics::to_json(b.report).dump());
    CHECK(a.log_lines == b.log_lines);
    REQUIRE(a.checkpoints.size() == 2);
    for (std::size_t s = 0; s < a.checkpoints[0]["sites"].size(); ++s)
        CHECK(a.checkpoints[1]["sites"][s]["pairs"][0].dump() == a.checkpoints[0]["sites"][s]["pairs"][0].dump());
    CHECK(a.own_snapshots.size() == 2);
    CHECK(a.storage.size() == 2);
    CHECK(a.storage[1].stored_params == std::min(2 * a.storage[0].per_task_params, a.storage[0].full_delta_params));
    CHECK(a.report.a_mmd.has_value());
    CHECK(a.report.f_mmd.has_value());
    CHECK(a.report.interference.size() == 1);
    CHECK(std::ranges::any_of(a.log_lines, [](const std::string& l) { return l.find("task=2 step=") != std::string::npos; }));
}

TEST_CASE("token-only training leaves earlier samples untouched") {
    const auto a = run_experiment(small_diffusion(Method::TokenOnly));
    REQUIRE(a.report.f_mmd.has_value());
    CHECK(*a.report.f_mmd == 0.0);
    CHECK(a.own_snapshots[0] == a.final_snapshots[0]);
    CHECK(a.report.n_param_train_pct == 0.0);
}

TEST_CASE("a singleton sweep reproduces the run") {
    const auto cfg = small_diffusion(Method::CLora);
    const std::vector<double> grid{1e6};
    const auto rows = hyper_sweep(cfg, SweepParam::Lambda, grid);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].value == 1e6);
    auto swept = rows[0].report;
    REQUIRE(swept.sweep.has_value());
    CHECK(swept.sweep->param == "lambda");
    swept.sweep.reset();
    const auto single = run_experiment(with_param(cfg, SweepParam::Lambda, 1e6));
    CHECK(metrics::to_json(swept).dump() == metrics::to_json(single.report).dump());
}

TEST_CASE("sweep parameters") {
    CHECK(parse_sweep_param("lambda") == SweepParam::Lambda);
    CHECK(parse_sweep_param("rank") == SweepParam::Rank);
    CHECK(parse_sweep_param("lr") == SweepParam::LearningRate);
    CHECK_THROWS_AS((void)parse_sweep_param("momentum"), ConfigError);
    const auto base = small_diffusion(Method::CLora);
    CHECK(with_param(base, SweepParam::Rank, 8).rank == 8);
    CHECK(with_param(base, SweepParam::LearningRate, 1e-3).learning_rate == 1e-3);
    CHECK_THROWS_AS((void)with_param(base, SweepParam::Lambda, -1.0), ConfigError);
    CHECK_THROWS((void)hyper_sweep(base, SweepParam::Lambda, std::span<const double>{}));
}

TEST_CASE("a runaway learning rate aborts with diagnostics") {
    auto cfg = small_diffusion(Method::FullFtSeq);
    cfg.learning_rate = 1e200;
    try {
        (void)run_experiment(cfg);
        FAIL("expected a non-finite loss");
    } catch (const NonFiniteLoss& e) {
        CHECK(e.task >= 1);
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("replay is unsupported for classification") {
    auto cfg = small_classification(Method::CLora);
    cfg.method = Method::GenReplay;
    CHECK_THROWS_AS((void)run_experiment(cfg), std::invalid_argument);
}

TEST_CASE("classification fills a lower-triangular accuracy matrix") {
    const auto a = run_experiment(small_classification(Method::CLora));
    REQUIRE(a.accuracy.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(a.accuracy[i].size() == i + 1);
        for (double v : a.accuracy[i]) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    REQUIRE(a.report.a_n.has_value());
    REQUIRE(a.report.f_n.has_value());
    CHECK_FALSE(a.report.a_mmd.has_value());
    const auto s = metrics::a_n_f_n(a.accuracy);
    CHECK(*a.report.a_n == doctest::Approx(100.0 * s.a_n));
    CHECK(*a.report.f_n == doctest::Approx(100.0 * s.f_n));
    CHECK(a.checkpoints.size() == 3);
    CHECK(a.checkpoints[2]["sites"].size() == 3);
}
