// SPDX-License-Identifier: Apache-2.0
//
// Continual training: one optimization phase per task on
//
//     workload loss + λ · Σ_sites forgetting_penalty      (C-LoRA)
//     workload loss + λ · Σ_i F_i (θ_i − θ*_i)²           (EWC)
//
// with sequential LoRA, sequential full fine-tuning, generative replay and a
// token-only baseline alongside.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clora/adapter.hpp"
#include "clora/config.hpp"
#include "clora/report.hpp"
#include "clora/rng.hpp"
#include "clora/workloads.hpp"

namespace clora::train {

using num::Matrix;
using num::Tape;
using num::Var;
using work::ParamMap;

/// Training produced NaN/Inf; carries the step diagnostics.
class NonFiniteLoss : public std::runtime_error {
public:
    NonFiniteLoss(int task, std::size_t step, double loss, double grad_norm);
    int task;
    std::size_t step;
    double loss;
    double grad_norm;
};

/// Method not available for the chosen workload.
class UnsupportedMethod : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Adam with per-key moment buffers (β1 0.9, β2 0.999, ε 1e-8).
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::string& key, Matrix& param, const Matrix& grad);
    void reset() { state_.clear(); }
    [[nodiscard]] double learning_rate() const noexcept { return lr_; }

private:
    struct Moments {
        Matrix m;
        Matrix v;
        std::uint64_t t = 0;
    };
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    std::map<std::string, Moments> state_;
};

/// Diagonal-Fisher quadratic anchor, accumulated across tasks by summation.
struct EwcState {
    ParamMap fisher;
    ParamMap anchor;

    [[nodiscard]] bool empty() const noexcept { return fisher.empty(); }
    /// Σ_i F_i (θ_i − θ*_i)² over every anchored tensor.
    [[nodiscard]] double penalty_value(const ParamMap& params) const;
    /// Same quantity on the tape for the tensors present in `vars`.
    [[nodiscard]] Var penalty(Tape& tape, const std::map<std::string, Var>& vars) const;
};

/// Adds the mean of squared per-batch gradients to the Fisher diagonal and
/// re-anchors at `params`. Throws std::invalid_argument on empty input.
void ewc_prepare(EwcState& state, std::span<const ParamMap> batch_grads, const ParamMap& params);

/// A replay-mixed training batch: fresh rows of the new concept plus rows
/// generated for earlier tokens.
struct ReplayBatch {
    Matrix fresh;
    std::vector<std::pair<int, Matrix>> replay;  // (token id, rows)

    [[nodiscard]] std::size_t replay_rows() const;
};

/// floor(mix_ratio·batch) replay rows spread round-robin over `pools`
/// (token id → generated samples); the rest drawn from `fresh_pool`.
ReplayBatch gen_replay_step(const Matrix& fresh_pool, const std::map<int, Matrix>& pools, std::size_t batch,
                            double mix_ratio, Rng& rng);

struct StepLog {
    int task = 0;
    std::size_t step = 0;
    double loss = 0.0;
    double penalty = 0.0;
    double grad_norm = 0.0;
};

/// Everything a run produces; the CLI persists it as a run directory.
struct RunArtifacts {
    ExperimentConfig config;
    std::vector<std::string> log_lines;
    std::vector<Json> checkpoints;                   // one per task
    std::vector<Matrix> own_snapshots;               // X_{j,j}
    std::vector<Matrix> final_snapshots;             // X_{N,j}
    std::vector<Matrix> references;                  // X_{D,j}
    std::vector<std::vector<double>> accuracy;       // A_{i,j}, fractions
    std::vector<std::vector<Matrix>> deltas;         // per task, per site
    std::vector<lora::StoragePlan> storage;          // after each task (adapter methods)
    std::vector<double> task_losses;                 // mean workload loss over each task's last 100 steps
    std::vector<StepLog> steps;                      // every logged step
    std::vector<lora::AdapterStack> stacks;          // final adapter stacks (adapter methods)
    metrics::MetricsReport report;
};

using LogSink = std::function<void(const std::string&)>;

/// Pretrains the backbone, trains every task in sequence and evaluates.
/// Throws NonFiniteLoss when a step produces NaN/Inf.
RunArtifacts run_experiment(const ExperimentConfig& config, const LogSink& sink = {});

enum class SweepParam { Lambda, Rank, LearningRate };

SweepParam parse_sweep_param(const std::string& s);
std::string to_string(SweepParam p);
/// Config with one hyperparameter replaced.
ExperimentConfig with_param(ExperimentConfig base, SweepParam p, double value);

struct SweepRow {
    double value = 0.0;
    metrics::MetricsReport report;
};

/// Runs the task sequence once per grid value, up to `threads` at a time.
std::vector<SweepRow> hyper_sweep(const ExperimentConfig& base, SweepParam param, std::span<const double> grid,
                                  std::size_t threads = 1);

/// Default exponential learning-rate grid 5e-2 … 5e-8.
std::vector<double> default_lr_grid();

}  // namespace clora::train
