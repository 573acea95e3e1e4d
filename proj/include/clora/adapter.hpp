// SPDX-License-Identifier: Apache-2.0
//
// Continual low-rank adapters. Each adapted projection site owns an
// AdapterStack: the frozen pretrained weight, one frozen LoRA pair per past
// task, and at most one trainable pair for the current task. The effective
// weight is
//
//     W = W_init + sum_{past} A_t' B_t' + A_t B_t
//
// and the forgetting penalty steering the active pair away from entries
// already edited by past tasks is
//
//     || |sum_{past} A_t' B_t'| ⊙ (A_t B_t) ||_F^2 .

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clora/matrix.hpp"
#include "clora/tape.hpp"

namespace clora::lora {

using num::Matrix;
using num::Tape;
using num::Var;

/// Raised on out-of-order adapter lifecycle calls.
class LifecycleError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

inline constexpr double kInitStd = 0.02;

struct LoraPair {
    Matrix a;  // D1×r
    Matrix b;  // r×D2
    int task_id = 0;
    bool frozen = false;

    [[nodiscard]] std::size_t rank() const noexcept { return a.cols(); }
    [[nodiscard]] Matrix delta() const { return num::matmul(a, b); }
};

/// Tape handles for the active pair of one stack during a training step.
struct ActiveVars {
    Var a;
    Var b;
    Var delta;
};

class AdapterStack {
public:
    AdapterStack() = default;
    AdapterStack(std::string site_id, Matrix w_init);

    /// Rebuilds a stack from checkpointed frozen pairs.
    static AdapterStack restore(std::string site_id, Matrix w_init, std::vector<LoraPair> past);

    /// Installs a fresh active pair: A ~ N(0, 0.02²), B = 0. task_id < 0 picks
    /// the next id after the last frozen pair.
    const LoraPair& new_task_pair(std::size_t rank, std::uint64_t seed, int task_id = -1);

    /// W_init + past sum (+ active delta when present).
    [[nodiscard]] Matrix effective_weight() const;
    /// Appends the active pair to the frozen past and refreshes the caches.
    void freeze_task();
    /// Single dense matrix for inference; requires no active pair.
    [[nodiscard]] Matrix fold_in() const;
    /// Untracked penalty value, for evaluation and tests.
    [[nodiscard]] double forgetting_penalty() const;

    /// Records the active pair on a tape, as leaves when trainable.
    [[nodiscard]] ActiveVars bind_active(Tape& tape, bool trainable = true) const;
    /// Effective weight on the tape; differentiable only through `active`.
    [[nodiscard]] Var effective_weight(Tape& tape, const std::optional<ActiveVars>& active) const;
    /// Penalty on the tape; gradient flows only into the active pair.
    [[nodiscard]] Var forgetting_penalty(Tape& tape, const ActiveVars& active) const;

    [[nodiscard]] const std::string& site_id() const noexcept { return site_id_; }
    [[nodiscard]] const Matrix& w_init() const noexcept { return w_init_; }
    [[nodiscard]] std::span<const LoraPair> past() const noexcept { return past_; }
    [[nodiscard]] bool has_active() const noexcept { return active_.has_value(); }
    [[nodiscard]] const LoraPair& active() const;
    /// Mutable access for the optimizer; frozen pairs are never exposed.
    [[nodiscard]] LoraPair& active_mut();
    [[nodiscard]] const Matrix& cached_past_sum() const noexcept { return past_sum_; }
    [[nodiscard]] const Matrix& cached_past_abs() const noexcept { return past_abs_; }
    [[nodiscard]] std::size_t d1() const noexcept { return w_init_.rows(); }
    [[nodiscard]] std::size_t d2() const noexcept { return w_init_.cols(); }
    /// Number of tasks with a pair on this stack (past plus active).
    [[nodiscard]] std::size_t task_count() const noexcept { return past_.size() + (active_ ? 1 : 0); }

private:
    void refresh_caches();

    std::string site_id_;
    Matrix w_init_;
    std::vector<LoraPair> past_;
    std::optional<LoraPair> active_;
    Matrix past_sum_;
    Matrix past_abs_;
    Matrix base_;  // w_init + past_sum
};

struct SiteShape {
    std::size_t d1 = 0;
    std::size_t d2 = 0;
    std::size_t rank = 0;
};

/// Parameter accounting for adapter storage. Counts are parameters, not bytes.
struct StoragePlan {
    std::size_t per_task_params = 0;    // sum over sites of 2·r·(D1+D2)
    std::size_t full_delta_params = 0;  // sum over sites of D1·D2
    std::size_t tasks_so_far = 0;
    std::size_t stored_params = 0;      // min(t·per_task, full_delta)
    double trained_fraction = 0.0;
    double stored_fraction = 0.0;
};

StoragePlan storage_plan(std::span<const SiteShape> sites, std::size_t tasks_so_far, std::size_t backbone_params);
StoragePlan storage_plan(std::span<const AdapterStack> stacks, std::size_t backbone_params);

}  // namespace clora::lora
