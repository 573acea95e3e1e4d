// SPDX-License-Identifier: Apache-2.0

#include "clora/adapter.hpp"

#include <algorithm>
#include <fmt/format.h>

#include "clora/rng.hpp"

namespace clora::lora {

AdapterStack::AdapterStack(std::string site_id, Matrix w_init)
    : site_id_(std::move(site_id)), w_init_(std::move(w_init)) {
    refresh_caches();
}

AdapterStack AdapterStack::restore(std::string site_id, Matrix w_init, std::vector<LoraPair> past) {
    AdapterStack s(std::move(site_id), std::move(w_init));
    int last = 0;
    for (auto& p : past) {
        if (p.a.rows() != s.d1() || p.b.cols() != s.d2() || p.a.cols() != p.b.rows()) {
            throw num::ShapeError(fmt::format("restore {}: pair {}·{} does not fit {}", s.site_id_, p.a.shape_str(),
                                              p.b.shape_str(), s.w_init_.shape_str()));
        }
        if (!s.past_.empty() && p.task_id <= last) {
            throw LifecycleError(fmt::format("restore {}: task ids must increase", s.site_id_));
        }
        last = p.task_id;
        p.frozen = true;
        s.past_.push_back(std::move(p));
    }
    s.refresh_caches();
    return s;
}

const LoraPair& AdapterStack::new_task_pair(std::size_t rank, std::uint64_t seed, int task_id) {
    if (active_) {
        throw LifecycleError(fmt::format("{}: task {} is still active", site_id_, active_->task_id));
    }
    if (rank < 1 || rank > std::min(d1(), d2())) {
        throw num::ShapeError(fmt::format("{}: rank {} outside [1, {}]", site_id_, rank, std::min(d1(), d2())));
    }
    const int next = past_.empty() ? 1 : past_.back().task_id + 1;
    if (task_id < 0) {
        task_id = next;
    } else if (!past_.empty() && task_id <= past_.back().task_id) {
        throw LifecycleError(fmt::format("{}: task id {} does not follow {}", site_id_, task_id, past_.back().task_id));
    }
    Rng rng(seed);
    LoraPair p;
    p.a = rng.normal_matrix(d1(), rank, kInitStd);
    p.b = Matrix::zeros(rank, d2());
    p.task_id = task_id;
    active_ = std::move(p);
    return *active_;
}

const LoraPair& AdapterStack::active() const {
    if (!active_) {
        throw LifecycleError(fmt::format("{}: no active pair", site_id_));
    }
    return *active_;
}

LoraPair& AdapterStack::active_mut() {
    if (!active_) {
        throw LifecycleError(fmt::format("{}: no active pair", site_id_));
    }
    return *active_;
}

Matrix AdapterStack::effective_weight() const {
    if (!active_) {
        return base_;
    }
    return num::add(base_, active_->delta());
}

void AdapterStack::freeze_task() {
    if (!active_) {
        throw LifecycleError(fmt::format("{}: freeze without an active pair", site_id_));
    }
    active_->frozen = true;
    num::add_inplace(past_sum_, active_->delta());
    past_.push_back(std::move(*active_));
    active_.reset();
    past_abs_ = num::abs(past_sum_);
    base_ = num::add(w_init_, past_sum_);
}

Matrix AdapterStack::fold_in() const {
    if (active_) {
        throw LifecycleError(fmt::format("{}: fold_in with task {} still active", site_id_, active_->task_id));
    }
    return base_;
}

double AdapterStack::forgetting_penalty() const {
    return num::frobenius_sq(num::hadamard(past_abs_, active().delta()));
}

ActiveVars AdapterStack::bind_active(Tape& tape, bool trainable) const {
    const auto& p = active();
    ActiveVars v;
    v.a = trainable ? tape.leaf(p.a) : tape.constant(p.a);
    v.b = trainable ? tape.leaf(p.b) : tape.constant(p.b);
    v.delta = tape.matmul(v.a, v.b);
    return v;
}

Var AdapterStack::effective_weight(Tape& tape, const std::optional<ActiveVars>& active) const {
    const Var base = tape.constant(base_);
    if (!active) {
        return base;
    }
    return tape.add(base, active->delta);
}

Var AdapterStack::forgetting_penalty(Tape& tape, const ActiveVars& active) const {
    const Var mask = tape.constant(past_abs_);
    return tape.frobenius_sq(tape.hadamard(mask, active.delta));
}

void AdapterStack::refresh_caches() {
    past_sum_ = Matrix::zeros(d1(), d2());
    for (const auto& p : past_) {
        num::add_inplace(past_sum_, p.delta());
    }
    past_abs_ = num::abs(past_sum_);
    base_ = num::add(w_init_, past_sum_);
}

StoragePlan storage_plan(std::span<const SiteShape> sites, std::size_t tasks_so_far, std::size_t backbone_params) {
    if (backbone_params == 0) {
        throw std::invalid_argument("storage_plan: backbone_params must be positive");
    }
    StoragePlan plan;
    for (const auto& s : sites) {
        plan.per_task_params += 2 * s.rank * (s.d1 + s.d2);
        plan.full_delta_params += s.d1 * s.d2;
    }
    plan.tasks_so_far = tasks_so_far;
    plan.stored_params = std::min(tasks_so_far * plan.per_task_params, plan.full_delta_params);
    const auto backbone = static_cast<double>(backbone_params);
    plan.trained_fraction = static_cast<double>(plan.per_task_params) / backbone;
    plan.stored_fraction = static_cast<double>(plan.stored_params) / backbone;
    return plan;
}

StoragePlan storage_plan(std::span<const AdapterStack> stacks, std::size_t backbone_params) {
    std::vector<SiteShape> sites;
    std::size_t tasks = 0;
    for (const auto& s : stacks) {
        std::size_t rank = 0;
        if (s.has_active()) {
            rank = s.active().rank();
        } else if (!s.past().empty()) {
            rank = s.past().back().rank();
        }
        sites.push_back({s.d1(), s.d2(), rank});
        tasks = std::max(tasks, s.task_count());
    }
    return storage_plan(sites, tasks, backbone_params);
}

}  // namespace clora::lora
