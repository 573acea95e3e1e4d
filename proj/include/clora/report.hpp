// SPDX-License-Identifier: Apache-2.0
//
// Final metrics of one run and their JSON form (metrics.json).

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "clora/config.hpp"
#include "clora/metrics.hpp"

namespace clora::metrics {

struct SweepTag {
    std::string param;
    double value = 0.0;
};

struct MetricsReport {
    std::string method;
    std::uint64_t seed = 0;
    std::string workload;
    std::uint64_t config_hash = 0;
    // MMD metrics are stored x1e3; accuracy metrics in percent.
    std::optional<double> a_mmd;
    std::optional<double> f_mmd;
    std::optional<double> a_n;
    std::optional<double> f_n;
    double n_param_train_pct = 0.0;
    double n_param_store_pct = 0.0;
    std::vector<PairInterference> interference;
    double interference_magnitude = 0.0;
    double final_task_loss = 0.0;
    std::optional<SweepTag> sweep;

    /// Accuracy-style headline metric (A_mmd or A_N) and its forgetting pair.
    [[nodiscard]] std::optional<double> headline_a() const { return a_mmd ? a_mmd : a_n; }
    [[nodiscard]] std::optional<double> headline_f() const { return a_mmd ? f_mmd : f_n; }
};

Json to_json(const MetricsReport& r);
MetricsReport report_from_json(const Json& j);

/// One-line summary printed at the end of a run and reproduced by `report`.
std::string format_metrics_line(const MetricsReport& r);
/// Fixed-precision formatting used by every text/CSV emitter.
std::string format_value(std::optional<double> v);

}  // namespace clora::metrics
