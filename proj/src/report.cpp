// SPDX-License-Identifier: Apache-2.0

#include "clora/report.hpp"

#include <fmt/format.h>

namespace clora::metrics {

namespace {

Json opt(std::optional<double> v) { return v ? Json(*v) : Json(nullptr); }

std::optional<double> read_opt(const Json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) {
        return std::nullopt;
    }
    return j[key].get<double>();
}

}  // namespace

Json to_json(const MetricsReport& r) {
    Json j;
    j["method"] = r.method;
    j["seed"] = r.seed;
    j["workload"] = r.workload;
    j["config_hash"] = fmt::format("{:016x}", r.config_hash);
    j["a_mmd"] = opt(r.a_mmd);
    j["f_mmd"] = opt(r.f_mmd);
    j["a_n"] = opt(r.a_n);
    j["f_n"] = opt(r.f_n);
    j["n_param_train_pct"] = r.n_param_train_pct;
    j["n_param_store_pct"] = r.n_param_store_pct;
    Json pairs = Json::array();
    for (const auto& p : r.interference) {
        pairs.push_back({{"prev_task", p.prev_task},
                         {"task", p.task},
                         {"opposite_fraction", p.opposite_fraction},
                         {"opposite_magnitude", p.opposite_magnitude}});
    }
    j["interference"] = pairs;
    j["interference_magnitude"] = r.interference_magnitude;
    j["final_task_loss"] = r.final_task_loss;
    if (r.sweep) {
        j["sweep_values"] = {{"param", r.sweep->param}, {"value", r.sweep->value}};
    }
    return j;
}

MetricsReport report_from_json(const Json& j) {
    MetricsReport r;
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.workload = j.at("workload").get<std::string>();
    r.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    r.a_mmd = read_opt(j, "a_mmd");
    r.f_mmd = read_opt(j, "f_mmd");
    r.a_n = read_opt(j, "a_n");
    r.f_n = read_opt(j, "f_n");
    r.n_param_train_pct = j.at("n_param_train_pct").get<double>();
    r.n_param_store_pct = j.at("n_param_store_pct").get<double>();
    for (const auto& p : j.at("interference")) {
        r.interference.push_back({p.at("prev_task").get<int>(), p.at("task").get<int>(),
                                  p.at("opposite_fraction").get<double>(), p.at("opposite_magnitude").get<double>()});
    }
    r.interference_magnitude = j.at("interference_magnitude").get<double>();
    r.final_task_loss = j.at("final_task_loss").get<double>();
    if (j.contains("sweep_values")) {
        r.sweep = SweepTag{j["sweep_values"].at("param").get<std::string>(),
                           j["sweep_values"].at("value").get<double>()};
    }
    return r;
}

std::string format_value(std::optional<double> v) { return v ? fmt::format("{:.6f}", *v) : std::string("NA"); }

std::string format_metrics_line(const MetricsReport& r) {
    if (r.workload == "classification") {
        return fmt::format("method={} workload={} seed={} A_N={} F_N={} n_param_train={} n_param_store={}", r.method,
                           r.workload, r.seed, format_value(r.a_n), format_value(r.f_n),
                           format_value(r.n_param_train_pct), format_value(r.n_param_store_pct));
    }
    return fmt::format("method={} workload={} seed={} A_mmd={} F_mmd={} n_param_train={} n_param_store={}", r.method,
                       r.workload, r.seed, format_value(r.a_mmd), format_value(r.f_mmd),
                       format_value(r.n_param_train_pct), format_value(r.n_param_store_pct));
}

}  // namespace clora::metrics
