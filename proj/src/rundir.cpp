// SPDX-License-Identifier: Apache-2.0

#include "clora/rundir.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

#include "clora/checkpoint.hpp"

namespace clora::io {

namespace {

void write_text(const std::string& text, const fs::path& file) {
    std::ofstream out(file);
    if (!out) {
        throw std::runtime_error(fmt::format("cannot write {}", file.string()));
    }
    out << text;
}

std::string num_str(double v) { return fmt::format("{:.6f}", v); }

}  // namespace

Json read_json(const fs::path& file) {
    std::ifstream in(file);
    if (!in) {
        throw std::runtime_error(fmt::format("cannot read {}", file.string()));
    }
    return Json::parse(in);
}

void write_json(const Json& j, const fs::path& file) { write_text(j.dump(2) + "\n", file); }

void write_samples_csv(const Matrix& m, const fs::path& file) {
    std::string text = "x,y\n";
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
            text += fmt::format("{}{}", c == 0 ? "" : ",", row[c]);
        }
        text += '\n';
    }
    write_text(text, file);
}

Matrix read_samples_csv(const fs::path& file) {
    std::ifstream in(file);
    if (!in) {
        throw std::runtime_error(fmt::format("cannot read {}", file.string()));
    }
    std::string line;
    std::getline(in, line);  // header
    std::vector<double> data;
    std::size_t rows = 0;
    std::size_t cols = 0;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::stringstream ss(line);
        std::string cell;
        std::size_t n = 0;
        while (std::getline(ss, cell, ',')) {
            data.push_back(std::stod(cell));
            ++n;
        }
        if (rows > 0 && n != cols) {
            throw std::runtime_error(fmt::format("{}: ragged row {}", file.string(), rows + 1));
        }
        cols = n;
        ++rows;
    }
    return {rows, cols, std::move(data)};
}

void write_run_dir(const train::RunArtifacts& art, const fs::path& dir) {
    fs::create_directories(dir / "checkpoints");
    fs::create_directories(dir / "snapshots");
    write_json(to_json(art.config), dir / "config.json");
    for (std::size_t k = 0; k < art.checkpoints.size(); ++k) {
        write_json(art.checkpoints[k], dir / "checkpoints" / fmt::format("task_{}.json", k + 1));
    }
    for (std::size_t k = 0; k < art.own_snapshots.size(); ++k) {
        write_samples_csv(art.own_snapshots[k], dir / "snapshots" / fmt::format("task_{}_samples.csv", k + 1));
    }
    for (std::size_t k = 0; k < art.final_snapshots.size(); ++k) {
        write_samples_csv(art.final_snapshots[k], dir / "snapshots" / fmt::format("final_{}_samples.csv", k + 1));
    }
    for (std::size_t k = 0; k < art.references.size(); ++k) {
        write_samples_csv(art.references[k], dir / "snapshots" / fmt::format("reference_{}_samples.csv", k + 1));
    }
    write_json(metrics::to_json(art.report), dir / "metrics.json");
    std::string log;
    for (const auto& line : art.log_lines) {
        log += line;
        log += '\n';
    }
    write_text(log, dir / "log.txt");
}

std::vector<metrics::MetricsReport> collect_reports(const std::vector<fs::path>& roots) {
    std::vector<fs::path> files;
    for (const auto& root : roots) {
        if (fs::is_regular_file(root)) {
            files.push_back(root);
            continue;
        }
        std::vector<fs::path> found;
        if (fs::is_directory(root)) {
            for (const auto& e : fs::recursive_directory_iterator(root)) {
                if (e.is_regular_file() && e.path().filename() == "metrics.json") {
                    found.push_back(e.path());
                }
            }
        }
        if (found.empty()) {
            throw MissingMetrics(root);
        }
        std::ranges::sort(found);
        files.insert(files.end(), found.begin(), found.end());
    }
    std::vector<metrics::MetricsReport> out;
    for (const auto& f : files) {
        out.push_back(metrics::report_from_json(read_json(f)));
    }
    return out;
}

Stat mean_std(const std::vector<double>& xs) {
    Stat s;
    s.n = xs.size();
    if (xs.empty()) {
        return s;
    }
    for (double x : xs) {
        s.mean += x;
    }
    s.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) {
            ss += (x - s.mean) * (x - s.mean);
        }
        s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return s;
}

std::vector<ReportRow> aggregate(const std::vector<metrics::MetricsReport>& reports) {
    struct Acc {
        ReportRow row;
        std::vector<double> a, f, train, store;
    };
    std::vector<Acc> groups;
    for (const auto& r : reports) {
        auto it = std::ranges::find_if(groups, [&](const Acc& g) {
            return g.row.workload == r.workload && g.row.method == r.method && g.row.config_hash == r.config_hash;
        });
        if (it == groups.end()) {
            groups.push_back({{r.workload, r.method, r.config_hash}, {}, {}, {}, {}});
            it = groups.end() - 1;
        }
        if (auto a = r.headline_a()) it->a.push_back(*a);
        if (auto f = r.headline_f()) it->f.push_back(*f);
        it->train.push_back(r.n_param_train_pct);
        it->store.push_back(r.n_param_store_pct);
        ++it->row.runs;
    }
    std::vector<ReportRow> out;
    for (auto& g : groups) {
        g.row.a = mean_std(g.a);
        g.row.f = mean_std(g.f);
        g.row.train_pct = mean_std(g.train);
        g.row.store_pct = mean_std(g.store);
        out.push_back(g.row);
    }
    return out;
}

MissingMetrics::MissingMetrics(const fs::path& dir)
    : std::invalid_argument(fmt::format("no metrics.json under {}", dir.string())), dir_(dir) {}

TableFormat parse_table_format(const std::string& s) {
    if (s == "markdown" || s == "md") return TableFormat::Markdown;
    if (s == "csv") return TableFormat::Csv;
    if (s == "json") return TableFormat::Json;
    throw std::invalid_argument(fmt::format("unknown table format '{}'", s));
}

namespace {

Json stat_json(const Stat& s) {
    return s.n == 0 ? Json(nullptr) : Json{{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
}

}  // namespace

std::string render_table(const std::vector<ReportRow>& rows, TableFormat format) {
    if (format == TableFormat::Json) {
        Json tables = Json::object();
        for (const auto& r : rows) {
            const bool cls = r.workload == "classification";
            tables[r.workload].push_back({{"method", r.method},
                                          {"config_hash", fmt::format("{:016x}", r.config_hash)},
                                          {"runs", r.runs},
                                          {cls ? "a_n" : "a_mmd", stat_json(r.a)},
                                          {cls ? "f_n" : "f_mmd", stat_json(r.f)},
                                          {"n_param_train_pct", stat_json(r.train_pct)},
                                          {"n_param_store_pct", stat_json(r.store_pct)}});
        }
        return tables.dump(2) + "\n";
    }
    std::vector<std::string> workloads;
    for (const auto& r : rows) {
        if (std::ranges::find(workloads, r.workload) == workloads.end()) {
            workloads.push_back(r.workload);
        }
    }
    auto cell = [](const Stat& s) { return s.n == 0 ? std::string("NA") : fmt::format("{:.4f}±{:.4f}", s.mean, s.std); };
    std::string out;
    for (const auto& w : workloads) {
        const bool cls = w == "classification";
        const char* a = cls ? "A_N" : "A_mmd";
        const char* f = cls ? "F_N" : "F_mmd";
        if (format == TableFormat::Markdown) {
            out += fmt::format("### {}\n\n| method | config | runs | {} | {} | N_param train % | N_param store % |\n", w, a, f);
            out += "|---|---|---|---|---|---|---|\n";
        } else {
            out += fmt::format("workload,method,config,runs,{0}_mean,{0}_std,{1}_mean,{1}_std,train_pct,store_pct\n", a, f);
        }
        for (const auto& r : rows) {
            if (r.workload != w) {
                continue;
            }
            if (format == TableFormat::Markdown) {
                out += fmt::format("| {} | {:016x} | {} | {} | {} | {:.4f} | {:.4f} |\n", r.method, r.config_hash, r.runs,
                                   cell(r.a), cell(r.f), r.train_pct.mean, r.store_pct.mean);
            } else {
                out += fmt::format("{},{},{:016x},{},{},{},{},{},{},{}\n", w, r.method, r.config_hash, r.runs,
                                   num_str(r.a.mean), num_str(r.a.std), num_str(r.f.mean), num_str(r.f.std),
                                   num_str(r.train_pct.mean), num_str(r.store_pct.mean));
            }
        }
        out += '\n';
    }
    return out;
}

std::vector<std::vector<Matrix>> deltas_from_checkpoints(const fs::path& run_dir) {
    std::vector<std::vector<Matrix>> out;
    for (std::size_t k = 1;; ++k) {
        const fs::path file = run_dir / "checkpoints" / fmt::format("task_{}.json", k);
        if (!fs::exists(file)) {
            break;
        }
        const Json ck = read_json(file);
        std::vector<Matrix> sites;
        for (const auto& site : ck.at("sites")) {
            const auto pairs = lora::pairs_from_json(site);
            const auto it = std::ranges::find_if(pairs, [&](const lora::LoraPair& p) { return p.task_id == static_cast<int>(k); });
            if (it == pairs.end()) {
                throw std::runtime_error(fmt::format("{}: site {} lacks task {}", file.string(),
                                                     site.at("site").get<std::string>(), k));
            }
            sites.push_back(it->delta());
        }
        for (const auto& d : ck.at("deltas")) {
            sites.push_back(lora::matrix_from_json(d));
        }
        out.push_back(std::move(sites));
    }
    if (out.empty()) {
        throw std::runtime_error(fmt::format("no checkpoints under {}", run_dir.string()));
    }
    return out;
}

std::string render_interference(const std::vector<metrics::PairInterference>& stats) {
    std::string out = "prev_task,task,opposite_pct,opposite_magnitude\n";
    for (const auto& p : stats) {
        out += fmt::format("{},{},{:.4f},{:.6e}\n", p.prev_task, p.task, p.opposite_fraction, p.opposite_magnitude);
    }
    out += fmt::format("mean_magnitude,{:.6e}\n", metrics::mean_interference_magnitude(stats));
    return out;
}

std::string sweep_csv(const std::vector<train::SweepRow>& rows, const std::string& workload) {
    const bool cls = workload == "classification";
    std::string out = fmt::format("value,{},{},interference_magnitude,final_task_loss\n", cls ? "a_n" : "a_mmd",
                                  cls ? "f_n" : "f_mmd");
    for (const auto& r : rows) {
        out += fmt::format("{},{},{},{:.6e},{:.6e}\n", r.value, metrics::format_value(r.report.headline_a()),
                           metrics::format_value(r.report.headline_f()), r.report.interference_magnitude,
                           r.report.final_task_loss);
    }
    return out;
}

}  // namespace clora::io
