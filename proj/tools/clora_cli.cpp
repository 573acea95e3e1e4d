// SPDX-License-Identifier: Apache-2.0
//
// clora run | sweep | report | analyze-interference
//
// Exit codes: 0 ok, 1 runtime failure, 2 invalid config or arguments,
// 3 non-finite loss during training.

#include <atomic>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "clora/rundir.hpp"

namespace {

using namespace clora;
namespace fs = std::filesystem;

std::size_t thread_budget() {
    if (const char* env = std::getenv("CLORA_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n > 0) {
            return static_cast<std::size_t>(n);
        }
    }
    return std::max(1U, std::thread::hardware_concurrency());
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            try {
                out.push_back(std::stod(item));
            } catch (const std::exception&) {
                throw ConfigError("grid", fmt::format("not a number: '{}'", item));
            }
        }
    }
    return out;
}

struct ConfigArgs {
    std::string config;
    std::string method;
    std::string workload;
    std::optional<std::uint64_t> seed;
};

ExperimentConfig load_config(const ConfigArgs& a) {
    Json doc = Json::object();
    if (!a.config.empty()) {
        try {
            doc = io::read_json(a.config);
        } catch (const Json::exception& e) {
            throw ConfigError("config", fmt::format("{}: {}", a.config, e.what()));
        }
    }
    if (!a.method.empty()) doc["method"] = a.method;
    if (!a.workload.empty()) doc["workload"] = a.workload;
    if (a.seed) doc["seed"] = *a.seed;
    return parse_config(doc);
}

void add_config_flags(CLI::App* cmd, ConfigArgs& a) {
    cmd->add_option("--config", a.config, "Experiment config (JSON)");
    cmd->add_option("--method", a.method, "Override the method");
    cmd->add_option("--workload", a.workload, "Override the workload");
    cmd->add_option("--seed", a.seed, "Override the seed");
}

std::mutex out_mutex;

void say(const std::string& line) {
    const std::scoped_lock lock(out_mutex);
    std::cout << line << '\n' << std::flush;
}

int cmd_run(const ConfigArgs& args, const std::string& out, const std::string& seeds, bool verbose) {
    const ExperimentConfig base = load_config(args);
    std::vector<std::uint64_t> seed_list;
    for (double s : parse_list(seeds)) {
        seed_list.push_back(static_cast<std::uint64_t>(s));
    }
    const bool many = !seed_list.empty();
    if (!many) {
        seed_list.push_back(base.seed);
    }
    std::vector<ExperimentConfig> configs;
    for (auto s : seed_list) {
        ExperimentConfig c = base;
        c.seed = s;
        const fs::path root = out.empty() ? fs::path(base.out_dir.empty() ? "runs" : base.out_dir) : fs::path(out);
        c.out_dir = (many ? root / fmt::format("{}_seed{}", to_string(c.method), s) : root).string();
        configs.push_back(std::move(c));
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < configs.size(); i = next++) {
            try {
                train::LogSink sink;
                if (verbose) {
                    sink = [&](const std::string& l) { say(l); };
                }
                const auto art = train::run_experiment(configs[i], sink);
                io::write_run_dir(art, configs[i].out_dir);
                say(metrics::format_metrics_line(art.report));
            } catch (...) {
                const std::scoped_lock lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        for (std::size_t i = 0; i < std::min(thread_budget(), configs.size()); ++i) {
            pool.emplace_back(worker);
        }
    }
    if (error) {
        std::rethrow_exception(error);
    }
    return 0;
}

int cmd_sweep(const ConfigArgs& args, const std::string& param_name, const std::string& grid_text,
              const std::string& out) {
    const ExperimentConfig base = load_config(args);
    const auto param = train::parse_sweep_param(param_name);
    std::vector<double> grid = parse_list(grid_text);
    if (grid.empty()) {
        if (param != train::SweepParam::LearningRate) {
            throw ConfigError("grid", "a grid is required for this parameter");
        }
        grid = train::default_lr_grid();
    }
    const auto rows = train::hyper_sweep(base, param, grid, thread_budget());
    const fs::path dir = out.empty() ? fs::path("sweep") : fs::path(out);
    fs::create_directories(dir);
    for (const auto& r : rows) {
        const fs::path sub = dir / fmt::format("{}_{}", param_name, r.value);
        fs::create_directories(sub);
        io::write_json(metrics::to_json(r.report), sub / "metrics.json");
    }
    const std::string csv = io::sweep_csv(rows, to_string(base.workload));
    std::ofstream(dir / "sweep.csv") << csv;
    std::cout << csv;
    return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& format) {
    std::vector<fs::path> roots(runs.begin(), runs.end());
    if (format == "line") {
        for (const auto& r : io::collect_reports(roots)) {
            std::cout << metrics::format_metrics_line(r) << '\n';
        }
        return 0;
    }
    const auto table = io::render_table(io::aggregate(io::collect_reports(roots)), io::parse_table_format(format));
    std::cout << table;
    return 0;
}

int cmd_interference(const std::string& run) {
    const auto stats = metrics::interference_stats(io::deltas_from_checkpoints(run));
    std::cout << io::render_interference(stats);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual low-rank adaptation experiments"};
    app.require_subcommand(1);

    ConfigArgs run_args;
    std::string run_out;
    std::string run_seeds;
    bool verbose = false;
    auto* run = app.add_subcommand("run", "Train a task sequence and write a run directory");
    add_config_flags(run, run_args);
    run->add_option("--out", run_out, "Run directory (one per seed under it with --seeds)");
    run->add_option("--seeds", run_seeds, "Comma-separated seeds, e.g. 0,1,2");
    run->add_flag("-v,--verbose", verbose, "Echo the training log");

    ConfigArgs sweep_args;
    std::string param;
    std::string grid;
    std::string sweep_out;
    auto* sweep = app.add_subcommand("sweep", "Repeat a run over a hyperparameter grid");
    add_config_flags(sweep, sweep_args);
    sweep->add_option("--param", param, "lambda | rank | lr")->required();
    sweep->add_option("--grid", grid, "Comma-separated values (lr defaults to 5e-2..5e-8)");
    sweep->add_option("--out", sweep_out, "Output directory");

    std::vector<std::string> runs;
    std::string format = "markdown";
    auto* report = app.add_subcommand("report", "Aggregate metrics.json files into mean±std tables");
    report->add_option("runs", runs, "Run directories or metrics files")->required();
    report->add_option("--format", format, "markdown | csv | json | line (one metrics line per run)");

    std::string run_dir;
    auto* inter = app.add_subcommand("analyze-interference", "Opposite-sign update statistics of a run");
    inter->add_option("--run", run_dir, "Run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run) return cmd_run(run_args, run_out, run_seeds, verbose);
        if (*sweep) return cmd_sweep(sweep_args, param, grid, sweep_out);
        if (*report) return cmd_report(runs, format);
        if (*inter) return cmd_interference(run_dir);
    } catch (const ConfigError& e) {
        std::cerr << "invalid config (" << e.key() << "): " << e.what() << '\n';
        return 2;
    } catch (const train::NonFiniteLoss& e) {
        std::cerr << e.what() << '\n';
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid argument: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
