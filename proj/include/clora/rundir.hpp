// SPDX-License-Identifier: Apache-2.0
//
// Run directories on disk and the tables built from them.
//
//   <run>/config.json
//   <run>/checkpoints/task_<k>.json
//   <run>/snapshots/task_<k>_samples.csv     samples taken right after task k
//   <run>/snapshots/final_<k>_samples.csv    samples for task k after the last task
//   <run>/snapshots/reference_<k>_samples.csv  draws from task k's true distribution
//   <run>/metrics.json
//   <run>/log.txt

#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "clora/train.hpp"

namespace clora::io {

namespace fs = std::filesystem;
using num::Matrix;

void write_run_dir(const train::RunArtifacts& art, const fs::path& dir);
void write_samples_csv(const Matrix& m, const fs::path& file);
Matrix read_samples_csv(const fs::path& file);

Json read_json(const fs::path& file);
void write_json(const Json& j, const fs::path& file);

/// A report input holds no metrics.json.
class MissingMetrics : public std::invalid_argument {
public:
    explicit MissingMetrics(const fs::path& dir);
    [[nodiscard]] const fs::path& dir() const noexcept { return dir_; }

private:
    fs::path dir_;
};

/// Every metrics.json under the given files or directories (recursive, path
/// order within a directory). Throws MissingMetrics for a root without one.
std::vector<metrics::MetricsReport> collect_reports(const std::vector<fs::path>& roots);

struct Stat {
    double mean = 0.0;
    double std = 0.0;  // sample std, 0 for a single run
    std::size_t n = 0;
};
Stat mean_std(const std::vector<double>& xs);

struct ReportRow {
    std::string workload;
    std::string method;
    std::uint64_t config_hash = 0;
    std::size_t runs = 0;
    Stat a;  // A_mmd or A_N
    Stat f;  // F_mmd or F_N
    Stat train_pct;
    Stat store_pct;
};

/// Groups reports by (workload, method, config_hash), keeping first-seen order.
std::vector<ReportRow> aggregate(const std::vector<metrics::MetricsReport>& reports);

enum class TableFormat { Markdown, Csv, Json };
TableFormat parse_table_format(const std::string& s);
/// One table per workload.
std::string render_table(const std::vector<ReportRow>& rows, TableFormat format);

/// Per-task, per-site weight updates recovered from a run's checkpoints.
std::vector<std::vector<Matrix>> deltas_from_checkpoints(const fs::path& run_dir);
std::string render_interference(const std::vector<metrics::PairInterference>& stats);

/// value, A, F, interference_magnitude, final_task_loss per grid point.
std::string sweep_csv(const std::vector<train::SweepRow>& rows, const std::string& workload);

}  // namespace clora::io
