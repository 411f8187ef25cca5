#pragma once

#include <optional>
#include <string>
#include <vector>

namespace vaqat {

/// One finished run as seen from its directory.
struct RunSummary {
  std::string run;
  int global_bits = 0;
  std::string kd_mode;
  double lambda_end = 0.0;
  double top1 = 0.0;
  double topk = 0.0;
  double oscillating_pct = 0.0;
  double sdam = 0.0;
  std::optional<double> bin_variance;
};

/// Every immediate subdirectory of `root` holding metrics.json and
/// config.json, sorted by name. Throws ValidationError if `root` is not a
/// directory.
std::vector<RunSummary> collect_runs(const std::string& root);

/// Fixed-width comparison table, one line per run.
std::string format_report_table(const std::vector<RunSummary>& runs);

/// Summary TSV, one row per run.
void write_report_tsv(const std::string& path, const std::vector<RunSummary>& runs);

/// Long-format per-iteration curves from each run's diagnostics.csv:
/// run, iteration, oscillating_pct, kd_loss, obr_loss, lambda, sdam.
void write_curves_tsv(const std::string& path, const std::string& root, const std::vector<RunSummary>& runs);

}  // namespace vaqat
