#pragma once

#include "vaqat/losses.hpp"
#include "vaqat/quantizer.hpp"
#include "vaqat/sites.hpp"
#include "vaqat/tensor.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace vaqat {

// --- oscillation -------------------------------------------------------------------

/// Per-element oscillation frequency tracked as an EMA over integer
/// trajectories. An oscillation event is an integer change whose direction
/// differs from the direction of the previous change.
class OscillationState {
 public:
  OscillationState() = default;
  /// Starts from the integer values at t = 0; f starts at zero.
  OscillationState(const Eigen::ArrayXd& initial_int, double momentum);

  /// Advances one step. Throws DimensionError on a size mismatch.
  void update(const Eigen::ArrayXd& x_int);

  const Eigen::ArrayXd& frequency() const { return f_; }
  const Eigen::ArrayXd& previous_int() const { return prev_int_; }
  const Eigen::ArrayXi& previous_direction() const { return prev_dir_; }
  double momentum() const { return momentum_; }
  Index size() const { return f_.size(); }

 private:
  Eigen::ArrayXd f_;
  Eigen::ArrayXd prev_int_;
  Eigen::ArrayXi prev_dir_;
  double momentum_ = 0.01;
};

/// Percentage of elements with f > threshold.
double oscillating_fraction(const OscillationState& state, double threshold = 0.005);

// --- distribution statistics ----------------------------------------------------------

/// Average over layers of the population standard deviation of the per-group
/// mean absolute activation. Layers with fewer than two groups are skipped;
/// throws ValidationError if every layer is skipped or a group is empty.
double sdam(const std::vector<std::vector<Matrix>>& layer_groups);

struct BinStats {
  int level = 0;
  long count = 0;
  double mean_offset = 0.0;  // (w/s - level), in [-0.5, 0.5]
  double variance = 0.0;     // population variance of the real weights in the bin
};

struct BinHistogram {
  std::vector<BinStats> bins;  // levels -q_n .. q_p
  long below = 0;              // rounds under -q_n
  long above = 0;              // rounds over q_p
  long total() const;
};

BinHistogram bin_histogram(const Matrix& w, double s, Levels lv);

/// Mean population variance over bins holding at least `min_population`
/// weights, across all groups, with bins defined as in the bin regularizer
/// (saturated weights belong to the edge bins). Returns 0 if no bin
/// qualifies.
double mean_bin_variance(std::span<const ObrGroup> groups, int min_population = 2);

// --- sensitivity grids ---------------------------------------------------------------------

enum class GridMode { LeaveOneOut, OnlyOne, PerHead };

std::string_view to_string(GridMode m);
GridMode grid_mode_from_string(std::string_view s);

struct SensitivityGridSpec {
  GridMode mode = GridMode::LeaveOneOut;
  // Site selectors (see sites.hpp). Per-head mode with no targets covers every head.
  std::vector<std::string> targets;
  int low_bits = 3;   // the bitwidth under study
  int high_bits = 8;  // per-head mode: bitwidth of everything but the target
};

struct GridRun {
  std::string target;  // "FP", "All", or the target selector
  BitPlan plan;
};

/// The runs a grid consists of, baselines first: FP (nothing quantized), All
/// (every site at low_bits), then one per target. Throws ValidationError if a
/// target matches no site.
std::vector<GridRun> plan_sensitivity_grid(const SensitivityGridSpec& spec, const BitPlan& base,
                                           const std::vector<QuantSite>& universe, int layers,
                                           int heads);

struct GridRow {
  std::string mode;
  std::string target;
  std::string bitwidth;
  double top1 = 0.0;
  double topk = 0.0;
  std::string status;  // "ok" or "error: ..."
};

struct RunScores {
  double top1 = 0.0;
  double topk = 0.0;
};

using GridRunner = std::function<RunScores(const GridRun&)>;

/// Executes every planned run (up to `jobs` at a time) and returns rows in
/// plan order. A run that throws becomes an error row; the grid continues.
std::vector<GridRow> run_sensitivity_grid(const SensitivityGridSpec& spec, const std::vector<GridRun>& runs,
                                          const GridRunner& runner, int jobs = 1);

void write_grid_csv(const std::string& path, const std::vector<GridRow>& rows);

}  // namespace vaqat
