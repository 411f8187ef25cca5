#pragma once

#include "vaqat/config.hpp"
#include "vaqat/data.hpp"
#include "vaqat/diagnostics.hpp"
#include "vaqat/losses.hpp"
#include "vaqat/model.hpp"
#include "vaqat/quantizer.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace vaqat {

struct Accuracy {
  double top1 = 0.0;  // percent
  double topk = 0.0;  // percent
};

/// Row-stacked token ids for the given samples.
std::vector<int> stack_tokens(const Dataset& data, std::span<const int> ids);

/// Softmax outputs of a forward pass without a tape, one row per sequence.
Matrix predict_probs(const Transformer& model, std::span<const int> tokens, Index batch,
                     const QuantPolicy* policy = nullptr);

Accuracy evaluate(const Transformer& model, const Dataset& data, int topk, const QuantPolicy* policy = nullptr,
                  int batch_size = 256);

struct TeacherResult {
  Transformer model;
  Accuracy eval;
  double final_loss = 0.0;
};

/// Full-precision training from scratch with hard labels. With
/// teacher.crop_prob > 0 a training sample is replaced by a random crop of
/// itself at that rate.
TeacherResult train_teacher(const ExperimentConfig& config, const TaskData& data);

/// The M crop windows of every sample, drawn from the "crops" substream.
/// Each window is {offset, length}.
std::vector<std::vector<std::pair<int, int>>> crop_windows(int samples, int crops, int seq_len, int crop_len,
                                                           std::uint64_t seed);

/// Teacher distributions for every (sample, crop) pair.
SoftLabelCache build_soft_label_cache(const Transformer& teacher, const Dataset& train, int crops, int crop_len,
                                      std::uint64_t seed, int batch_size = 256);

/// Teacher distributions recomputed for `keys` using the crop windows that
/// build_soft_label_cache would have drawn.
Matrix live_crop_probs(const Transformer& teacher, const Dataset& train, std::span<const CropKey> keys,
                       const std::vector<std::vector<std::pair<int, int>>>& windows);

/// The (sample, crop) keys consumed in one epoch: every sample once, each with
/// a crop index picked from the "mckd.pick" substream, in shuffled order.
std::vector<CropKey> mckd_epoch_keys(int samples, int crops, int epoch, std::uint64_t seed);

struct DiagnosticsRow {
  long iteration = 0;
  int epoch = 0;
  double lr = 0.0;
  double kd_loss = 0.0;
  double obr_loss = 0.0;
  double lambda = 0.0;
  double oscillating_pct = 0.0;
  double sdam = 0.0;
  double train_acc = 0.0;
  std::optional<double> eval_acc;  // end of each epoch only
};

struct QatResult {
  Accuracy eval;
  double oscillating_pct_final = 0.0;
  double sdam_final = 0.0;
  double bin_variance_final = 0.0;
  double wall_seconds = 0.0;
  std::vector<DiagnosticsRow> diagnostics;
};

/// Multiplies every stored scale gradient by grad_scale_factor of its
/// group: the group's weights, or for activation groups the inputs recorded
/// in `trace`. Groups with grad_scaling off are left alone.
void apply_grad_scaling(QuantPolicy& policy, const Transformer& model, const ActivationTrace& trace,
                        double max_factor);

/// Everything a QAT run consumes besides its config.
struct QatInputs {
  const Transformer* teacher = nullptr;
  const TaskData* data = nullptr;
  const SoftLabelCache* cache = nullptr;  // required for multi-crop from cache
};

/// One quantization-aware training run. When `run_dir` is non-empty the run
/// writes config.json, policy.json, diagnostics.csv, metrics.json,
/// timing.json and checkpoint.{bin,json} there; on a non-finite value or a
/// cache miss it writes checkpoint_last_good.{bin,json} and rethrows.
QatResult run_qat(const ExperimentConfig& config, const QatInputs& inputs, const std::string& run_dir = {});

void write_diagnostics_csv(const std::string& path, const std::vector<DiagnosticsRow>& rows);
nlohmann::json metrics_json(const QatResult& result);

// --- file-level pipeline used by the command line ------------------------------

/// `path` if absolute, else out_dir / path.
std::string resolve_path(const ExperimentConfig& config, const std::string& path);

/// Trains a teacher and writes <teacher_path>.{bin,json} plus
/// <teacher_path>_metrics.json.
TeacherResult train_teacher_to_disk(const ExperimentConfig& config);
Transformer load_teacher(const ExperimentConfig& config);
SoftLabelCache build_cache_to_disk(const ExperimentConfig& config, const Transformer& teacher);

/// Loads teacher and cache (creating them first when `prepare` is set and
/// they are missing) and runs QAT into out_dir / run_name.
QatResult run_experiment(const ExperimentConfig& config, bool prepare);

/// Sensitivity grid runner: each run is a short QAT from the teacher with
/// that run's plan, scored on the eval set.
GridRunner make_grid_runner(const ExperimentConfig& config, const QatInputs& inputs);

}  // namespace vaqat
