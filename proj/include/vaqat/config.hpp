#pragma once

#include "vaqat/data.hpp"
#include "vaqat/losses.hpp"
#include "vaqat/model.hpp"
#include "vaqat/optim.hpp"
#include "vaqat/quantizer.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>

namespace vaqat {

enum class KdMode { None, Vanilla, MultiCrop };

std::string_view to_string(KdMode m);
KdMode kd_mode_from_string(std::string_view s);

struct TeacherConfig {
  int epochs = 40;
  int batch_size = 64;
  // Probability that a training sample is replaced by a random crop, so the
  // teacher's soft labels on crops are meaningful.
  double crop_prob = 0.5;
  OptimizerConfig optimizer{.lr = 2e-3, .min_lr = 1e-5, .warmup_lr = 1e-6, .warmup_fraction = 0.05,
                            .weight_decay = 1e-4};
  friend bool operator==(const TeacherConfig&, const TeacherConfig&) = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string run_name = "run";
  TransformerConfig model;
  SyntheticTaskSpec task;
  BitPlan plan;
  KdMode kd_mode = KdMode::MultiCrop;
  // Ground-truth cross-entropy for kd_mode == none.
  bool hard_label_fallback = false;
  // "cache": soft labels from the cache file; "live": teacher inference per batch.
  std::string mckd_source = "cache";
  int crops = 4;
  int crop_len = 0;  // 0: seq_len / 2
  ObrConfig obr;
  OptimizerConfig optimizer;
  int epochs = 30;
  int batch_size = 64;
  TeacherConfig teacher;
  double osc_momentum = 0.01;
  double osc_threshold = 0.005;
  int topk = 2;
  // Relative to the output directory unless absolute.
  std::string teacher_path = "teacher";
  std::string cache_path = "soft_labels.jsonl";
  std::string out_dir = ".";

  int effective_crop_len() const { return crop_len > 0 ? crop_len : model.seq_len / 2; }
  /// Cross-field checks (model/task agreement, KD mode, sizes).
  void validate() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

void to_json(nlohmann::json& j, const TeacherConfig& c);
void from_json(const nlohmann::json& j, TeacherConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Reads and validates a JSON config. ValidationError on any problem,
/// including a missing file.
ExperimentConfig load_config(const std::string& path);
void save_config(const std::string& path, const ExperimentConfig& c);

}  // namespace vaqat
