#pragma once

#include "vaqat/quantizer.hpp"
#include "vaqat/tensor.hpp"

#include <json.hpp>

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace vaqat {

// --- knowledge distillation ------------------------------------------------------

/// Cross-entropy to the teacher distribution; no hard labels involved.
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_probs);

/// Teacher output for one crop of one training sample, with the crop window
/// (in token positions) that produced it.
struct SoftLabelEntry {
  int sample_id = 0;
  int crop_index = 0;
  int offset = 0;
  int length = 0;
  std::vector<double> probs;
};

struct CropKey {
  int sample_id = 0;
  int crop_index = 0;
  auto operator<=>(const CropKey&) const = default;
};

class SoftLabelCache {
 public:
  /// Throws ValidationError on a non-distribution or a duplicate key.
  void add(SoftLabelEntry entry);
  /// Throws CacheMissError when the key was never stored.
  const SoftLabelEntry& get(CropKey key) const;
  bool contains(CropKey key) const { return index_.contains(key); }

  std::size_t size() const { return entries_.size(); }
  const std::vector<SoftLabelEntry>& entries() const { return entries_; }

  /// One JSON object per line: sample_id, crop_index, offset, length, probs.
  void save_jsonl(const std::string& path) const;
  static SoftLabelCache load_jsonl(const std::string& path);

 private:
  std::vector<SoftLabelEntry> entries_;
  std::map<CropKey, std::size_t> index_;
};

/// Teacher distributions for `keys`, stacked one row per key.
Matrix cached_teacher_probs(const SoftLabelCache& cache, std::span<const CropKey> keys);

/// Multi-crop KD: student logits have one row per (sample, crop) key, and
/// the loss averages the cross-entropy over all of them. Never falls back
/// to the teacher; a missing entry raises CacheMissError.
Tensor mckd_loss(const Tensor& student_logits, std::span<const CropKey> keys, const SoftLabelCache& cache);

/// The N x M x C layout: rows ordered sample-major, crop-minor.
Tensor mckd_loss(const Tensor& student_logits, std::span<const int> sample_ids, int crops,
                 const SoftLabelCache& cache);

// --- oscillation-aware bin regularization --------------------------------------

struct ObrConfig {
  double lambda_end = 0.1;
  long horizon = 0;  // iterations; 0 means the whole training run
  int min_bin_population = 2;
  bool squared_norm = false;
  friend bool operator==(const ObrConfig&, const ObrConfig&) = default;
};

void to_json(nlohmann::json& j, const ObrConfig& c);
void from_json(const nlohmann::json& j, ObrConfig& c);

/// One quantization group: its real weights, their fake-quantized values
/// (constant for the regularizer) and the grid.
struct ObrGroup {
  std::vector<Tensor> real;
  std::vector<Matrix> quantized;
  double scale = 1.0;
  Levels lv{};
};

ObrGroup make_obr_group(std::vector<Tensor> weights, double scale, Levels lv);

/// Sum over groups of ||w - w_q|| plus the population variance of the real
/// weights inside every bin that holds at least min_bin_population of them.
/// Gradients reach the real weights only.
Tensor obr_loss(std::span<const ObrGroup> groups, const ObrConfig& config);

/// lambda_end * (1 - cos(pi t / T)) / 2; constant lambda_end when T == 0.
double lambda_schedule(long t, long horizon, double lambda_end);

/// kd + lambda * obr. With lambda == 0 the KD tensor itself is returned.
Tensor total_loss(const Tensor& kd, const Tensor& obr, double lambda);

}  // namespace vaqat
