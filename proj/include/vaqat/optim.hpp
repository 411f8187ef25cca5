#pragma once

#include "vaqat/tensor.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace vaqat {

struct OptimizerConfig {
  double lr = 5e-4;
  double min_lr = 1e-5;
  double warmup_lr = 1e-6;
  double warmup_fraction = 0.1;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

/// Linear warmup from warmup_lr to lr over the first warmup_steps, then
/// cosine decay to min_lr at total_steps.
double learning_rate(long step, long total_steps, long warmup_steps, const OptimizerConfig& c);

struct AdamSlot {
  Tensor param;
  bool decay = false;
  bool positive_floor = false;  // quantizer scales: clamp to kScaleFloor after each step
  Matrix m;
  Matrix v;
};

/// Adam with decoupled weight decay.
class AdamW {
 public:
  explicit AdamW(const OptimizerConfig& config) : config_(config) {}

  void add(Tensor param, bool decay, bool positive_floor = false);

  /// Applies one update with learning rate `lr` to every slot. A slot with
  /// no gradient is treated as having a zero gradient. Throws NonFiniteError
  /// on a non-finite gradient before touching any parameter.
  void step(double lr);
  void zero_grad();

  long steps() const { return t_; }
  const std::vector<AdamSlot>& slots() const { return slots_; }

 private:
  OptimizerConfig config_;
  std::vector<AdamSlot> slots_;
  long t_ = 0;
};

}  // namespace vaqat
