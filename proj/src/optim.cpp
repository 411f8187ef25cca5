#include "vaqat/optim.hpp"

#include "vaqat/errors.hpp"
#include "vaqat/quantizer.hpp"

#include <cmath>
#include <numbers>

namespace vaqat {

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"min_lr", c.min_lr},
                     {"warmup_lr", c.warmup_lr},
                     {"warmup_fraction", c.warmup_fraction},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  OptimizerConfig d;
  c.lr = j.value("lr", d.lr);
  c.min_lr = j.value("min_lr", d.min_lr);
  c.warmup_lr = j.value("warmup_lr", d.warmup_lr);
  c.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  if (c.lr < 0 || c.min_lr < 0 || c.warmup_lr < 0 || c.weight_decay < 0) {
    throw ValidationError("optimizer: rates must be >= 0");
  }
  if (c.warmup_fraction < 0 || c.warmup_fraction > 1) throw ValidationError("optimizer: warmup_fraction outside [0, 1]");
  if (!(c.beta1 >= 0 && c.beta1 < 1 && c.beta2 >= 0 && c.beta2 < 1)) throw ValidationError("optimizer: betas outside [0, 1)");
}

double learning_rate(long step, long total_steps, long warmup_steps, const OptimizerConfig& c) {
  if (warmup_steps > 0 && step < warmup_steps) {
    const double frac = static_cast<double>(step) / static_cast<double>(warmup_steps);
    return c.warmup_lr + (c.lr - c.warmup_lr) * frac;
  }
  const long decay_steps = total_steps - warmup_steps;
  if (decay_steps <= 0) return c.lr;
  const double frac = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps));
  return c.min_lr + 0.5 * (c.lr - c.min_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

void AdamW::add(Tensor param, bool decay, bool positive_floor) {
  AdamSlot s;
  s.m = Matrix::Zero(param.rows(), param.cols());
  s.v = Matrix::Zero(param.rows(), param.cols());
  s.param = std::move(param);
  s.decay = decay;
  s.positive_floor = positive_floor;
  slots_.push_back(std::move(s));
}

void AdamW::step(double lr) {
  for (const auto& s : slots_) {
    if (s.param.has_grad()) check_finite(s.param.node()->grad, "parameter gradient");
  }
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& s : slots_) {
    Matrix& p = s.param.mutable_value();
    if (s.decay && config_.weight_decay > 0.0) p *= (1.0 - lr * config_.weight_decay);
    if (s.param.has_grad()) {
      const Matrix& g = s.param.node()->grad;
      s.m = b1 * s.m + (1.0 - b1) * g;
      s.v = b2 * s.v + (1.0 - b2) * g.cwiseAbs2();
    } else {
      s.m *= b1;
      s.v *= b2;
    }
    p.array() -= lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + config_.eps);
    if (s.positive_floor) p = p.cwiseMax(kScaleFloor);
  }
}

void AdamW::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

}  // namespace vaqat
