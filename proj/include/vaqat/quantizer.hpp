#pragma once

#include "vaqat/sites.hpp"
#include "vaqat/tensor.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace vaqat {

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 8;
inline constexpr double kScaleFloor = 1e-9;

/// Integer grid extent: values are quantized onto {-q_n, ..., q_p}.
struct Levels {
  int q_n = 0;
  int q_p = 0;
  friend bool operator==(const Levels&, const Levels&) = default;
};

/// Throws UnsupportedBitwidthError outside [2, 8].
Levels levels(int bits, bool is_signed);

namespace detail {

// Ties go to the even neighbour under the default FE_TONEAREST mode.
template <typename Scalar>
inline Scalar round_half_even(Scalar v) {
  return std::nearbyint(v);
}

}  // namespace detail

// --- scalar and Eigen-expression forms ---------------------------------------

template <typename Scalar>
inline Scalar quantize_to_int(Scalar x, Scalar s, Levels lv) {
  return detail::round_half_even(std::clamp(x / s, Scalar(-lv.q_n), Scalar(lv.q_p)));
}

template <typename Scalar>
inline Scalar fake_quantize(Scalar x, Scalar s, Levels lv) {
  return s * quantize_to_int(x, s, lv);
}

template <typename Derived>
typename Derived::PlainObject quantize_to_int(const Eigen::DenseBase<Derived>& x,
                                              typename Derived::Scalar s, Levels lv) {
  using Scalar = typename Derived::Scalar;
  return x.derived().unaryExpr([s, lv](Scalar v) { return quantize_to_int(v, s, lv); });
}

template <typename Derived>
typename Derived::PlainObject fake_quantize(const Eigen::DenseBase<Derived>& x,
                                            typename Derived::Scalar s, Levels lv) {
  using Scalar = typename Derived::Scalar;
  return x.derived().unaryExpr([s, lv](Scalar v) { return fake_quantize(v, s, lv); });
}

/// STE pass-through mask: 1 where -q_n <= x/s <= q_p, else 0.
template <typename Derived>
typename Derived::PlainObject ste_mask(const Eigen::DenseBase<Derived>& x,
                                       typename Derived::Scalar s, Levels lv) {
  using Scalar = typename Derived::Scalar;
  return x.derived().unaryExpr([s, lv](Scalar v) {
    const Scalar r = v / s;
    return (r >= Scalar(-lv.q_n) && r <= Scalar(lv.q_p)) ? Scalar(1) : Scalar(0);
  });
}

template <typename Derived>
typename Derived::PlainObject ste_input_grad(const Eigen::DenseBase<Derived>& x,
                                             typename Derived::Scalar s, Levels lv,
                                             const Eigen::DenseBase<Derived>& upstream) {
  return upstream.derived().cwiseProduct(ste_mask(x, s, lv));
}

/// d(fake_quantize)/ds for one element.
///
/// In range this is round(x/s) - x/s. The leading minus on x/s comes from
/// differentiating s * round(x/s) with the rounding treated as identity.
template <typename Scalar>
inline Scalar scale_grad(Scalar x, Scalar s, Levels lv) {
  const Scalar r = x / s;
  if (r <= Scalar(-lv.q_n)) return Scalar(-lv.q_n);
  if (r >= Scalar(lv.q_p)) return Scalar(lv.q_p);
  return -r + detail::round_half_even(r);
}

/// 1 / sqrt(q_p * ||w||_1), capped at `max_factor` (also used when w == 0).
template <typename Derived>
double grad_scale_factor(const Eigen::DenseBase<Derived>& w, int q_p, double max_factor = 1e4) {
  const double l1 = w.derived().cwiseAbs().sum();
  const double denom = static_cast<double>(q_p) * l1;
  if (!(denom > 0.0)) return max_factor;
  return std::min(1.0 / std::sqrt(denom), max_factor);
}

/// 2 * mean(|w|) / sqrt(q_p), floored at kScaleFloor.
template <typename Derived>
double init_scale(const Eigen::DenseBase<Derived>& w, int q_p) {
  if (w.size() == 0) return kScaleFloor;
  const double m = w.derived().cwiseAbs().mean();
  return std::max(2.0 * m / std::sqrt(static_cast<double>(q_p)), kScaleFloor);
}

// --- differentiable form ------------------------------------------------------

/// s * round(clip(x/s, -q_n, q_p)) with the STE input gradient and the
/// analytic scale gradient. `scale` is a 1x1 tensor; throws ValidationError
/// if it is not positive.
Tensor fake_quantize(const Tensor& x, const Tensor& scale, Levels lv);

// --- policy -------------------------------------------------------------------

enum class Granularity { PerLayer, PerModule, PerHeadTensor };

std::string_view to_string(Granularity g);
Granularity granularity_from_string(std::string_view s);

struct QuantizerSpec {
  int bits = 8;
  bool is_signed = true;
  Levels lv{};
  Granularity granularity = Granularity::PerLayer;
  bool grad_scaling = true;
};

QuantizerSpec make_spec(int bits, bool is_signed, Granularity g, bool grad_scaling);

struct QuantizerState {
  Tensor scale = Tensor::scalar(1.0, true);
  std::string owner;
};

/// One learnable scale and every site that shares it.
struct QuantGroup {
  std::string name;
  SiteRole role = SiteRole::Weight;
  QuantizerSpec spec;
  QuantizerState state;
  std::vector<QuantSite> sites;
};

/// Which sites are quantized, at what precision, and with which scale.
struct BitPlan {
  int global_bits = 4;  // 0 = full precision everywhere unless overridden
  // Applied in order; later entries win. Bits 0 keeps the matched sites in
  // full precision.
  std::vector<std::pair<std::string, int>> overrides;
  bool quantize_activations = true;
  bool quantize_attention_probs = false;
  Granularity attention_granularity = Granularity::PerHeadTensor;
  bool grad_scaling = true;
  double grad_scale_max = 1e4;
  friend bool operator==(const BitPlan&, const BitPlan&) = default;
};

void to_json(nlohmann::json& j, const BitPlan& p);
void from_json(const nlohmann::json& j, BitPlan& p);

/// Resolved bitwidth for one site: nullopt = full precision. Embedding and
/// classifier sites are forced to 8 bits whenever they are quantized.
std::optional<int> resolve_bits(const BitPlan& plan, const QuantSite& site);

class QuantPolicy {
 public:
  QuantPolicy() = default;

  /// Groups every quantized site. Scales start at 1 and are set later with
  /// init_scale once weights or calibration activations are known.
  static QuantPolicy build(const std::vector<QuantSite>& sites, const BitPlan& plan);

  /// nullptr when the site stays in full precision.
  QuantGroup* group_for(const QuantSite& site);
  const QuantGroup* group_for(const QuantSite& site) const;
  /// Like group_for but throws PolicyError when the site was never registered.
  const QuantGroup* lookup(const QuantSite& site) const;

  std::vector<QuantGroup>& groups() { return groups_; }
  const std::vector<QuantGroup>& groups() const { return groups_; }
  const std::vector<QuantSite>& sites() const { return sites_; }

  std::vector<Tensor> scale_parameters() const;
  nlohmann::json to_json() const;

 private:
  std::vector<QuantSite> sites_;
  std::vector<QuantGroup> groups_;
  std::map<std::string, std::optional<std::size_t>> site_to_group_;
};

/// The mapping described by build_quant_policy; identical to QuantPolicy::build.
QuantPolicy build_quant_policy(const std::vector<QuantSite>& sites, const BitPlan& plan);

}  // namespace vaqat
