#include "vaqat/quantizer.hpp"

#include "vaqat/errors.hpp"
#include "vaqat/tensor_record.hpp"

namespace vaqat {

Levels levels(int bits, bool is_signed) {
  if (bits < kMinBits || bits > kMaxBits) {
    throw UnsupportedBitwidthError("bitwidth " + std::to_string(bits) + " outside [" +
                                   std::to_string(kMinBits) + ", " + std::to_string(kMaxBits) + "]");
  }
  if (is_signed) return {1 << (bits - 1), (1 << (bits - 1)) - 1};
  return {0, (1 << bits) - 1};
}

Tensor fake_quantize(const Tensor& x, const Tensor& scale, Levels lv) {
  if (scale.size() != 1) throw DimensionError("fake_quantize: scale must be 1x1");
  const double s = scale.item();
  if (!(s > 0.0)) throw ValidationError("fake_quantize: scale must be positive, got " + std::to_string(s));
  Matrix out = fake_quantize(x.value(), s, lv);
  return detail::record(
      std::move(out), {x, scale},
      [x, scale, s, lv](const Matrix& g) {
        if (x.requires_grad()) detail::push_grad(x, g.cwiseProduct(ste_mask(x.value(), s, lv)));
        if (scale.requires_grad()) {
          // Sequential accumulation so the result matches an element-by-element sum.
          double acc = 0.0;
          const double* xv = x.value().data();
          const double* gv = g.data();
          for (Index i = 0; i < x.size(); ++i) acc += gv[i] * scale_grad(xv[i], s, lv);
          Matrix ds(1, 1);
          ds(0, 0) = acc;
          detail::push_grad(scale, ds);
        }
      },
      "fake_quantize");
}

// ---------------------------------------------------------------------------

std::string_view to_string(Granularity g) {
  switch (g) {
    case Granularity::PerLayer: return "per-layer";
    case Granularity::PerModule: return "per-module";
    case Granularity::PerHeadTensor: return "per-head-tensor";
  }
  return "?";
}

Granularity granularity_from_string(std::string_view s) {
  if (s == "per-layer") return Granularity::PerLayer;
  if (s == "per-module") return Granularity::PerModule;
  if (s == "per-head-tensor") return Granularity::PerHeadTensor;
  throw ValidationError("unknown granularity '" + std::string(s) + "'");
}

QuantizerSpec make_spec(int bits, bool is_signed, Granularity g, bool grad_scaling) {
  return QuantizerSpec{bits, is_signed, levels(bits, is_signed), g, grad_scaling};
}

void to_json(nlohmann::json& j, const BitPlan& p) {
  nlohmann::json ov = nlohmann::json::array();
  for (const auto& [sel, bits] : p.overrides) ov.push_back({{"select", sel}, {"bits", bits}});
  j = nlohmann::json{{"global_bits", p.global_bits},
                     {"overrides", ov},
                     {"quantize_activations", p.quantize_activations},
                     {"quantize_attention_probs", p.quantize_attention_probs},
                     {"attention_granularity", std::string(to_string(p.attention_granularity))},
                     {"grad_scaling", p.grad_scaling},
                     {"grad_scale_max", p.grad_scale_max}};
}

void from_json(const nlohmann::json& j, BitPlan& p) {
  BitPlan d;
  p.global_bits = j.value("global_bits", d.global_bits);
  p.overrides.clear();
  if (j.contains("overrides")) {
    for (const auto& o : j.at("overrides")) {
      std::string sel = o.at("select").get<std::string>();
      validate_selector(sel);
      p.overrides.emplace_back(std::move(sel), o.at("bits").get<int>());
    }
  }
  p.quantize_activations = j.value("quantize_activations", d.quantize_activations);
  p.quantize_attention_probs = j.value("quantize_attention_probs", d.quantize_attention_probs);
  p.attention_granularity = granularity_from_string(
      j.value("attention_granularity", std::string(to_string(d.attention_granularity))));
  p.grad_scaling = j.value("grad_scaling", d.grad_scaling);
  p.grad_scale_max = j.value("grad_scale_max", d.grad_scale_max);
}

std::optional<int> resolve_bits(const BitPlan& plan, const QuantSite& site) {
  int bits = plan.global_bits;
  for (const auto& [sel, b] : plan.overrides) {
    if (selector_matches(sel, site)) bits = b;
  }
  if (bits == 0) return std::nullopt;
  if (site.role == SiteRole::Input && !plan.quantize_activations) return std::nullopt;
  if (site.path.kind == BlockKind::AttnProbs && !plan.quantize_attention_probs) return std::nullopt;
  if (site.path.kind == BlockKind::Embed || site.path.kind == BlockKind::Classifier) return 8;
  levels(bits, true);  // range check
  return bits;
}

namespace {

bool site_is_signed(const QuantSite& site) {
  if (site.role == SiteRole::Weight) return true;
  // Post-GELU and post-softmax activations.
  return !(site.path.kind == BlockKind::FfnFc2 || site.path.kind == BlockKind::AttnProbs);
}

std::string group_key(const QuantSite& site, Granularity attn) {
  if (is_attention(site.path.kind) && attn != Granularity::PerHeadTensor) {
    ModulePath p = site.path;
    p.head.reset();
    return QuantSite{p, site.role}.name();
  }
  return site.name();
}

}  // namespace

QuantPolicy QuantPolicy::build(const std::vector<QuantSite>& sites, const BitPlan& plan) {
  QuantPolicy policy;
  policy.sites_ = sites;
  std::map<std::string, std::size_t> key_to_group;
  for (const auto& site : sites) {
    if (site.path.kind == BlockKind::Embed && site.role == SiteRole::Input) {
      throw PolicyError("embedding input is token ids and cannot be quantized");
    }
    if (is_attention(site.path.kind) != site.path.head.has_value()) {
      throw PolicyError("site " + site.name() + ": head index must be present exactly for attention blocks");
    }
    const std::string name = site.name();
    if (policy.site_to_group_.contains(name)) throw PolicyError("duplicate site " + name);
    const auto bits = resolve_bits(plan, site);
    if (!bits) {
      policy.site_to_group_[name] = std::nullopt;
      continue;
    }
    const Granularity gran =
        is_attention(site.path.kind) ? plan.attention_granularity : Granularity::PerLayer;
    const std::string key = group_key(site, plan.attention_granularity);
    auto it = key_to_group.find(key);
    if (it == key_to_group.end()) {
      QuantGroup g;
      g.name = key;
      g.role = site.role;
      g.spec = make_spec(*bits, site_is_signed(site), gran, plan.grad_scaling);
      g.state.owner = key;
      it = key_to_group.emplace(key, policy.groups_.size()).first;
      policy.groups_.push_back(std::move(g));
    } else if (policy.groups_[it->second].spec.bits != *bits) {
      throw PolicyError("sites sharing scale " + key + " were given different bitwidths");
    }
    policy.groups_[it->second].sites.push_back(site);
    policy.site_to_group_[name] = it->second;
  }
  return policy;
}

QuantGroup* QuantPolicy::group_for(const QuantSite& site) {
  auto it = site_to_group_.find(site.name());
  if (it == site_to_group_.end() || !it->second) return nullptr;
  return &groups_[*it->second];
}

const QuantGroup* QuantPolicy::group_for(const QuantSite& site) const {
  return const_cast<QuantPolicy*>(this)->group_for(site);
}

const QuantGroup* QuantPolicy::lookup(const QuantSite& site) const {
  auto it = site_to_group_.find(site.name());
  if (it == site_to_group_.end()) throw PolicyError("policy has no entry for site " + site.name());
  return it->second ? &groups_[*it->second] : nullptr;
}

std::vector<Tensor> QuantPolicy::scale_parameters() const {
  std::vector<Tensor> out;
  out.reserve(groups_.size());
  for (const auto& g : groups_) out.push_back(g.state.scale);
  return out;
}

nlohmann::json QuantPolicy::to_json() const {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : groups_) {
    nlohmann::json sites = nlohmann::json::array();
    for (const auto& s : g.sites) sites.push_back(s.name());
    groups.push_back({{"name", g.name},
                      {"role", g.role == SiteRole::Weight ? "weight" : "input"},
                      {"bits", g.spec.bits},
                      {"signed", g.spec.is_signed},
                      {"q_n", g.spec.lv.q_n},
                      {"q_p", g.spec.lv.q_p},
                      {"granularity", std::string(vaqat::to_string(g.spec.granularity))},
                      {"grad_scaling", g.spec.grad_scaling},
                      {"sites", sites}});
  }
  nlohmann::json fp = nlohmann::json::array();
  for (const auto& s : sites_) {
    if (group_for(s) == nullptr) fp.push_back(s.name());
  }
  return {{"groups", groups}, {"full_precision_sites", fp}};
}

QuantPolicy build_quant_policy(const std::vector<QuantSite>& sites, const BitPlan& plan) {
  return QuantPolicy::build(sites, plan);
}

}  // namespace vaqat
