#include "fd.hpp"

#include "vaqat/errors.hpp"
#include "vaqat/model.hpp"
#include "vaqat/ops.hpp"
#include "vaqat/quantizer.hpp"
#include "vaqat/sites.hpp"
#include "vaqat/train.hpp"

#include <gtest/gtest.h>

#include <cfenv>
#include <cmath>
#include <random>
#include <set>

using namespace vaqat;

namespace {

// Reference quantizer written against the formula directly, with its own
// tie handling instead of nearbyint.
double ref_round_half_even(double v) {
  const double f = std::floor(v);
  const double frac = v - f;
  if (frac < 0.5) return f;
  if (frac > 0.5) return f + 1.0;
  return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

double ref_fake_quantize(double x, double s, int bits, bool is_signed) {
  const double qn = is_signed ? std::pow(2.0, bits - 1) : 0.0;
  const double qp = is_signed ? std::pow(2.0, bits - 1) - 1.0 : std::pow(2.0, bits) - 1.0;
  double r = x / s;
  if (r < -qn) r = -qn;
  if (r > qp) r = qp;
  return s * ref_round_half_even(r);
}

// The quantizer output as a function of s alone, for finite differences.
double fq_of_s(double x, double s, Levels lv) { return fake_quantize(x, s, lv); }

Tensor row(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return Tensor(m);
}

TransformerConfig small_model(int layers, int heads) {
  TransformerConfig c;
  c.layers = layers;
  c.heads = heads;
  c.dim = 8;
  c.seq_len = 4;
  c.vocab = 16;
  return c;
}

int count_role(const QuantPolicy& p, SiteRole role) {
  int n = 0;
  for (const auto& g : p.groups()) n += g.role == role;
  return n;
}

QuantSite weight_site(int layer, BlockKind kind, std::optional<int> head = std::nullopt) {
  return QuantSite{ModulePath{layer, kind, head}, SiteRole::Weight};
}

}  // namespace

// --- levels -------------------------------------------------------------------

TEST(Levels, Examples) {
  EXPECT_EQ(levels(2, false), (Levels{0, 3}));
  EXPECT_EQ(levels(4, true), (Levels{8, 7}));
  EXPECT_EQ(levels(8, false), (Levels{0, 255}));
  EXPECT_EQ(levels(8, true), (Levels{128, 127}));
}

TEST(Levels, OutOfRangeBitwidthThrows) {
  EXPECT_THROW(levels(1, true), UnsupportedBitwidthError);
  EXPECT_THROW(levels(9, false), UnsupportedBitwidthError);
  EXPECT_THROW(levels(0, true), UnsupportedBitwidthError);
}

// --- forward ------------------------------------------------------------------

TEST(FakeQuantize, Examples) {
  const Levels u2 = levels(2, false);
  EXPECT_EQ(fake_quantize(0.0, 0.5, u2), 0.0);
  EXPECT_EQ(fake_quantize(1.3, 0.5, u2), 1.5);
  EXPECT_EQ(fake_quantize(10.0, 1.0, u2), 3.0);
  EXPECT_EQ(fake_quantize(-10.0, 1.0, levels(4, true)), -8.0);
}

TEST(FakeQuantize, TiesRoundToEven) {
  const Levels s4 = levels(4, true);
  EXPECT_EQ(fake_quantize(0.5, 1.0, s4), 0.0);
  EXPECT_EQ(fake_quantize(1.5, 1.0, s4), 2.0);
  EXPECT_EQ(fake_quantize(2.5, 1.0, s4), 2.0);
  EXPECT_EQ(fake_quantize(-2.5, 1.0, s4), -2.0);
}

TEST(FakeQuantize, NonPositiveScaleThrows) {
  const Tensor x = row({1.0, 2.0});
  EXPECT_THROW(fake_quantize(x, Tensor::scalar(0.0), levels(4, true)), ValidationError);
  EXPECT_THROW(fake_quantize(x, Tensor::scalar(-1.0), levels(4, true)), ValidationError);
  EXPECT_THROW(fake_quantize(x, Tensor(Matrix::Ones(1, 2)), levels(4, true)), DimensionError);
}

TEST(FakeQuantize, MatchesScalarReferenceBitForBit) {
  ASSERT_EQ(std::fegetround(), FE_TONEAREST);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> xd(-20.0, 20.0);
  std::uniform_real_distribution<double> sd(0.01, 3.0);
  std::uniform_int_distribution<int> bd(2, 8);
  std::bernoulli_distribution signd(0.5);
  std::bernoulli_distribution tie(0.1);
  for (int i = 0; i < 10000; ++i) {
    const int b = bd(rng);
    const bool sg = signd(rng);
    // Power-of-two scales with half-integer x exercise exact ties.
    double s = sd(rng);
    double x = xd(rng);
    if (tie(rng)) {
      s = 0.25;
      x = (std::floor(x) + 0.5) * s;
    }
    const double got = fake_quantize(x, s, levels(b, sg));
    const double want = ref_fake_quantize(x, s, b, sg);
    ASSERT_EQ(got, want) << "x=" << x << " s=" << s << " b=" << b << " signed=" << sg;

    const Tensor t = fake_quantize(Tensor(Matrix::Constant(1, 1, x)), Tensor::scalar(s), levels(b, sg));
    ASSERT_EQ(t.item(), want);
  }
}

TEST(FakeQuantize, IdempotentAndOnGrid) {
  std::mt19937_64 rng(11);
  for (int b = 2; b <= 8; ++b) {
    for (bool sg : {true, false}) {
      const Levels lv = levels(b, sg);
      const double s = 0.37;
      const Matrix x = vaqat::testing::random_matrix(20, 20, rng, 3.0);
      const Matrix q = fake_quantize(x, s, lv);
      EXPECT_EQ(fake_quantize(q, s, lv), q);
      for (Index i = 0; i < q.size(); ++i) {
        const double k = q.data()[i] / s;
        EXPECT_NEAR(k, std::round(k), 1e-9);
        EXPECT_GE(std::round(k), -lv.q_n);
        EXPECT_LE(std::round(k), lv.q_p);
      }
    }
  }
}

TEST(FakeQuantize, NondecreasingInX) {
  const Levels lv = levels(3, true);
  double prev = -1e300;
  for (double x = -5.0; x <= 5.0; x += 1e-3) {
    const double q = fake_quantize(x, 0.4, lv);
    ASSERT_GE(q, prev);
    prev = q;
  }
}

// --- STE ----------------------------------------------------------------------

TEST(SteInputGrad, ClosedInterval) {
  const Levels lv = levels(2, false);  // [0, 3]
  Matrix x(1, 5);
  x << 1.0, 1.5, 1.5001, 1.6, -0.1;  // s = 0.5: 2, 3, just above 3, 3.2, below 0
  const Matrix up = Matrix::Constant(1, 5, 2.0);
  const Matrix g = ste_input_grad(x, 0.5, lv, up);
  EXPECT_EQ(g(0, 0), 2.0);
  EXPECT_EQ(g(0, 1), 2.0);
  EXPECT_EQ(g(0, 2), 0.0);
  EXPECT_EQ(g(0, 3), 0.0);
  EXPECT_EQ(g(0, 4), 0.0);

  Matrix lo(1, 1);
  lo << -8.0;
  EXPECT_EQ(ste_input_grad(lo, 1.0, levels(4, true), Matrix::Ones(1, 1).eval())(0, 0), 1.0);
}

// --- scale gradient -----------------------------------------------------------

TEST(ScaleGrad, Examples) {
  const Levels u2 = levels(2, false);
  EXPECT_NEAR(scale_grad(1.3, 0.5, u2), 0.4, 1e-12);
  EXPECT_EQ(scale_grad(10.0, 1.0, u2), 3.0);
  EXPECT_EQ(scale_grad(1.5, 0.5, u2), 3.0);  // x/s == Q_P
  EXPECT_EQ(scale_grad(0.0, 0.5, u2), 0.0);
  EXPECT_EQ(scale_grad(-20.0, 1.0, levels(4, true)), -8.0);
}

namespace {

struct FdPoint {
  double x, s;
  Levels lv;
};

// Points at least 0.01 away from half-integers and from the clip limits.
std::vector<FdPoint> fd_points(bool saturated, int count) {
  std::mt19937_64 rng(saturated ? 4 : 3);
  std::uniform_real_distribution<double> xd(-12.0, 12.0);
  std::uniform_real_distribution<double> sd(0.05, 2.0);
  std::vector<FdPoint> out;
  for (int i = 0; static_cast<int>(out.size()) < count; ++i) {
    const Levels lv = levels(2 + i % 7, i % 2 == 0);
    const double x = xd(rng);
    const double s = sd(rng);
    const double r = x / s;
    if (std::abs(r - std::floor(r) - 0.5) < 0.01) continue;
    if (std::abs(r + lv.q_n) < 0.01 || std::abs(r - lv.q_p) < 0.01) continue;
    if ((r < -lv.q_n || r > lv.q_p) != saturated) continue;
    out.push_back({x, s, lv});
  }
  return out;
}

double rel_err(double a, double n) { return std::abs(a - n) / std::max(std::abs(n), 1e-3); }

}  // namespace

TEST(ScaleGrad, SaturatedBranchMatchesForwardFiniteDifferences) {
  const double h = 1e-6;
  for (const auto& p : fd_points(true, 2000)) {
    const double fd = (fq_of_s(p.x, p.s + h, p.lv) - fq_of_s(p.x, p.s - h, p.lv)) / (2.0 * h);
    ASSERT_LT(rel_err(scale_grad(p.x, p.s, p.lv), fd), 1e-3) << "x=" << p.x << " s=" << p.s;
  }
}

TEST(ScaleGrad, InRangeMatchesStraightThroughFiniteDifferences) {
  // Rounding linearized at the evaluation point: u -> u + (round(u0) - u0).
  // Its s-derivative is the straight-through scale gradient.
  const double h = 1e-6;
  for (const auto& p : fd_points(false, 2000)) {
    const double r0 = p.x / p.s;
    const double offset = ref_round_half_even(r0) - r0;
    auto surrogate = [&](double s) { return s * (p.x / s + offset); };
    const double fd = (surrogate(p.s + h) - surrogate(p.s - h)) / (2.0 * h);
    ASSERT_LT(rel_err(scale_grad(p.x, p.s, p.lv), fd), 1e-3) << "x=" << p.x << " s=" << p.s;
  }
}

TEST(ScaleGrad, InRangeForwardDerivativeIsTheRoundedLevel) {
  // The forward pass is piecewise linear in s with slope round(x/s); the
  // straight-through gradient differs from it by exactly -x/s.
  const double h = 1e-6;
  for (const auto& p : fd_points(false, 200)) {
    const double fd = (fq_of_s(p.x, p.s + h, p.lv) - fq_of_s(p.x, p.s - h, p.lv)) / (2.0 * h);
    const double r = p.x / p.s;
    ASSERT_NEAR(fd, ref_round_half_even(r), 1e-6);
    ASSERT_NEAR(scale_grad(p.x, p.s, p.lv), fd - r, 1e-6);
  }
}

TEST(ScaleGrad, PlusSignVariantIsRejected) {
  const Levels u2 = levels(2, false);
  const double x = 1.3, s = 0.5;
  const double r0 = x / s;
  const double offset = ref_round_half_even(r0) - r0;
  const double h = 1e-6;
  const double fd = ((s + h) * (x / (s + h) + offset) - (s - h) * (x / (s - h) + offset)) / (2.0 * h);
  EXPECT_NEAR(fd, 0.4, 1e-8);
  EXPECT_GT(std::abs((r0 + std::nearbyint(r0)) - fd), 1.0);
}

TEST(ScaleGrad, AutodiffMatchesElementwiseSumExactly) {
  std::mt19937_64 rng(5);
  const Levels lv = levels(3, true);
  const Tensor x(vaqat::testing::random_matrix(7, 9, rng, 1.5), true);
  const Tensor s = Tensor::scalar(0.31, true);
  Tape tape;
  {
    TapeScope scope(tape);
    backward(sum(fake_quantize(x, s, lv)));
  }
  double want = 0.0;
  for (Index i = 0; i < x.size(); ++i) want += scale_grad(x.value().data()[i], 0.31, lv);
  EXPECT_EQ(s.grad()(0, 0), want);
  EXPECT_EQ(x.grad(), ste_mask(x.value(), 0.31, lv));
}

// --- gradient scaling and init ------------------------------------------------

TEST(GradScaleFactor, Examples) {
  Matrix w(1, 4);
  w << 1, -1, 1, 1;
  EXPECT_DOUBLE_EQ(grad_scale_factor(w, 4), 0.25);
  Matrix one(1, 1);
  one << 1.0;
  EXPECT_DOUBLE_EQ(grad_scale_factor(one, 1), 1.0);
  const Matrix w2 = 2.0 * w;
  EXPECT_NEAR(grad_scale_factor(w2, 4) / grad_scale_factor(w, 4), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_EQ(grad_scale_factor(Matrix::Zero(3, 3).eval(), 7, 50.0), 50.0);
  EXPECT_EQ(grad_scale_factor(Matrix::Constant(1, 1, 1e-30).eval(), 1, 1e4), 1e4);
}

TEST(InitScale, Examples) {
  Matrix w(1, 4);
  w << 0.1, -0.1, 0.1, -0.1;
  EXPECT_NEAR(init_scale(w, 4), 0.1, 1e-15);
  EXPECT_EQ(init_scale(Matrix::Zero(2, 2).eval(), 4), 1e-9);
  EXPECT_NEAR(init_scale(w, 1), 0.2, 1e-15);
}

// --- policy -------------------------------------------------------------------

TEST(Policy, CountsPerHeadTensor) {
  for (int L : {1, 2, 3}) {
    for (int h : {1, 2, 4}) {
      BitPlan plan;
      const auto p = build_quant_policy(enumerate_quant_sites(small_model(L, h)), plan);
      int head_weights = 0, ffn_weights = 0;
      for (const auto& g : p.groups()) {
        if (g.role != SiteRole::Weight) continue;
        if (is_attention(g.sites.front().path.kind)) {
          ++head_weights;
          EXPECT_EQ(g.sites.size(), 1u);
        }
        if (g.sites.front().path.kind == BlockKind::FfnFc1 || g.sites.front().path.kind == BlockKind::FfnFc2) {
          ++ffn_weights;
        }
      }
      EXPECT_EQ(head_weights, 4 * L * h);
      EXPECT_EQ(ffn_weights, 2 * L);
      // Plus embedding and classifier.
      EXPECT_EQ(count_role(p, SiteRole::Weight), 4 * L * h + 2 * L + 2);
    }
  }
}

TEST(Policy, TwoLayerTwoHeadWeightGroups) {
  const auto p = build_quant_policy(enumerate_quant_sites(small_model(2, 2)), BitPlan{});
  EXPECT_EQ(count_role(p, SiteRole::Weight), 22);
}

TEST(Policy, EveryWeightInExactlyOneGroup) {
  for (auto g : {Granularity::PerLayer, Granularity::PerModule, Granularity::PerHeadTensor}) {
    BitPlan plan;
    plan.attention_granularity = g;
    const auto sites = enumerate_quant_sites(small_model(2, 2), true);
    plan.quantize_attention_probs = true;
    const auto p = build_quant_policy(sites, plan);
    std::map<std::string, int> seen;
    for (const auto& grp : p.groups()) {
      for (const auto& s : grp.sites) ++seen[s.name()];
    }
    for (const auto& s : sites) {
      if (s.path.kind == BlockKind::Embed && s.role == SiteRole::Input) continue;
      EXPECT_EQ(seen[s.name()], 1) << s.name();
    }
  }
}

TEST(Policy, SingleHeadPartitionIndependentOfGranularity) {
  auto partition = [](Granularity g) {
    BitPlan plan;
    plan.attention_granularity = g;
    const auto p = build_quant_policy(enumerate_quant_sites(small_model(2, 1)), plan);
    std::set<std::set<std::string>> out;
    for (const auto& grp : p.groups()) {
      std::set<std::string> names;
      for (const auto& s : grp.sites) names.insert(s.name());
      out.insert(names);
    }
    return out;
  };
  EXPECT_EQ(partition(Granularity::PerHeadTensor), partition(Granularity::PerModule));
  EXPECT_EQ(partition(Granularity::PerHeadTensor), partition(Granularity::PerLayer));
}

TEST(Policy, EmbedAndClassifierForcedToEightBits) {
  for (int b : {2, 3, 4, 6}) {
    BitPlan plan;
    plan.global_bits = b;
    const auto p = build_quant_policy(enumerate_quant_sites(small_model(1, 2)), plan);
    EXPECT_EQ(p.group_for(weight_site(-1, BlockKind::Classifier))->spec.bits, 8);
    EXPECT_EQ(p.group_for(weight_site(-1, BlockKind::Embed))->spec.bits, 8);
    EXPECT_EQ(p.group_for(weight_site(0, BlockKind::FfnFc1))->spec.bits, b);
  }
}

TEST(Policy, Signedness) {
  BitPlan plan;
  plan.quantize_attention_probs = true;
  const auto p = build_quant_policy(enumerate_quant_sites(small_model(1, 2), true), plan);
  for (const auto& g : p.groups()) {
    const auto k = g.sites.front().path.kind;
    const bool unsigned_act = g.role == SiteRole::Input && (k == BlockKind::FfnFc2 || k == BlockKind::AttnProbs);
    EXPECT_EQ(g.spec.is_signed, !unsigned_act) << g.name;
    EXPECT_EQ(g.spec.lv, levels(g.spec.bits, g.spec.is_signed));
  }
}

TEST(Policy, HeadPresenceMismatchThrows) {
  std::vector<QuantSite> bad{QuantSite{ModulePath{0, BlockKind::AttnQuery, std::nullopt}, SiteRole::Weight}};
  EXPECT_THROW(build_quant_policy(bad, BitPlan{}), PolicyError);
  std::vector<QuantSite> bad2{QuantSite{ModulePath{0, BlockKind::FfnFc1, 0}, SiteRole::Weight}};
  EXPECT_THROW(build_quant_policy(bad2, BitPlan{}), PolicyError);
}

TEST(Policy, UnknownSiteLookupThrows) {
  const auto p = build_quant_policy(enumerate_quant_sites(small_model(1, 1)), BitPlan{});
  EXPECT_THROW(p.lookup(weight_site(5, BlockKind::FfnFc1)), PolicyError);
  EXPECT_EQ(p.group_for(weight_site(5, BlockKind::FfnFc1)), nullptr);
  EXPECT_NE(p.lookup(weight_site(0, BlockKind::FfnFc1)), nullptr);
}

TEST(Policy, FullPrecisionOverridesAndFlags) {
  BitPlan plan;
  plan.overrides = {{"ffn", 0}, {"layer0.head1", 3}};
  plan.quantize_activations = false;
  const auto p = build_quant_policy(enumerate_quant_sites(small_model(1, 2)), plan);
  EXPECT_EQ(p.group_for(weight_site(0, BlockKind::FfnFc1)), nullptr);
  EXPECT_EQ(p.group_for(weight_site(0, BlockKind::AttnKey, 1))->spec.bits, 3);
  EXPECT_EQ(p.group_for(weight_site(0, BlockKind::AttnKey, 0))->spec.bits, 4);
  EXPECT_EQ(count_role(p, SiteRole::Input), 0);
}

TEST(Policy, UnsupportedOverrideBitsThrow) {
  BitPlan plan;
  plan.overrides = {{"query", 1}};
  EXPECT_THROW(build_quant_policy(enumerate_quant_sites(small_model(1, 1)), plan), UnsupportedBitwidthError);
}

// --- selectors and plan JSON --------------------------------------------------

TEST(Selectors, Keywords) {
  const auto q = QuantSite{ModulePath{1, BlockKind::AttnQuery, 0}, SiteRole::Input};
  const auto fc2 = weight_site(0, BlockKind::FfnFc2);
  EXPECT_EQ(q.name(), "layers.1.attn.q.head0.input");
  EXPECT_EQ(fc2.name(), "layers.0.ffn.fc2.weight");
  EXPECT_TRUE(selector_matches("all", q));
  EXPECT_TRUE(selector_matches("mhsa", q));
  EXPECT_TRUE(selector_matches("query", q));
  EXPECT_FALSE(selector_matches("key", q));
  EXPECT_TRUE(selector_matches("activations", q));
  EXPECT_FALSE(selector_matches("weights", q));
  EXPECT_TRUE(selector_matches("layer1", q));
  EXPECT_TRUE(selector_matches("layer1.head0", q));
  EXPECT_FALSE(selector_matches("layer1.head1", q));
  EXPECT_TRUE(selector_matches("ffn", fc2));
  EXPECT_TRUE(selector_matches("layers.0.ffn.*", fc2));
  EXPECT_TRUE(selector_matches("layers.0.ffn.fc2.weight", fc2));
  EXPECT_TRUE(selector_matches("key+ffn", fc2));
  EXPECT_FALSE(selector_matches("key+value", fc2));
}

TEST(Selectors, ValidationRejectsGarbage) {
  EXPECT_NO_THROW(validate_selector("query+layer2.head1"));
  EXPECT_THROW(validate_selector("quer"), ValidationError);
  EXPECT_THROW(validate_selector("query+"), ValidationError);
}

TEST(BitPlanJson, RoundTrip) {
  BitPlan plan;
  plan.global_bits = 3;
  plan.overrides = {{"ffn", 8}, {"layers.0.*", 0}};
  plan.quantize_attention_probs = true;
  plan.attention_granularity = Granularity::PerModule;
  plan.grad_scaling = false;
  plan.grad_scale_max = 123.0;
  const nlohmann::json j = plan;
  EXPECT_EQ(j.get<BitPlan>(), plan);
  EXPECT_EQ(j.at("attention_granularity"), "per-module");
}

TEST(BitPlanJson, BadGranularityOrSelectorThrows) {
  EXPECT_THROW((nlohmann::json{{"attention_granularity", "per-channel"}}.get<BitPlan>()), ValidationError);
  EXPECT_THROW(
      (nlohmann::json{{"overrides", nlohmann::json::array({{{"select", "bogus"}, {"bits", 4}}})}}.get<BitPlan>()),
      ValidationError);
}

// --- gradient scaling applied after backward ------------------------------------

namespace {

struct ScaledGrads {
  std::vector<Matrix> before;
  std::vector<Matrix> after;
  std::vector<double> factors;
};

ScaledGrads run_scaling(bool enabled) {
  TransformerConfig cfg = small_model(1, 2);
  Rng rng(9);
  const Transformer model = Transformer::init(cfg, rng);
  BitPlan plan;
  plan.global_bits = 3;
  plan.grad_scaling = enabled;
  auto policy = build_quant_policy(enumerate_quant_sites(cfg), plan);
  for (auto& g : policy.groups()) g.state.scale.mutable_value()(0, 0) = 0.05;

  std::vector<int> tokens{1, 2, 3, 4, 5, 6, 7, 8};
  ActivationTrace trace;
  Tape tape;
  {
    TapeScope scope(tape);
    const ForwardContext ctx{&policy, &trace};
    backward(sum(model.forward(tokens, 2, ctx)));
  }
  ScaledGrads out;
  for (const auto& g : policy.groups()) {
    out.before.push_back(g.state.scale.grad());
    Matrix all;
    if (g.role == SiteRole::Weight) {
      std::vector<Matrix> parts;
      for (const auto& w : model.group_weights(g)) parts.push_back(w.value());
      Index n = 0;
      for (const auto& m : parts) n += m.size();
      all.resize(1, n);
      Index at = 0;
      for (const auto& m : parts) {
        all.block(0, at, 1, m.size()) = m.reshaped<Eigen::RowMajor>().transpose();
        at += m.size();
      }
    } else {
      Index n = 0;
      for (const auto& s : g.sites) n += trace.inputs.at(s.name()).size();
      all.resize(1, n);
      Index at = 0;
      for (const auto& s : g.sites) {
        const Matrix& m = trace.inputs.at(s.name()).value();
        all.block(0, at, 1, m.size()) = m.reshaped<Eigen::RowMajor>().transpose();
        at += m.size();
      }
    }
    out.factors.push_back(grad_scale_factor(all, g.spec.lv.q_p, plan.grad_scale_max));
  }
  apply_grad_scaling(policy, model, trace, plan.grad_scale_max);
  for (const auto& g : policy.groups()) out.after.push_back(g.state.scale.grad());
  return out;
}

}  // namespace

TEST(GradScaling, MultipliesStoredScaleGradientByFactor) {
  const auto r = run_scaling(true);
  ASSERT_FALSE(r.before.empty());
  int nonzero = 0;
  for (std::size_t i = 0; i < r.before.size(); ++i) {
    EXPECT_EQ(r.after[i](0, 0), r.before[i](0, 0) * r.factors[i]) << i;
    nonzero += r.before[i](0, 0) != 0.0;
  }
  EXPECT_GT(nonzero, 0);
}

TEST(GradScaling, DisabledLeavesGradientUntouched) {
  const auto on = run_scaling(true);
  const auto off = run_scaling(false);
  for (std::size_t i = 0; i < off.before.size(); ++i) {
    EXPECT_EQ(off.after[i], off.before[i]);
    EXPECT_EQ(off.before[i], on.before[i]);
  }
}
