#include "vaqat/model.hpp"

#include "vaqat/errors.hpp"
#include "vaqat/ops.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>

namespace vaqat {

void TransformerConfig::validate() const {
  if (layers < 0 || heads <= 0 || dim <= 0 || ffn_ratio <= 0 || vocab <= 0 || classes <= 0 ||
      seq_len <= 0) {
    throw ValidationError("transformer config: sizes must be positive (layers may be 0)");
  }
  if (dim % heads != 0) {
    throw ValidationError("transformer config: dim " + std::to_string(dim) +
                          " not divisible by heads " + std::to_string(heads));
  }
  if (!(ln_eps >= 0.0)) throw ValidationError("transformer config: ln_eps must be >= 0");
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = nlohmann::json{{"layers", c.layers},   {"heads", c.heads},     {"dim", c.dim},
                     {"ffn_ratio", c.ffn_ratio}, {"vocab", c.vocab}, {"classes", c.classes},
                     {"seq_len", c.seq_len}, {"ln_eps", c.ln_eps}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
  TransformerConfig d;
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.dim = j.value("dim", d.dim);
  c.ffn_ratio = j.value("ffn_ratio", d.ffn_ratio);
  c.vocab = j.value("vocab", d.vocab);
  c.classes = j.value("classes", d.classes);
  c.seq_len = j.value("seq_len", d.seq_len);
  c.ln_eps = j.value("ln_eps", d.ln_eps);
}

std::vector<QuantSite> enumerate_quant_sites(const TransformerConfig& config, bool attention_probs) {
  config.validate();
  std::vector<QuantSite> out;
  out.push_back({{-1, BlockKind::Embed, std::nullopt}, SiteRole::Weight});
  for (int l = 0; l < config.layers; ++l) {
    for (int h = 0; h < config.heads; ++h) {
      for (BlockKind k : {BlockKind::AttnQuery, BlockKind::AttnKey, BlockKind::AttnValue}) {
        out.push_back({{l, k, h}, SiteRole::Weight});
        out.push_back({{l, k, h}, SiteRole::Input});
      }
      if (attention_probs) out.push_back({{l, BlockKind::AttnProbs, h}, SiteRole::Input});
      out.push_back({{l, BlockKind::AttnProj, h}, SiteRole::Weight});
      out.push_back({{l, BlockKind::AttnProj, h}, SiteRole::Input});
    }
    for (BlockKind k : {BlockKind::FfnFc1, BlockKind::FfnFc2}) {
      out.push_back({{l, k, std::nullopt}, SiteRole::Weight});
      out.push_back({{l, k, std::nullopt}, SiteRole::Input});
    }
  }
  out.push_back({{-1, BlockKind::Classifier, std::nullopt}, SiteRole::Weight});
  out.push_back({{-1, BlockKind::Classifier, std::nullopt}, SiteRole::Input});
  return out;
}

// ---------------------------------------------------------------------------

namespace {

Tensor normal_tensor(Index rows, Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return Tensor(std::move(m), true);
}

Tensor constant_tensor(Index rows, Index cols, double v) {
  return Tensor(Matrix::Constant(rows, cols, v), true);
}

QuantSite site(int layer, BlockKind kind, std::optional<int> head, SiteRole role) {
  return QuantSite{{layer, kind, head}, role};
}

}  // namespace

Transformer Transformer::init(const TransformerConfig& config, Rng& rng) {
  config.validate();
  Transformer m;
  m.config_ = config;
  const Index d = config.dim;
  const Index dk = config.head_dim();
  const Index f = config.ffn_dim();
  const double w_in = 1.0 / std::sqrt(static_cast<double>(d));
  m.token_embed_ = normal_tensor(config.vocab, d, 0.5, rng);
  m.pos_embed_ = normal_tensor(config.seq_len, d, 0.02, rng);
  for (int l = 0; l < config.layers; ++l) {
    LayerWeights lw;
    for (int h = 0; h < config.heads; ++h) {
      HeadWeights hw;
      hw.query = normal_tensor(d, dk, w_in, rng);
      hw.key = normal_tensor(d, dk, w_in, rng);
      hw.value = normal_tensor(d, dk, w_in, rng);
      hw.proj = normal_tensor(dk, d, w_in, rng);
      lw.heads.push_back(std::move(hw));
    }
    lw.ln1_gamma = constant_tensor(1, d, 1.0);
    lw.ln1_beta = constant_tensor(1, d, 0.0);
    lw.fc1 = normal_tensor(d, f, w_in, rng);
    lw.fc1_bias = constant_tensor(1, f, 0.0);
    lw.fc2 = normal_tensor(f, d, 1.0 / std::sqrt(static_cast<double>(f)), rng);
    lw.fc2_bias = constant_tensor(1, d, 0.0);
    lw.ln2_gamma = constant_tensor(1, d, 1.0);
    lw.ln2_beta = constant_tensor(1, d, 0.0);
    m.layers_.push_back(std::move(lw));
  }
  m.cls_w_ = normal_tensor(d, config.classes, w_in, rng);
  m.cls_b_ = constant_tensor(1, config.classes, 0.0);
  return m;
}

Tensor quantize_site(const Tensor& t, const QuantSite& s, const ForwardContext& ctx) {
  if (ctx.trace != nullptr && s.role == SiteRole::Input) ctx.trace->inputs[s.name()] = t;
  if (ctx.policy == nullptr) return t;
  const QuantGroup* g = ctx.policy->lookup(s);
  if (g == nullptr) return t;
  return fake_quantize(t, g->state.scale, g->spec.lv);
}

Tensor Transformer::mhsa(int layer, const Tensor& x, const ForwardContext& ctx) const {
  const LayerWeights& lw = layers_.at(static_cast<std::size_t>(layer));
  const Index n = config_.seq_len;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(config_.head_dim()));
  // Softmax outputs pass through a site only when the policy quantizes them,
  // or for tracing a full-precision pass.
  const bool probs_sites =
      ctx.policy != nullptr
          ? ctx.policy->group_for(site(layer, BlockKind::AttnProbs, 0, SiteRole::Input)) != nullptr
          : ctx.trace != nullptr;
  Tensor out;
  for (int h = 0; h < config_.heads; ++h) {
    const HeadWeights& hw = lw.heads[static_cast<std::size_t>(h)];
    auto project = [&](BlockKind kind, const Tensor& w) {
      Tensor xin = quantize_site(x, site(layer, kind, h, SiteRole::Input), ctx);
      Tensor wq = quantize_site(w, site(layer, kind, h, SiteRole::Weight), ctx);
      return matmul(xin, wq);
    };
    Tensor q = project(BlockKind::AttnQuery, hw.query);
    Tensor k = project(BlockKind::AttnKey, hw.key);
    Tensor v = project(BlockKind::AttnValue, hw.value);
    Tensor probs = softmax_rows(scale(block_matmul_nt(q, k, n), inv_sqrt_dk));
    if (probs_sites) probs = quantize_site(probs, site(layer, BlockKind::AttnProbs, h, SiteRole::Input), ctx);
    Tensor head = block_matmul(probs, v, n);
    if (ctx.trace != nullptr) ctx.trace->layer_groups.at(static_cast<std::size_t>(layer)).push_back(head.value());
    Tensor hin = quantize_site(head, site(layer, BlockKind::AttnProj, h, SiteRole::Input), ctx);
    Tensor pw = quantize_site(hw.proj, site(layer, BlockKind::AttnProj, h, SiteRole::Weight), ctx);
    Tensor part = matmul(hin, pw);
    out = h == 0 ? part : add(out, part);
  }
  return out;
}

Tensor Transformer::block(int layer, const Tensor& x, const ForwardContext& ctx) const {
  const LayerWeights& lw = layers_.at(static_cast<std::size_t>(layer));
  if (ctx.trace != nullptr) {
    if (ctx.trace->layer_groups.size() < layers_.size()) ctx.trace->layer_groups.resize(layers_.size());
    ctx.trace->layer_groups[static_cast<std::size_t>(layer)].push_back(x.value());
  }
  Tensor x1 = layer_norm(add(x, mhsa(layer, x, ctx)), lw.ln1_gamma, lw.ln1_beta, config_.ln_eps);

  Tensor in1 = quantize_site(x1, site(layer, BlockKind::FfnFc1, std::nullopt, SiteRole::Input), ctx);
  Tensor w1 = quantize_site(lw.fc1, site(layer, BlockKind::FfnFc1, std::nullopt, SiteRole::Weight), ctx);
  Tensor hidden = gelu(add_row(matmul(in1, w1), lw.fc1_bias));
  Tensor in2 = quantize_site(hidden, site(layer, BlockKind::FfnFc2, std::nullopt, SiteRole::Input), ctx);
  Tensor w2 = quantize_site(lw.fc2, site(layer, BlockKind::FfnFc2, std::nullopt, SiteRole::Weight), ctx);
  Tensor ffn = add_row(matmul(in2, w2), lw.fc2_bias);
  if (ctx.trace != nullptr) {
    auto& groups = ctx.trace->layer_groups[static_cast<std::size_t>(layer)];
    groups.push_back(x1.value());
    groups.push_back(hidden.value());
  }
  return layer_norm(add(x1, ffn), lw.ln2_gamma, lw.ln2_beta, config_.ln_eps);
}

Tensor Transformer::forward(std::span<const int> tokens, Index batch, const ForwardContext& ctx) const {
  const Index n = config_.seq_len;
  if (batch <= 0 || static_cast<Index>(tokens.size()) != batch * n) {
    throw ValidationError("forward: expected " + std::to_string(batch) + " sequences of " +
                          std::to_string(n) + " tokens, got " + std::to_string(tokens.size()) + " ids");
  }
  if (ctx.trace != nullptr) {
    ctx.trace->inputs.clear();
    ctx.trace->layer_groups.assign(layers_.size(), {});
  }
  Tensor table = quantize_site(token_embed_, site(-1, BlockKind::Embed, std::nullopt, SiteRole::Weight), ctx);
  Tensor x = add_blocks(embedding(table, tokens), pos_embed_);
  for (int l = 0; l < config_.layers; ++l) x = block(l, x, ctx);
  Tensor pooled = mean_pool_blocks(x, n);
  Tensor cin = quantize_site(pooled, site(-1, BlockKind::Classifier, std::nullopt, SiteRole::Input), ctx);
  Tensor cw = quantize_site(cls_w_, site(-1, BlockKind::Classifier, std::nullopt, SiteRole::Weight), ctx);
  return add_row(matmul(cin, cw), cls_b_);
}

std::vector<NamedParameter> Transformer::parameters() const {
  std::vector<NamedParameter> out;
  out.push_back({"embed.token", token_embed_, true});
  out.push_back({"embed.position", pos_embed_, true});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const LayerWeights& lw = layers_[l];
    for (std::size_t h = 0; h < lw.heads.size(); ++h) {
      const std::string hp = p + "attn.head" + std::to_string(h) + ".";
      out.push_back({hp + "query", lw.heads[h].query, true});
      out.push_back({hp + "key", lw.heads[h].key, true});
      out.push_back({hp + "value", lw.heads[h].value, true});
      out.push_back({hp + "proj", lw.heads[h].proj, true});
    }
    out.push_back({p + "ln1.gamma", lw.ln1_gamma, false});
    out.push_back({p + "ln1.beta", lw.ln1_beta, false});
    out.push_back({p + "ffn.fc1.weight", lw.fc1, true});
    out.push_back({p + "ffn.fc1.bias", lw.fc1_bias, false});
    out.push_back({p + "ffn.fc2.weight", lw.fc2, true});
    out.push_back({p + "ffn.fc2.bias", lw.fc2_bias, false});
    out.push_back({p + "ln2.gamma", lw.ln2_gamma, false});
    out.push_back({p + "ln2.beta", lw.ln2_beta, false});
  }
  out.push_back({"classifier.weight", cls_w_, true});
  out.push_back({"classifier.bias", cls_b_, false});
  return out;
}

Tensor Transformer::weight_for(const QuantSite& s) const {
  if (s.role != SiteRole::Weight) throw PolicyError("weight_for: " + s.name() + " is not a weight site");
  const ModulePath& p = s.path;
  switch (p.kind) {
    case BlockKind::Embed: return token_embed_;
    case BlockKind::Classifier: return cls_w_;
    case BlockKind::FfnFc1: return layers_.at(static_cast<std::size_t>(p.layer)).fc1;
    case BlockKind::FfnFc2: return layers_.at(static_cast<std::size_t>(p.layer)).fc2;
    case BlockKind::AttnQuery:
    case BlockKind::AttnKey:
    case BlockKind::AttnValue:
    case BlockKind::AttnProj: {
      const HeadWeights& hw =
          layers_.at(static_cast<std::size_t>(p.layer)).heads.at(static_cast<std::size_t>(p.head.value()));
      if (p.kind == BlockKind::AttnQuery) return hw.query;
      if (p.kind == BlockKind::AttnKey) return hw.key;
      if (p.kind == BlockKind::AttnValue) return hw.value;
      return hw.proj;
    }
    case BlockKind::AttnProbs: break;
  }
  throw PolicyError("weight_for: " + s.name() + " has no weight");
}

std::vector<Tensor> Transformer::group_weights(const QuantGroup& group) const {
  std::vector<Tensor> out;
  if (group.role != SiteRole::Weight) return out;
  for (const auto& s : group.sites) out.push_back(weight_for(s));
  return out;
}

Transformer Transformer::clone() const {
  Transformer m = *this;
  auto deep = [](Tensor& t) { t = Tensor(t.value(), t.requires_grad()); };
  deep(m.token_embed_);
  deep(m.pos_embed_);
  for (auto& lw : m.layers_) {
    for (auto& hw : lw.heads) {
      deep(hw.query);
      deep(hw.key);
      deep(hw.value);
      deep(hw.proj);
    }
    for (Tensor* t : {&lw.ln1_gamma, &lw.ln1_beta, &lw.fc1, &lw.fc1_bias, &lw.fc2, &lw.fc2_bias,
                      &lw.ln2_gamma, &lw.ln2_beta}) {
      deep(*t);
    }
  }
  deep(m.cls_w_);
  deep(m.cls_b_);
  return m;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream bin(path + ".bin", std::ios::binary);
  if (!bin) throw RuntimeAbort("cannot open " + path + ".bin for writing");
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    const auto bytes = static_cast<std::streamsize>(e.value.size() * sizeof(double));
    bin.write(reinterpret_cast<const char*>(e.value.data()), bytes);
    index.push_back({{"name", e.name}, {"shape", {e.value.rows(), e.value.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(bytes);
  }
  if (!bin) throw RuntimeAbort("write failed for " + path + ".bin");
  std::ofstream js(path + ".json");
  js << nlohmann::json{{"format", "vaqat-checkpoint-v1"}, {"dtype", "float64-le"}, {"tensors", index}}.dump(2)
     << '\n';
  if (!js) throw RuntimeAbort("write failed for " + path + ".json");
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream js(path + ".json");
  if (!js) throw ValidationError("cannot open checkpoint index " + path + ".json");
  nlohmann::json index;
  try {
    js >> index;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad checkpoint index " + path + ".json: " + e.what());
  }
  std::ifstream bin(path + ".bin", std::ios::binary);
  if (!bin) throw ValidationError("cannot open checkpoint data " + path + ".bin");
  std::vector<CheckpointEntry> out;
  for (const auto& t : index.at("tensors")) {
    CheckpointEntry e;
    e.name = t.at("name").get<std::string>();
    const auto rows = t.at("shape").at(0).get<Index>();
    const auto cols = t.at("shape").at(1).get<Index>();
    e.value.resize(rows, cols);
    bin.seekg(static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
    bin.read(reinterpret_cast<char*>(e.value.data()), static_cast<std::streamsize>(e.value.size() * sizeof(double)));
    if (!bin) throw ValidationError("checkpoint data truncated at tensor " + e.name);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<CheckpointEntry> model_checkpoint(const Transformer& model, const QuantPolicy* policy) {
  std::vector<CheckpointEntry> out;
  for (const auto& p : model.parameters()) out.push_back({p.name, p.tensor.value()});
  if (policy != nullptr) {
    for (const auto& g : policy->groups()) out.push_back({"quant." + g.name + ".scale", g.state.scale.value()});
  }
  return out;
}

void restore_checkpoint(const std::vector<CheckpointEntry>& entries, Transformer& model, QuantPolicy* policy) {
  std::map<std::string, const Matrix*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e.value;
  auto copy_into = [&](const std::string& name, Tensor t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ValidationError("checkpoint is missing tensor " + name);
    if (it->second->rows() != t.rows() || it->second->cols() != t.cols()) {
      throw ValidationError("checkpoint tensor " + name + " has the wrong shape");
    }
    t.mutable_value() = *it->second;
  };
  for (const auto& p : model.parameters()) copy_into(p.name, p.tensor);
  if (policy != nullptr) {
    for (const auto& g : policy->groups()) copy_into("quant." + g.name + ".scale", g.state.scale);
  }
}

}  // namespace vaqat
