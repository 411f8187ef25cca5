#pragma once

#include "vaqat/quantizer.hpp"
#include "vaqat/rng.hpp"
#include "vaqat/sites.hpp"
#include "vaqat/tensor.hpp"

#include <json.hpp>

#include <map>
#include <span>
#include <string>
#include <vector>

namespace vaqat {

struct TransformerConfig {
  int layers = 2;
  int heads = 2;
  int dim = 32;
  int ffn_ratio = 2;
  int vocab = 128;
  int classes = 4;
  int seq_len = 32;
  double ln_eps = 1e-5;

  int head_dim() const { return dim / heads; }
  int ffn_dim() const { return dim * ffn_ratio; }
  /// Throws ValidationError on non-positive sizes or dim % heads != 0.
  void validate() const;
  friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

/// Every weight and input-activation site, in a fixed order: embedding,
/// then per layer the per-head attention sites followed by the FFN, then the
/// classifier. Softmax outputs are sites only when `attention_probs` is set.
std::vector<QuantSite> enumerate_quant_sites(const TransformerConfig& config,
                                             bool attention_probs = false);

struct HeadWeights {
  Tensor query;  // d x d_k
  Tensor key;    // d x d_k
  Tensor value;  // d x d_k
  Tensor proj;   // d_k x d, this head's rows of the output projection
};

struct LayerWeights {
  std::vector<HeadWeights> heads;
  Tensor ln1_gamma, ln1_beta;
  Tensor fc1, fc1_bias;  // d x f, 1 x f
  Tensor fc2, fc2_bias;  // f x d, 1 x d
  Tensor ln2_gamma, ln2_beta;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
  bool decay = false;  // weight decay applies
};

/// Activation tensors seen at the input sites during one forward pass.
struct ActivationTrace {
  std::map<std::string, Tensor> inputs;  // keyed by site name
  // Distinct activation tensors per layer, for the SDAM statistic.
  std::vector<std::vector<Matrix>> layer_groups;
};

/// Quantization and tracing switches for one forward pass.
struct ForwardContext {
  const QuantPolicy* policy = nullptr;  // nullptr: full precision
  ActivationTrace* trace = nullptr;
};

class Transformer {
 public:
  Transformer() = default;
  static Transformer init(const TransformerConfig& config, Rng& rng);

  const TransformerConfig& config() const { return config_; }

  /// Logits, one row per sequence. `tokens` holds `batch` sequences of
  /// config().seq_len ids each.
  Tensor forward(std::span<const int> tokens, Index batch, const ForwardContext& ctx = {}) const;

  /// One transformer block on a (B*n) x d activation, B = rows / seq_len.
  Tensor block(int layer, const Tensor& x, const ForwardContext& ctx) const;
  Tensor mhsa(int layer, const Tensor& x, const ForwardContext& ctx) const;

  std::vector<NamedParameter> parameters() const;
  /// The weight tensor that a weight site quantizes.
  Tensor weight_for(const QuantSite& site) const;
  /// Weight tensors of every site in the group (empty for activation groups).
  std::vector<Tensor> group_weights(const QuantGroup& group) const;

  /// Deep copy with independent storage.
  Transformer clone() const;

  Tensor& token_embedding() { return token_embed_; }
  Tensor& position_embedding() { return pos_embed_; }
  LayerWeights& layer(int l) { return layers_[static_cast<std::size_t>(l)]; }
  Tensor& classifier() { return cls_w_; }
  Tensor& classifier_bias() { return cls_b_; }

 private:
  TransformerConfig config_;
  Tensor token_embed_;  // V x d
  Tensor pos_embed_;    // n x d
  std::vector<LayerWeights> layers_;
  Tensor cls_w_;  // d x c
  Tensor cls_b_;  // 1 x c
};

/// Fake-quantizes `t` if the policy quantizes `site`. Input sites are
/// recorded in the trace first. Throws PolicyError if the policy does not
/// know the site at all.
Tensor quantize_site(const Tensor& t, const QuantSite& site, const ForwardContext& ctx);

// --- checkpoints --------------------------------------------------------------
// <path>.bin holds raw little-endian doubles back to back; <path>.json lists
// {name, shape, offset} with offset in bytes.

struct CheckpointEntry {
  std::string name;
  Matrix value;
};

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

std::vector<CheckpointEntry> model_checkpoint(const Transformer& model, const QuantPolicy* policy = nullptr);
/// Copies matching tensors by name into the model (and policy scales);
/// throws ValidationError on a missing tensor or shape mismatch.
void restore_checkpoint(const std::vector<CheckpointEntry>& entries, Transformer& model,
                        QuantPolicy* policy = nullptr);

}  // namespace vaqat
