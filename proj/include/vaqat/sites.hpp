#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace vaqat {

enum class BlockKind {
  AttnQuery,
  AttnKey,
  AttnValue,
  AttnProj,
  AttnProbs,  // softmax output; only a site when attention-prob quantization is on
  FfnFc1,
  FfnFc2,
  Embed,
  Classifier,
};

std::string_view to_string(BlockKind kind);
bool is_attention(BlockKind kind);

/// Names one module of the transformer: a layer, a block kind and, for
/// attention blocks, a head.
struct ModulePath {
  int layer = -1;  // -1 for embed / classifier
  BlockKind kind = BlockKind::Embed;
  std::optional<int> head;

  std::string str() const;
  friend bool operator==(const ModulePath&, const ModulePath&) = default;
};

enum class SiteRole { Weight, Input };

/// A tensor that may be fake-quantized: a module's weight, or the
/// activation entering it.
struct QuantSite {
  ModulePath path;
  SiteRole role = SiteRole::Weight;

  /// Canonical name, e.g. "layers.0.attn.q.head1.weight".
  std::string name() const;
  friend bool operator==(const QuantSite&, const QuantSite&) = default;
};

/// Site selectors used by bitwidth plans and sensitivity grids.
///
///   all, weights, activations, mhsa, ffn, query, key, value, proj, probs,
///   embed, classifier, layer<L>, layer<L>.head<H>, an exact site name, or a
///   name prefix ending in '*'. Several selectors joined with '+' match the
///   union.
bool selector_matches(std::string_view selector, const QuantSite& site);
/// Throws ValidationError for a selector that cannot match anything.
void validate_selector(std::string_view selector);

}  // namespace vaqat
