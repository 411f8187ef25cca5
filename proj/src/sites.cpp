#include "vaqat/sites.hpp"

#include "vaqat/errors.hpp"

#include <charconv>

namespace vaqat {

std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::AttnQuery: return "attn.q";
    case BlockKind::AttnKey: return "attn.k";
    case BlockKind::AttnValue: return "attn.v";
    case BlockKind::AttnProj: return "attn.proj";
    case BlockKind::AttnProbs: return "attn.probs";
    case BlockKind::FfnFc1: return "ffn.fc1";
    case BlockKind::FfnFc2: return "ffn.fc2";
    case BlockKind::Embed: return "embed";
    case BlockKind::Classifier: return "classifier";
  }
  return "?";
}

bool is_attention(BlockKind kind) {
  switch (kind) {
    case BlockKind::AttnQuery:
    case BlockKind::AttnKey:
    case BlockKind::AttnValue:
    case BlockKind::AttnProj:
    case BlockKind::AttnProbs:
      return true;
    default:
      return false;
  }
}

std::string ModulePath::str() const {
  std::string out;
  if (layer >= 0) out = "layers." + std::to_string(layer) + ".";
  out += to_string(kind);
  if (head) out += ".head" + std::to_string(*head);
  return out;
}

std::string QuantSite::name() const {
  return path.str() + (role == SiteRole::Weight ? ".weight" : ".input");
}

namespace {

bool parse_int(std::string_view s, int& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

// -1: not a keyword. 0/1: keyword result.
int match_keyword(std::string_view sel, const QuantSite& site) {
  const BlockKind k = site.path.kind;
  if (sel == "all") return 1;
  if (sel == "weights") return site.role == SiteRole::Weight;
  if (sel == "activations") return site.role == SiteRole::Input;
  if (sel == "mhsa" || sel == "attn") return is_attention(k);
  if (sel == "ffn") return k == BlockKind::FfnFc1 || k == BlockKind::FfnFc2;
  if (sel == "query") return k == BlockKind::AttnQuery;
  if (sel == "key") return k == BlockKind::AttnKey;
  if (sel == "value") return k == BlockKind::AttnValue;
  if (sel == "proj") return k == BlockKind::AttnProj;
  if (sel == "probs") return k == BlockKind::AttnProbs;
  if (sel == "embed") return k == BlockKind::Embed;
  if (sel == "classifier") return k == BlockKind::Classifier;
  if (sel.starts_with("layer") && !sel.starts_with("layers.")) {
    std::string_view rest = sel.substr(5);
    const auto dot = rest.find('.');
    int layer = 0;
    if (!parse_int(rest.substr(0, dot), layer)) return -1;
    if (dot == std::string_view::npos) return site.path.layer == layer;
    std::string_view head_part = rest.substr(dot + 1);
    int head = 0;
    if (!head_part.starts_with("head") || !parse_int(head_part.substr(4), head)) return -1;
    return site.path.layer == layer && site.path.head && *site.path.head == head;
  }
  return -1;
}

bool match_single(std::string_view sel, const QuantSite& site) {
  const int kw = match_keyword(sel, site);
  if (kw >= 0) return kw == 1;
  const std::string name = site.name();
  if (!sel.empty() && sel.back() == '*') {
    return std::string_view(name).starts_with(sel.substr(0, sel.size() - 1));
  }
  return name == sel;
}

template <typename Fn>
void for_each_part(std::string_view selector, Fn&& fn) {
  std::size_t start = 0;
  while (true) {
    const auto plus = selector.find('+', start);
    fn(selector.substr(start, plus == std::string_view::npos ? std::string_view::npos : plus - start));
    if (plus == std::string_view::npos) break;
    start = plus + 1;
  }
}

}  // namespace

bool selector_matches(std::string_view selector, const QuantSite& site) {
  bool hit = false;
  for_each_part(selector, [&](std::string_view part) { hit = hit || match_single(part, site); });
  return hit;
}

void validate_selector(std::string_view selector) {
  const QuantSite probe{};
  for_each_part(selector, [&](std::string_view part) {
    if (part.empty()) throw ValidationError("empty site selector component");
    if (match_keyword(part, probe) >= 0) return;
    if (part.back() == '*') return;
    if (part.starts_with("layers.") || part.starts_with("embed.") || part.starts_with("classifier.")) {
      return;
    }
    throw ValidationError("unrecognized site selector '" + std::string(part) + "'");
  });
}

}  // namespace vaqat
