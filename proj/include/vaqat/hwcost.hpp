#pragma once

#include <json.hpp>

#include <array>
#include <string>
#include <vector>

namespace vaqat::hw {

struct MacCost {
  double area = 0.0;   // um^2
  double power = 0.0;  // mW
  friend bool operator==(const MacCost&, const MacCost&) = default;
};

/// Synthesized MAC area/power for every unordered operand-bitwidth pair in
/// [2, 8] (28 pairs). Immutable once built.
class MacCostTable {
 public:
  /// The 28 reference values compiled into the library.
  static MacCostTable builtin();
  /// Loads `{"entries": [{"a":..,"b":..,"area":..,"power":..}, ...]}` and
  /// checks every entry against the built-in values. Throws ValidationError
  /// on a missing pair, a duplicate, or any disagreement.
  static MacCostTable from_json(const nlohmann::json& j);
  static MacCostTable load(const std::string& path);

  /// Order-insensitive. Throws UnsupportedBitwidthError outside [2, 8].
  MacCost lookup(int a, int b) const;
  nlohmann::json to_json() const;

 private:
  static constexpr int kMin = 2;
  static constexpr int kSpan = 7;
  std::array<MacCost, kSpan * kSpan> cells_{};
  void validate() const;
};

struct AssignmentRow {
  std::string module;
  int weight_bits = 8;
  int act_bits = 8;
  long long mac_count = 1;
};

struct BitwidthAssignment {
  std::vector<AssignmentRow> rows;
  static BitwidthAssignment from_json(const nlohmann::json& j);
  static BitwidthAssignment load(const std::string& path);
};

/// Area is the largest MAC area among the bitwidth pairs in the plan; power
/// is the MAC-count weighted mean of the per-pair powers.
MacCost aggregate(const BitwidthAssignment& assignment, const MacCostTable& table);

}  // namespace vaqat::hw
