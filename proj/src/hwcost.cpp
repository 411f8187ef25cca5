#include "vaqat/hwcost.hpp"

#include "vaqat/errors.hpp"

#include <algorithm>
#include <fstream>
#include <map>

namespace vaqat::hw {
namespace {

struct Golden {
  int a, b;
  double area, power;
};

// 40nm synthesis results, INTa x INTb.
constexpr Golden kGolden[] = {
    {2, 2, 539.960, 0.86949}, {2, 3, 551.074, 0.95939}, {2, 4, 562.363, 1.13939},
    {2, 5, 571.360, 1.30085}, {2, 6, 581.062, 1.41680}, {2, 7, 597.996, 1.59534},
    {2, 8, 605.405, 1.75574}, {3, 3, 571.183, 1.30043}, {3, 4, 589.882, 1.42975},
    {3, 5, 602.053, 1.57912}, {3, 6, 621.634, 1.69105}, {3, 7, 638.744, 1.86085},
    {3, 8, 656.737, 1.99110}, {4, 4, 608.404, 1.58901}, {4, 5, 635.569, 1.70870},
    {4, 6, 660.089, 1.85997}, {4, 7, 677.200, 1.94706}, {4, 8, 702.072, 2.08973},
    {5, 5, 664.499, 1.86345}, {5, 6, 695.545, 2.00091}, {5, 7, 718.301, 2.14442},
    {5, 8, 749.347, 2.24832}, {6, 6, 723.593, 2.12107}, {6, 7, 770.515, 2.22367},
    {6, 8, 805.090, 2.41882}, {7, 7, 817.967, 2.43294}, {7, 8, 864.889, 2.52819},
    {8, 8, 893.642, 2.67960},
};
static_assert(std::size(kGolden) == 28);

void check_bits(int b) {
  if (b < 2 || b > 8) {
    throw UnsupportedBitwidthError("MAC bitwidth " + std::to_string(b) + " outside [2, 8]");
  }
}

}  // namespace

MacCostTable MacCostTable::builtin() {
  MacCostTable t;
  for (const auto& g : kGolden) {
    t.cells_[static_cast<std::size_t>((g.a - kMin) * kSpan + (g.b - kMin))] = {g.area, g.power};
    t.cells_[static_cast<std::size_t>((g.b - kMin) * kSpan + (g.a - kMin))] = {g.area, g.power};
  }
  t.validate();
  return t;
}

void MacCostTable::validate() const {
  for (int a = 2; a <= 8; ++a) {
    for (int b = 2; b <= 8; ++b) {
      const MacCost c = lookup(a, b);
      if (!(c.area > 0.0 && c.power > 0.0)) throw ValidationError("MAC table has a non-positive entry");
      if (a < 8 && lookup(a + 1, b).area < c.area) {
        throw ValidationError("MAC table area decreases with bitwidth at " + std::to_string(a) + "x" +
                              std::to_string(b));
      }
    }
  }
}

MacCostTable MacCostTable::from_json(const nlohmann::json& j) {
  MacCostTable t;
  std::array<bool, kSpan * kSpan> seen{};
  try {
    for (const auto& e : j.at("entries")) {
      const int a = e.at("a").get<int>();
      const int b = e.at("b").get<int>();
      check_bits(a);
      check_bits(b);
      const int lo = std::min(a, b);
      const int hi = std::max(a, b);
      const auto idx = static_cast<std::size_t>((lo - kMin) * kSpan + (hi - kMin));
      if (seen[idx]) throw ValidationError("MAC table lists " + std::to_string(lo) + "x" + std::to_string(hi) + " twice");
      seen[idx] = true;
      const MacCost c{e.at("area").get<double>(), e.at("power").get<double>()};
      t.cells_[idx] = c;
      t.cells_[static_cast<std::size_t>((hi - kMin) * kSpan + (lo - kMin))] = c;
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("malformed MAC table: ") + ex.what());
  }
  const MacCostTable golden = builtin();
  for (const auto& g : kGolden) {
    if (!seen[static_cast<std::size_t>((g.a - kMin) * kSpan + (g.b - kMin))]) {
      throw ValidationError("MAC table is missing " + std::to_string(g.a) + "x" + std::to_string(g.b));
    }
    if (t.lookup(g.a, g.b) != golden.lookup(g.a, g.b)) {
      throw ValidationError("MAC table entry " + std::to_string(g.a) + "x" + std::to_string(g.b) +
                            " disagrees with the reference values");
    }
  }
  t.validate();
  return t;
}

MacCostTable MacCostTable::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open MAC table " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError("bad MAC table " + path + ": " + ex.what());
  }
  return from_json(j);
}

MacCost MacCostTable::lookup(int a, int b) const {
  check_bits(a);
  check_bits(b);
  return cells_[static_cast<std::size_t>((a - kMin) * kSpan + (b - kMin))];
}

nlohmann::json MacCostTable::to_json() const {
  nlohmann::json entries = nlohmann::json::array();
  for (int a = 2; a <= 8; ++a) {
    for (int b = a; b <= 8; ++b) {
      const MacCost c = lookup(a, b);
      entries.push_back({{"a", a}, {"b", b}, {"area", c.area}, {"power", c.power}});
    }
  }
  return {{"unit_area", "um^2"}, {"unit_power", "mW"}, {"entries", entries}};
}

// ---------------------------------------------------------------------------

BitwidthAssignment BitwidthAssignment::from_json(const nlohmann::json& j) {
  BitwidthAssignment out;
  try {
    const auto& rows = j.is_array() ? j : j.at("modules");
    for (const auto& r : rows) {
      AssignmentRow row;
      row.module = r.value("module", std::string());
      row.weight_bits = r.at("weight_bits").get<int>();
      row.act_bits = r.at("act_bits").get<int>();
      row.mac_count = r.value("mac_count", 1LL);
      check_bits(row.weight_bits);
      check_bits(row.act_bits);
      if (row.mac_count < 0) throw ValidationError("mac_count must be >= 0 for module " + row.module);
      out.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("malformed bitwidth assignment: ") + ex.what());
  }
  return out;
}

BitwidthAssignment BitwidthAssignment::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open assignment " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError("bad assignment " + path + ": " + ex.what());
  }
  return from_json(j);
}

MacCost aggregate(const BitwidthAssignment& assignment, const MacCostTable& table) {
  if (assignment.rows.empty()) throw ValidationError("empty bitwidth assignment");
  // MAC counts summed per unordered pair first, so permuting rows or
  // splitting a module cannot change the result.
  std::map<std::pair<int, int>, long long> per_pair;
  long long macs = 0;
  for (const auto& r : assignment.rows) {
    table.lookup(r.weight_bits, r.act_bits);  // range check
    per_pair[std::minmax(r.weight_bits, r.act_bits)] += r.mac_count;
    macs += r.mac_count;
  }
  if (macs <= 0) throw ValidationError("bitwidth assignment has zero total MAC count");
  double area = 0.0;
  double power = 0.0;
  for (const auto& [pair, count] : per_pair) {
    const MacCost c = table.lookup(pair.first, pair.second);
    area = std::max(area, c.area);
    power += (static_cast<double>(count) / static_cast<double>(macs)) * c.power;
  }
  return {area, power};
}

}  // namespace vaqat::hw
