#include "vaqat/diagnostics.hpp"

#include "vaqat/errors.hpp"

#include <cmath>
#include <fstream>
#include <future>
#include <iomanip>
#include <sstream>

namespace vaqat {

OscillationState::OscillationState(const Eigen::ArrayXd& initial_int, double momentum)
    : f_(Eigen::ArrayXd::Zero(initial_int.size())),
      prev_int_(initial_int),
      prev_dir_(Eigen::ArrayXi::Zero(initial_int.size())),
      momentum_(momentum) {
  if (!(momentum > 0.0 && momentum < 1.0)) throw ValidationError("oscillation momentum must be in (0, 1)");
}

void OscillationState::update(const Eigen::ArrayXd& x_int) {
  if (x_int.size() != f_.size()) {
    throw DimensionError("oscillation update: " + std::to_string(x_int.size()) + " values for state of " +
                         std::to_string(f_.size()));
  }
  const double m = momentum_;
  for (Index i = 0; i < x_int.size(); ++i) {
    double o = 0.0;
    if (x_int(i) != prev_int_(i)) {
      const int dir = x_int(i) > prev_int_(i) ? 1 : -1;
      if (prev_dir_(i) != 0 && dir != prev_dir_(i)) o = 1.0;
      prev_int_(i) = x_int(i);
      prev_dir_(i) = dir;
    }
    f_(i) = m * o + (1.0 - m) * f_(i);
  }
}

double oscillating_fraction(const OscillationState& state, double threshold) {
  if (state.size() == 0) return 0.0;
  const auto hits = (state.frequency() > threshold).count();
  return 100.0 * static_cast<double>(hits) / static_cast<double>(state.size());
}

// ---------------------------------------------------------------------------

double sdam(const std::vector<std::vector<Matrix>>& layer_groups) {
  double total = 0.0;
  int used = 0;
  for (const auto& groups : layer_groups) {
    if (groups.size() < 2) continue;
    Eigen::ArrayXd means(static_cast<Index>(groups.size()));
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (groups[g].size() == 0) throw ValidationError("sdam: empty activation group");
      means(static_cast<Index>(g)) = groups[g].cwiseAbs().mean();
    }
    const double mu = means.mean();
    total += std::sqrt((means - mu).square().mean());
    ++used;
  }
  if (used == 0) throw ValidationError("sdam: no layer has two or more activation groups");
  return total / used;
}

long BinHistogram::total() const {
  long t = below + above;
  for (const auto& b : bins) t += b.count;
  return t;
}

BinHistogram bin_histogram(const Matrix& w, double s, Levels lv) {
  if (!(s > 0.0)) throw ValidationError("bin_histogram: scale must be positive");
  BinHistogram h;
  const int nbins = lv.q_n + lv.q_p + 1;
  h.bins.resize(static_cast<std::size_t>(nbins));
  std::vector<double> sum_off(h.bins.size(), 0.0);
  std::vector<double> sum_w(h.bins.size(), 0.0);
  std::vector<double> sum_w2(h.bins.size(), 0.0);
  for (int b = 0; b < nbins; ++b) h.bins[static_cast<std::size_t>(b)].level = b - lv.q_n;
  for (Index i = 0; i < w.size(); ++i) {
    const double r = w.data()[i] / s;
    const double level = detail::round_half_even(r);
    if (level < -lv.q_n) {
      ++h.below;
    } else if (level > lv.q_p) {
      ++h.above;
    } else {
      const auto b = static_cast<std::size_t>(static_cast<int>(level) + lv.q_n);
      ++h.bins[b].count;
      sum_off[b] += r - level;
      sum_w[b] += w.data()[i];
    }
  }
  for (Index i = 0; i < w.size(); ++i) {
    const double r = w.data()[i] / s;
    const double level = detail::round_half_even(r);
    if (level < -lv.q_n || level > lv.q_p) continue;
    const auto b = static_cast<std::size_t>(static_cast<int>(level) + lv.q_n);
    const double dev = w.data()[i] - sum_w[b] / static_cast<double>(h.bins[b].count);
    sum_w2[b] += dev * dev;
  }
  for (std::size_t b = 0; b < h.bins.size(); ++b) {
    if (h.bins[b].count == 0) continue;
    const auto n = static_cast<double>(h.bins[b].count);
    h.bins[b].mean_offset = sum_off[b] / n;
    h.bins[b].variance = sum_w2[b] / n;
  }
  return h;
}

double mean_bin_variance(std::span<const ObrGroup> groups, int min_population) {
  double total = 0.0;
  long bins_used = 0;
  for (const auto& g : groups) {
    const int nbins = g.lv.q_n + g.lv.q_p + 1;
    std::vector<std::vector<double>> members(static_cast<std::size_t>(nbins));
    for (const auto& t : g.real) {
      for (Index i = 0; i < t.size(); ++i) {
        const double w = t.value().data()[i];
        members[static_cast<std::size_t>(static_cast<int>(quantize_to_int(w, g.scale, g.lv)) + g.lv.q_n)].push_back(w);
      }
    }
    for (const auto& m : members) {
      if (static_cast<int>(m.size()) < min_population || m.empty()) continue;
      Eigen::Map<const Eigen::ArrayXd> a(m.data(), static_cast<Index>(m.size()));
      total += (a - a.mean()).square().mean();
      ++bins_used;
    }
  }
  return bins_used == 0 ? 0.0 : total / static_cast<double>(bins_used);
}

// ---------------------------------------------------------------------------

std::string_view to_string(GridMode m) {
  switch (m) {
    case GridMode::LeaveOneOut: return "leave-one-out";
    case GridMode::OnlyOne: return "only-one";
    case GridMode::PerHead: return "per-head";
  }
  return "?";
}

GridMode grid_mode_from_string(std::string_view s) {
  if (s == "leave-one-out") return GridMode::LeaveOneOut;
  if (s == "only-one") return GridMode::OnlyOne;
  if (s == "per-head") return GridMode::PerHead;
  throw ValidationError("unknown sensitivity mode '" + std::string(s) + "'");
}

std::vector<GridRun> plan_sensitivity_grid(const SensitivityGridSpec& spec, const BitPlan& base,
                                           const std::vector<QuantSite>& universe, int layers, int heads) {
  levels(spec.low_bits, true);
  if (spec.mode == GridMode::PerHead) levels(spec.high_bits, true);

  std::vector<std::string> targets = spec.targets;
  if (spec.mode == GridMode::PerHead && targets.empty()) {
    for (int l = 0; l < layers; ++l) {
      for (int h = 0; h < heads; ++h) targets.push_back("layer" + std::to_string(l) + ".head" + std::to_string(h));
    }
  }
  for (const auto& t : targets) {
    validate_selector(t);
    bool hit = false;
    for (const auto& s : universe) hit = hit || selector_matches(t, s);
    if (!hit) throw ValidationError("sensitivity target '" + t + "' matches no quantization site");
  }

  auto plan_with = [&](int global, std::vector<std::pair<std::string, int>> ov) {
    BitPlan p = base;
    p.global_bits = global;
    p.overrides = std::move(ov);
    return p;
  };
  std::vector<GridRun> runs;
  runs.push_back({"FP", plan_with(0, {})});
  runs.push_back({"All", plan_with(spec.low_bits, {})});
  for (const auto& t : targets) {
    switch (spec.mode) {
      case GridMode::LeaveOneOut:
        runs.push_back({t, plan_with(spec.low_bits, {{t, 0}})});
        break;
      case GridMode::OnlyOne:
        runs.push_back({t, plan_with(0, {{t, spec.low_bits}})});
        break;
      case GridMode::PerHead:
        runs.push_back({t, plan_with(spec.high_bits, {{t, spec.low_bits}})});
        break;
    }
  }
  return runs;
}

std::vector<GridRow> run_sensitivity_grid(const SensitivityGridSpec& spec, const std::vector<GridRun>& runs,
                                          const GridRunner& runner, int jobs) {
  std::vector<GridRow> rows(runs.size());
  auto execute = [&](std::size_t i) {
    GridRow row;
    row.mode = std::string(to_string(spec.mode));
    row.target = runs[i].target;
    row.bitwidth = runs[i].target == "FP" ? "fp" : std::to_string(spec.low_bits);
    try {
      const RunScores s = runner(runs[i]);
      row.top1 = s.top1;
      row.topk = s.topk;
      row.status = "ok";
    } catch (const std::exception& e) {
      row.status = std::string("error: ") + e.what();
    }
    return row;
  };
  const std::size_t width = static_cast<std::size_t>(std::max(1, jobs));
  for (std::size_t start = 0; start < runs.size(); start += width) {
    const std::size_t end = std::min(runs.size(), start + width);
    if (width == 1) {
      rows[start] = execute(start);
      continue;
    }
    std::vector<std::future<GridRow>> pending;
    for (std::size_t i = start; i < end; ++i) pending.push_back(std::async(std::launch::async, execute, i));
    for (std::size_t i = start; i < end; ++i) rows[i] = pending[i - start].get();
  }
  return rows;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void write_grid_csv(const std::string& path, const std::vector<GridRow>& rows) {
  std::ofstream os(path);
  if (!os) throw RuntimeAbort("cannot open " + path + " for writing");
  os << "mode,target,bitwidth,top1,topk,status\n";
  for (const auto& r : rows) {
    std::ostringstream line;
    line << std::setprecision(10) << csv_field(r.mode) << ',' << csv_field(r.target) << ',' << r.bitwidth << ','
         << r.top1 << ',' << r.topk << ',' << csv_field(r.status) << '\n';
    os << line.str();
  }
}

}  // namespace vaqat
