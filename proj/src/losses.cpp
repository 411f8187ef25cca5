#include "vaqat/losses.hpp"

#include "vaqat/errors.hpp"
#include "vaqat/ops.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

namespace vaqat {

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_probs) {
  return soft_cross_entropy(student_logits, teacher_probs);
}

// ---------------------------------------------------------------------------

void SoftLabelCache::add(SoftLabelEntry entry) {
  double total = 0.0;
  for (double p : entry.probs) {
    if (!(p >= 0.0)) throw ValidationError("soft label has a negative or NaN probability");
    total += p;
  }
  if (entry.probs.empty() || std::abs(total - 1.0) > 1e-6) {
    throw ValidationError("soft label for sample " + std::to_string(entry.sample_id) +
                          " does not sum to 1");
  }
  if (entry.length <= 0 || entry.offset < 0) throw ValidationError("soft label has an invalid crop window");
  const CropKey key{entry.sample_id, entry.crop_index};
  if (index_.contains(key)) {
    throw ValidationError("duplicate soft label for sample " + std::to_string(key.sample_id) +
                          " crop " + std::to_string(key.crop_index));
  }
  index_.emplace(key, entries_.size());
  entries_.push_back(std::move(entry));
}

const SoftLabelEntry& SoftLabelCache::get(CropKey key) const {
  auto it = index_.find(key);
  if (it == index_.end()) {
    throw CacheMissError("soft-label cache has no entry for sample " + std::to_string(key.sample_id) +
                         " crop " + std::to_string(key.crop_index));
  }
  return entries_[it->second];
}

void SoftLabelCache::save_jsonl(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw RuntimeAbort("cannot open " + path + " for writing");
  for (const auto& e : entries_) {
    // nlohmann::json prints doubles with round-trip precision (17 digits).
    nlohmann::json j{{"sample_id", e.sample_id},
                     {"crop_index", e.crop_index},
                     {"offset", e.offset},
                     {"length", e.length},
                     {"probs", e.probs}};
    os << j.dump() << '\n';
  }
  if (!os) throw RuntimeAbort("write failed for " + path);
}

SoftLabelCache SoftLabelCache::load_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open soft-label cache " + path);
  SoftLabelCache cache;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SoftLabelEntry e;
      e.sample_id = j.at("sample_id").get<int>();
      e.crop_index = j.at("crop_index").get<int>();
      e.offset = j.at("offset").get<int>();
      e.length = j.at("length").get<int>();
      e.probs = j.at("probs").get<std::vector<double>>();
      cache.add(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return cache;
}

Matrix cached_teacher_probs(const SoftLabelCache& cache, std::span<const CropKey> keys) {
  if (keys.empty()) throw DimensionError("mckd: empty batch");
  const auto classes = static_cast<Index>(cache.get(keys[0]).probs.size());
  Matrix out(static_cast<Index>(keys.size()), classes);
  for (std::size_t r = 0; r < keys.size(); ++r) {
    const auto& probs = cache.get(keys[r]).probs;
    if (static_cast<Index>(probs.size()) != classes) throw DimensionError("mckd: class count differs across entries");
    for (Index c = 0; c < classes; ++c) out(static_cast<Index>(r), c) = probs[static_cast<std::size_t>(c)];
  }
  return out;
}

Tensor mckd_loss(const Tensor& student_logits, std::span<const CropKey> keys, const SoftLabelCache& cache) {
  if (static_cast<Index>(keys.size()) != student_logits.rows()) {
    throw DimensionError("mckd: " + std::to_string(keys.size()) + " keys for " +
                         std::to_string(student_logits.rows()) + " logit rows");
  }
  return soft_cross_entropy(student_logits, Tensor(cached_teacher_probs(cache, keys)));
}

Tensor mckd_loss(const Tensor& student_logits, std::span<const int> sample_ids, int crops,
                 const SoftLabelCache& cache) {
  if (crops < 1) throw ValidationError("mckd: crop count must be >= 1");
  std::vector<CropKey> keys;
  keys.reserve(sample_ids.size() * static_cast<std::size_t>(crops));
  for (int id : sample_ids) {
    for (int m = 0; m < crops; ++m) keys.push_back({id, m});
  }
  return mckd_loss(student_logits, keys, cache);
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const ObrConfig& c) {
  j = nlohmann::json{{"lambda_end", c.lambda_end},
                     {"horizon", c.horizon},
                     {"min_bin_population", c.min_bin_population},
                     {"squared_norm", c.squared_norm}};
}

void from_json(const nlohmann::json& j, ObrConfig& c) {
  ObrConfig d;
  c.lambda_end = j.value("lambda_end", d.lambda_end);
  c.horizon = j.value("horizon", d.horizon);
  c.min_bin_population = j.value("min_bin_population", d.min_bin_population);
  c.squared_norm = j.value("squared_norm", d.squared_norm);
  if (c.lambda_end < 0.0) throw ValidationError("obr.lambda_end must be >= 0");
  if (c.horizon < 0) throw ValidationError("obr.horizon must be >= 0");
  if (c.min_bin_population < 1) throw ValidationError("obr.min_bin_population must be >= 1");
}

ObrGroup make_obr_group(std::vector<Tensor> weights, double scale, Levels lv) {
  ObrGroup g;
  g.scale = scale;
  g.lv = lv;
  for (const auto& w : weights) g.quantized.push_back(fake_quantize(w.value(), scale, lv));
  g.real = std::move(weights);
  return g;
}

namespace {

struct GroupEval {
  double value = 0.0;
  std::vector<Matrix> grads;
};

GroupEval evaluate_group(std::span<const Matrix> real, const ObrGroup& g, const ObrConfig& cfg) {
  GroupEval ev;
  // Residual term.
  double sq = 0.0;
  for (std::size_t t = 0; t < real.size(); ++t) sq += (real[t] - g.quantized[t]).squaredNorm();
  const double norm = std::sqrt(sq);
  ev.value = cfg.squared_norm ? sq : norm;
  for (std::size_t t = 0; t < real.size(); ++t) {
    Matrix diff = real[t] - g.quantized[t];
    if (cfg.squared_norm) {
      ev.grads.push_back(2.0 * diff);
    } else {
      ev.grads.push_back(norm > 0.0 ? Matrix(diff / norm) : Matrix(Matrix::Zero(diff.rows(), diff.cols())));
    }
  }

  // Per-bin variance term. Bins are the integer levels of the grid.
  const int nbins = g.lv.q_n + g.lv.q_p + 1;
  std::vector<double> count(static_cast<std::size_t>(nbins), 0.0);
  std::vector<double> total(static_cast<std::size_t>(nbins), 0.0);
  std::vector<std::vector<int>> bin_of(real.size());
  for (std::size_t t = 0; t < real.size(); ++t) {
    bin_of[t].resize(static_cast<std::size_t>(real[t].size()));
    for (Index i = 0; i < real[t].size(); ++i) {
      const double w = real[t].data()[i];
      const int b = static_cast<int>(quantize_to_int(w, g.scale, g.lv)) + g.lv.q_n;
      bin_of[t][static_cast<std::size_t>(i)] = b;
      count[static_cast<std::size_t>(b)] += 1.0;
      total[static_cast<std::size_t>(b)] += w;
    }
  }
  std::vector<double> mean(static_cast<std::size_t>(nbins), 0.0);
  for (int b = 0; b < nbins; ++b) {
    if (count[static_cast<std::size_t>(b)] > 0) mean[static_cast<std::size_t>(b)] = total[static_cast<std::size_t>(b)] / count[static_cast<std::size_t>(b)];
  }
  std::vector<double> var_sum(static_cast<std::size_t>(nbins), 0.0);
  for (std::size_t t = 0; t < real.size(); ++t) {
    for (Index i = 0; i < real[t].size(); ++i) {
      const auto b = static_cast<std::size_t>(bin_of[t][static_cast<std::size_t>(i)]);
      if (count[b] < cfg.min_bin_population) continue;
      const double dev = real[t].data()[i] - mean[b];
      var_sum[b] += dev * dev;
      ev.grads[t].data()[i] += 2.0 * dev / count[b];
    }
  }
  for (int b = 0; b < nbins; ++b) {
    const auto bb = static_cast<std::size_t>(b);
    if (count[bb] >= cfg.min_bin_population) ev.value += var_sum[bb] / count[bb];
  }
  return ev;
}

}  // namespace

Tensor obr_loss(std::span<const ObrGroup> groups, const ObrConfig& config) {
  std::vector<Tensor> inputs;
  std::vector<std::size_t> first;  // first input index of each group
  for (const auto& g : groups) {
    if (g.real.size() != g.quantized.size()) throw DimensionError("obr: real/quantized tensor counts differ");
    if (!(g.scale > 0.0)) throw ValidationError("obr: scale must be positive");
    first.push_back(inputs.size());
    for (std::size_t t = 0; t < g.real.size(); ++t) {
      if (g.real[t].rows() != g.quantized[t].rows() || g.real[t].cols() != g.quantized[t].cols()) {
        throw DimensionError("obr: quantized weights do not match real weights in shape");
      }
      inputs.push_back(g.real[t]);
    }
  }
  std::vector<ObrGroup> held(groups.begin(), groups.end());
  for (auto& g : held) g.real.clear();  // the op reads real values from its inputs
  auto run = [held, first, config](std::span<const Matrix> in) {
    double value = 0.0;
    std::vector<Matrix> grads;
    for (std::size_t k = 0; k < held.size(); ++k) {
      const std::size_t n = held[k].quantized.size();
      GroupEval ev = evaluate_group(in.subspan(first[k], n), held[k], config);
      value += ev.value;
      for (auto& g : ev.grads) grads.push_back(std::move(g));
    }
    return std::make_pair(value, std::move(grads));
  };
  CustomOp op(
      [run](std::span<const Matrix> in) {
        Matrix out(1, 1);
        out(0, 0) = run(in).first;
        return out;
      },
      [run](std::span<const Matrix> in, const Matrix&, const Matrix& upstream) {
        auto grads = run(in).second;
        for (auto& g : grads) g *= upstream(0, 0);
        return grads;
      });
  if (inputs.empty()) return Tensor::scalar(0.0);
  return op(inputs);
}

double lambda_schedule(long t, long horizon, double lambda_end) {
  if (lambda_end < 0.0) throw ValidationError("lambda_end must be >= 0");
  if (horizon <= 0) return lambda_end;
  if (t < 0 || t > horizon) {
    throw ValidationError("lambda_schedule: t=" + std::to_string(t) + " outside [0, " + std::to_string(horizon) + "]");
  }
  const double ratio = static_cast<double>(t) / static_cast<double>(horizon);
  return lambda_end * (1.0 - std::cos(std::numbers::pi * ratio)) / 2.0;
}

Tensor total_loss(const Tensor& kd, const Tensor& obr, double lambda) {
  if (lambda < 0.0) throw ValidationError("total_loss: lambda must be >= 0");
  if (lambda == 0.0) return kd;
  return add(kd, scale(obr, lambda));
}

}  // namespace vaqat
