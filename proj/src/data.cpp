#include "vaqat/data.hpp"

#include "vaqat/errors.hpp"
#include "vaqat/rng.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace vaqat {

void to_json(nlohmann::json& j, const SyntheticTaskSpec& s) {
  j = nlohmann::json{{"vocab", s.vocab},           {"seq_len", s.seq_len},       {"classes", s.classes},
                     {"motif_len", s.motif_len},   {"train_size", s.train_size}, {"eval_size", s.eval_size},
                     {"noise_rate", s.noise_rate}};
}

void from_json(const nlohmann::json& j, SyntheticTaskSpec& s) {
  SyntheticTaskSpec d;
  s.vocab = j.value("vocab", d.vocab);
  s.seq_len = j.value("seq_len", d.seq_len);
  s.classes = j.value("classes", d.classes);
  s.motif_len = j.value("motif_len", d.motif_len);
  s.train_size = j.value("train_size", d.train_size);
  s.eval_size = j.value("eval_size", d.eval_size);
  s.noise_rate = j.value("noise_rate", d.noise_rate);
}

namespace {

void validate(const SyntheticTaskSpec& spec) {
  if (spec.vocab < 3 || spec.classes < 1 || spec.seq_len < 1 || spec.motif_len < 1 || spec.train_size < 0 ||
      spec.eval_size < 0) {
    throw ValidationError("task spec: sizes out of range");
  }
  if (spec.motif_len > spec.seq_len) {
    throw ValidationError("task spec: motif length " + std::to_string(spec.motif_len) + " exceeds sequence length " +
                          std::to_string(spec.seq_len));
  }
  if (!(spec.noise_rate >= 0.0 && spec.noise_rate <= 1.0)) throw ValidationError("task spec: noise_rate outside [0, 1]");
}

int random_token(Rng& rng, int vocab) {
  return std::uniform_int_distribution<int>(1, vocab - 1)(rng);
}

Dataset make_split(const SyntheticTaskSpec& spec, const std::vector<std::vector<int>>& motifs, int size, Rng& rng) {
  Dataset d;
  d.motifs = motifs;
  d.seq_len = spec.seq_len;
  std::vector<int> labels(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) labels[static_cast<std::size_t>(i)] = i % spec.classes;
  std::shuffle(labels.begin(), labels.end(), rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pos_dist(0, spec.seq_len - spec.motif_len);
  for (int label : labels) {
    Sample s;
    s.label = label;
    s.tokens.resize(static_cast<std::size_t>(spec.seq_len));
    for (auto& t : s.tokens) t = random_token(rng, spec.vocab);
    s.motif_pos = pos_dist(rng);
    const auto& motif = motifs[static_cast<std::size_t>(label)];
    for (int k = 0; k < spec.motif_len; ++k) {
      const bool corrupt = spec.noise_rate > 0.0 && unit(rng) < spec.noise_rate;
      s.tokens[static_cast<std::size_t>(s.motif_pos + k)] =
          corrupt ? random_token(rng, spec.vocab) : motif[static_cast<std::size_t>(k)];
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace

TaskData generate_task(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  validate(spec);
  Rng motif_rng = substream(seed, "data.motifs");
  std::vector<std::vector<int>> motifs;
  std::set<std::vector<int>> seen;
  while (static_cast<int>(motifs.size()) < spec.classes) {
    std::vector<int> m(static_cast<std::size_t>(spec.motif_len));
    for (auto& t : m) t = random_token(motif_rng, spec.vocab);
    if (seen.insert(m).second) motifs.push_back(std::move(m));
  }
  Rng train_rng = substream(seed, "data.train");
  Rng eval_rng = substream(seed, "data.eval");
  TaskData out;
  out.train = make_split(spec, motifs, spec.train_size, train_rng);
  out.eval = make_split(spec, motifs, spec.eval_size, eval_rng);
  return out;
}

std::vector<int> crop_tokens(const std::vector<int>& tokens, int offset, int length) {
  const int n = static_cast<int>(tokens.size());
  if (offset < 0 || length <= 0 || offset + length > n) {
    throw ValidationError("crop window [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                          ") outside sequence of " + std::to_string(n));
  }
  std::vector<int> out(tokens.size(), kPadToken);
  std::copy(tokens.begin() + offset, tokens.begin() + offset + length, out.begin() + offset);
  return out;
}

bool crop_keeps_motif(const Sample& sample, int motif_len, int offset, int length) {
  return sample.motif_pos >= offset && sample.motif_pos + motif_len <= offset + length;
}

void save_dataset_jsonl(const std::string& path, const Dataset& data) {
  std::ofstream os(path);
  if (!os) throw RuntimeAbort("cannot open " + path + " for writing");
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    os << nlohmann::json{{"id", i}, {"label", s.label}, {"motif_pos", s.motif_pos}, {"tokens", s.tokens}}.dump()
       << '\n';
  }
}

}  // namespace vaqat
