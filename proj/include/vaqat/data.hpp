#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace vaqat {

inline constexpr int kPadToken = 0;

/// Sequence classification where each class is a planted motif of
/// `motif_len` tokens at a random position in uniform noise. Token 0 is
/// reserved for padding; noise and motifs use ids 1..vocab-1.
struct SyntheticTaskSpec {
  int vocab = 128;
  int seq_len = 32;
  int classes = 4;
  int motif_len = 4;
  int train_size = 1024;
  int eval_size = 512;
  double noise_rate = 0.0;  // per motif token, probability of being replaced by noise
  friend bool operator==(const SyntheticTaskSpec&, const SyntheticTaskSpec&) = default;
};

void to_json(nlohmann::json& j, const SyntheticTaskSpec& s);
void from_json(const nlohmann::json& j, SyntheticTaskSpec& s);

struct Sample {
  std::vector<int> tokens;
  int label = 0;
  int motif_pos = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::vector<int>> motifs;  // one per class
  int seq_len = 0;
};

struct TaskData {
  Dataset train;
  Dataset eval;
};

/// Deterministic in (spec, seed). Classes are balanced to within one sample;
/// train and eval come from separate random streams.
TaskData generate_task(const SyntheticTaskSpec& spec, std::uint64_t seed);

/// Keeps tokens in [offset, offset + length) and pads the rest.
std::vector<int> crop_tokens(const std::vector<int>& tokens, int offset, int length);

/// Whether a crop window contains the sample's whole motif.
bool crop_keeps_motif(const Sample& sample, int motif_len, int offset, int length);

void save_dataset_jsonl(const std::string& path, const Dataset& data);

}  // namespace vaqat
