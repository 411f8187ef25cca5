#include "vaqat/config.hpp"

#include "vaqat/errors.hpp"

#include <fstream>

namespace vaqat {

std::string_view to_string(KdMode m) {
  switch (m) {
    case KdMode::None: return "none";
    case KdMode::Vanilla: return "vanilla";
    case KdMode::MultiCrop: return "multi-crop";
  }
  return "?";
}

KdMode kd_mode_from_string(std::string_view s) {
  if (s == "none") return KdMode::None;
  if (s == "vanilla") return KdMode::Vanilla;
  if (s == "multi-crop" || s == "mckd") return KdMode::MultiCrop;
  throw ValidationError("unknown kd_mode '" + std::string(s) + "' (none, vanilla, multi-crop)");
}

void to_json(nlohmann::json& j, const TeacherConfig& c) {
  j = nlohmann::json{
      {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"crop_prob", c.crop_prob}, {"optimizer", c.optimizer}};
}

void from_json(const nlohmann::json& j, TeacherConfig& c) {
  TeacherConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.crop_prob = j.value("crop_prob", d.crop_prob);
  c.optimizer = j.contains("optimizer") ? j.at("optimizer").get<OptimizerConfig>() : d.optimizer;
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"run_name", c.run_name},
                     {"model", c.model},
                     {"task", c.task},
                     {"plan", c.plan},
                     {"kd_mode", std::string(to_string(c.kd_mode))},
                     {"hard_label_fallback", c.hard_label_fallback},
                     {"mckd_source", c.mckd_source},
                     {"crops", c.crops},
                     {"crop_len", c.crop_len},
                     {"obr", c.obr},
                     {"optimizer", c.optimizer},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"teacher", c.teacher},
                     {"osc_momentum", c.osc_momentum},
                     {"osc_threshold", c.osc_threshold},
                     {"topk", c.topk},
                     {"teacher_path", c.teacher_path},
                     {"cache_path", c.cache_path},
                     {"out_dir", c.out_dir}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  static const char* known[] = {"seed",        "run_name",   "model",        "task",          "plan",
                                "kd_mode",     "hard_label_fallback",        "mckd_source",   "crops",
                                "crop_len",    "obr",        "optimizer",    "epochs",        "batch_size",
                                "teacher",     "osc_momentum", "osc_threshold", "topk",       "teacher_path",
                                "cache_path",  "out_dir"};
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw ValidationError("unknown config key '" + key + "'");
    }
  }
  ExperimentConfig d;
  c.seed = j.value("seed", d.seed);
  c.run_name = j.value("run_name", d.run_name);
  c.model = j.contains("model") ? j.at("model").get<TransformerConfig>() : d.model;
  c.task = j.contains("task") ? j.at("task").get<SyntheticTaskSpec>() : d.task;
  c.plan = j.contains("plan") ? j.at("plan").get<BitPlan>() : d.plan;
  c.kd_mode = j.contains("kd_mode") ? kd_mode_from_string(j.at("kd_mode").get<std::string>()) : d.kd_mode;
  c.hard_label_fallback = j.value("hard_label_fallback", d.hard_label_fallback);
  c.mckd_source = j.value("mckd_source", d.mckd_source);
  c.crops = j.value("crops", d.crops);
  c.crop_len = j.value("crop_len", d.crop_len);
  c.obr = j.contains("obr") ? j.at("obr").get<ObrConfig>() : d.obr;
  c.optimizer = j.contains("optimizer") ? j.at("optimizer").get<OptimizerConfig>() : d.optimizer;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.teacher = j.contains("teacher") ? j.at("teacher").get<TeacherConfig>() : d.teacher;
  c.osc_momentum = j.value("osc_momentum", d.osc_momentum);
  c.osc_threshold = j.value("osc_threshold", d.osc_threshold);
  c.topk = j.value("topk", d.topk);
  c.teacher_path = j.value("teacher_path", d.teacher_path);
  c.cache_path = j.value("cache_path", d.cache_path);
  c.out_dir = j.value("out_dir", d.out_dir);
}

void ExperimentConfig::validate() const {
  model.validate();
  if (model.vocab != task.vocab || model.seq_len != task.seq_len || model.classes != task.classes) {
    throw ValidationError("model and task disagree on vocab, seq_len or classes");
  }
  if (kd_mode == KdMode::None && !hard_label_fallback) {
    throw ValidationError("kd_mode none needs hard_label_fallback: true (no other label source)");
  }
  if (mckd_source != "cache" && mckd_source != "live") {
    throw ValidationError("mckd_source must be 'cache' or 'live'");
  }
  if (crops < 1) throw ValidationError("crops must be >= 1");
  if (crop_len < 0 || effective_crop_len() < 1 || effective_crop_len() > model.seq_len) {
    throw ValidationError("crop_len must lie in [1, seq_len]");
  }
  if (epochs < 0 || teacher.epochs < 0) throw ValidationError("epochs must be >= 0");
  if (batch_size < 1 || teacher.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(teacher.crop_prob >= 0.0 && teacher.crop_prob <= 1.0)) throw ValidationError("teacher.crop_prob outside [0, 1]");
  if (!(osc_momentum > 0.0 && osc_momentum < 1.0)) throw ValidationError("osc_momentum outside (0, 1)");
  if (osc_threshold < 0.0) throw ValidationError("osc_threshold must be >= 0");
  if (topk < 1 || topk > model.classes) throw ValidationError("topk must lie in [1, classes]");
  if (obr.lambda_end < 0.0 || obr.horizon < 0 || obr.min_bin_population < 1) {
    throw ValidationError("obr: lambda_end >= 0, horizon >= 0, min_bin_population >= 1");
  }
  if (plan.global_bits != 0 && (plan.global_bits < kMinBits || plan.global_bits > kMaxBits)) {
    throw UnsupportedBitwidthError("global_bits " + std::to_string(plan.global_bits) + " outside {0} U [2, 8]");
  }
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot read config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
  c.validate();
  return c;
}

void save_config(const std::string& path, const ExperimentConfig& c) {
  std::ofstream os(path);
  if (!os) throw RuntimeAbort("cannot open " + path + " for writing");
  os << nlohmann::json(c).dump(2) << '\n';
}

}  // namespace vaqat
