#include "vaqat/train.hpp"

#include "vaqat/errors.hpp"
#include "vaqat/ops.hpp"
#include "vaqat/optim.hpp"
#include "vaqat/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace vaqat {

namespace fs = std::filesystem;

namespace {

std::vector<int> iota_ids(int n) {
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

long steps_per_epoch(long items, int batch) { return (items + batch - 1) / batch; }

Eigen::ArrayXd flatten(const std::vector<Matrix>& parts) {
  Index total = 0;
  for (const auto& m : parts) total += m.size();
  Eigen::ArrayXd out(total);
  Index at = 0;
  for (const auto& m : parts) {
    out.segment(at, m.size()) = Eigen::Map<const Eigen::ArrayXd>(m.data(), m.size());
    at += m.size();
  }
  return out;
}

std::vector<Matrix> values_of(const std::vector<Tensor>& ts) {
  std::vector<Matrix> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.push_back(t.value());
  return out;
}

// Inputs seen by every site of an activation group during the last traced pass.
std::vector<Matrix> traced_inputs(const QuantGroup& g, const ActivationTrace& trace) {
  std::vector<Matrix> out;
  for (const auto& s : g.sites) {
    auto it = trace.inputs.find(s.name());
    if (it == trace.inputs.end()) throw PolicyError("site " + s.name() + " was not traced");
    out.push_back(it->second.value());
  }
  return out;
}

double correct_top1(const Matrix& logits, std::span<const int> labels) {
  double hits = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best = 0;
    logits.row(r).maxCoeff(&best);
    if (best == labels[static_cast<std::size_t>(r)]) hits += 1;
  }
  return hits;
}

double correct_topk(const Matrix& logits, std::span<const int> labels, int k) {
  double hits = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const double target = logits(r, labels[static_cast<std::size_t>(r)]);
    const auto above = (logits.row(r).array() > target).count();
    if (above < k) hits += 1;
  }
  return hits;
}

Matrix row_softmax(const Matrix& logits) {
  Matrix p = logits;
  for (Index r = 0; r < p.rows(); ++r) {
    const double m = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - m).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw RuntimeAbort("cannot open " + path + " for writing");
  os << j.dump(2) << '\n';
  if (!os) throw RuntimeAbort("write failed for " + path);
}

void add_model_parameters(AdamW& opt, const Transformer& model) {
  for (const auto& p : model.parameters()) opt.add(p.tensor, p.decay);
}

}  // namespace

std::vector<int> stack_tokens(const Dataset& data, std::span<const int> ids) {
  std::vector<int> out;
  out.reserve(ids.size() * static_cast<std::size_t>(data.seq_len));
  for (int id : ids) {
    const auto& t = data.samples.at(static_cast<std::size_t>(id)).tokens;
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

Matrix predict_probs(const Transformer& model, std::span<const int> tokens, Index batch, const QuantPolicy* policy) {
  ForwardContext ctx;
  ctx.policy = policy;
  return row_softmax(model.forward(tokens, batch, ctx).value());
}

Accuracy evaluate(const Transformer& model, const Dataset& data, int topk, const QuantPolicy* policy,
                  int batch_size) {
  const int n = static_cast<int>(data.samples.size());
  if (n == 0) return {};
  double top1 = 0;
  double topk_hits = 0;
  ForwardContext ctx;
  ctx.policy = policy;
  for (int start = 0; start < n; start += batch_size) {
    const int b = std::min(batch_size, n - start);
    std::vector<int> ids(static_cast<std::size_t>(b));
    std::iota(ids.begin(), ids.end(), start);
    std::vector<int> labels;
    for (int id : ids) labels.push_back(data.samples[static_cast<std::size_t>(id)].label);
    const Matrix logits = model.forward(stack_tokens(data, ids), b, ctx).value();
    top1 += correct_top1(logits, labels);
    topk_hits += correct_topk(logits, labels, topk);
  }
  return {100.0 * top1 / n, 100.0 * topk_hits / n};
}

// --- teacher --------------------------------------------------------------------------

TeacherResult train_teacher(const ExperimentConfig& config, const TaskData& data) {
  config.validate();
  const auto& tc = config.teacher;
  Rng init_rng = substream(config.seed, "init");
  TeacherResult out{Transformer::init(config.model, init_rng), {}, 0.0};
  Transformer& model = out.model;

  AdamW opt(tc.optimizer);
  add_model_parameters(opt, model);

  const Dataset& train = data.train;
  const int n_train = static_cast<int>(train.samples.size());
  const int n = config.model.seq_len;
  const int crop_len = config.effective_crop_len();
  const long per_epoch = steps_per_epoch(n_train, tc.batch_size);
  const long total = per_epoch * tc.epochs;
  const long warmup = std::lround(tc.optimizer.warmup_fraction * static_cast<double>(total));

  Rng shuffle_rng = substream(config.seed, "teacher.shuffle");
  Rng crop_rng = substream(config.seed, "teacher.crops");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> offset_dist(0, n - crop_len);
  std::vector<int> order = iota_ids(n_train);

  long it = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (int start = 0; start < n_train; start += tc.batch_size, ++it) {
      const int b = std::min(tc.batch_size, n_train - start);
      std::vector<int> tokens;
      std::vector<int> labels;
      for (int i = start; i < start + b; ++i) {
        const Sample& s = train.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        std::vector<int> t = s.tokens;
        if (tc.crop_prob > 0.0 && unit(crop_rng) < tc.crop_prob) t = crop_tokens(s.tokens, offset_dist(crop_rng), crop_len);
        tokens.insert(tokens.end(), t.begin(), t.end());
        labels.push_back(s.label);
      }
      Tape tape;
      TapeScope scope(tape);
      Tensor loss = hard_cross_entropy(model.forward(tokens, b), labels);
      backward(loss);
      out.final_loss = loss.item();
      opt.step(learning_rate(it, total, warmup, tc.optimizer));
      opt.zero_grad();
    }
  }
  out.eval = evaluate(model, data.eval, config.topk);
  return out;
}

// --- soft labels -----------------------------------------------------------------------

std::vector<std::vector<std::pair<int, int>>> crop_windows(int samples, int crops, int seq_len, int crop_len,
                                                           std::uint64_t seed) {
  if (crops < 1) throw ValidationError("crops must be >= 1");
  if (crop_len < 1 || crop_len > seq_len) throw ValidationError("crop length outside [1, seq_len]");
  Rng rng = substream(seed, "crops");
  std::uniform_int_distribution<int> offset_dist(0, seq_len - crop_len);
  std::vector<std::vector<std::pair<int, int>>> out(static_cast<std::size_t>(samples));
  for (auto& w : out) {
    for (int j = 0; j < crops; ++j) w.emplace_back(offset_dist(rng), crop_len);
  }
  return out;
}

namespace {

std::vector<int> stack_crops(const Dataset& data, std::span<const CropKey> keys,
                             const std::vector<std::vector<std::pair<int, int>>>& windows) {
  std::vector<int> tokens;
  tokens.reserve(keys.size() * static_cast<std::size_t>(data.seq_len));
  for (const auto& k : keys) {
    const auto [offset, length] = windows.at(static_cast<std::size_t>(k.sample_id)).at(static_cast<std::size_t>(k.crop_index));
    const auto t = crop_tokens(data.samples.at(static_cast<std::size_t>(k.sample_id)).tokens, offset, length);
    tokens.insert(tokens.end(), t.begin(), t.end());
  }
  return tokens;
}

}  // namespace

SoftLabelCache build_soft_label_cache(const Transformer& teacher, const Dataset& train, int crops, int crop_len,
                                      std::uint64_t seed, int batch_size) {
  const int n_train = static_cast<int>(train.samples.size());
  const auto windows = crop_windows(n_train, crops, train.seq_len, crop_len, seed);
  std::vector<CropKey> keys;
  for (int i = 0; i < n_train; ++i) {
    for (int j = 0; j < crops; ++j) keys.push_back({i, j});
  }
  SoftLabelCache cache;
  for (std::size_t start = 0; start < keys.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t b = std::min(keys.size() - start, static_cast<std::size_t>(batch_size));
    std::span<const CropKey> chunk(keys.data() + start, b);
    const Matrix probs = live_crop_probs(teacher, train, chunk, windows);
    for (std::size_t r = 0; r < b; ++r) {
      const CropKey k = chunk[r];
      const auto [offset, length] = windows[static_cast<std::size_t>(k.sample_id)][static_cast<std::size_t>(k.crop_index)];
      const auto row = probs.row(static_cast<Index>(r));
      cache.add({k.sample_id, k.crop_index, offset, length, std::vector<double>(row.data(), row.data() + row.size())});
    }
  }
  return cache;
}

Matrix live_crop_probs(const Transformer& teacher, const Dataset& train, std::span<const CropKey> keys,
                       const std::vector<std::vector<std::pair<int, int>>>& windows) {
  return predict_probs(teacher, stack_crops(train, keys, windows), static_cast<Index>(keys.size()));
}

std::vector<CropKey> mckd_epoch_keys(int samples, int crops, int epoch, std::uint64_t seed) {
  Rng rng = substream(seed, "mckd.pick.epoch" + std::to_string(epoch));
  std::uniform_int_distribution<int> pick(0, crops - 1);
  std::vector<CropKey> keys;
  keys.reserve(static_cast<std::size_t>(samples));
  for (int i = 0; i < samples; ++i) keys.push_back({i, pick(rng)});
  std::shuffle(keys.begin(), keys.end(), rng);
  return keys;
}

// --- QAT ---------------------------------------------------------------------------------

namespace {

std::vector<ObrGroup> obr_groups(const Transformer& model, const QuantPolicy& policy) {
  std::vector<ObrGroup> out;
  for (const auto& g : policy.groups()) {
    if (g.role != SiteRole::Weight) continue;
    out.push_back(make_obr_group(model.group_weights(g), g.state.scale.item(), g.spec.lv));
  }
  return out;
}

Eigen::ArrayXd weight_ints(const Transformer& model, const QuantPolicy& policy) {
  std::vector<Matrix> parts;
  for (const auto& g : policy.groups()) {
    if (g.role != SiteRole::Weight) continue;
    const double s = g.state.scale.item();
    for (const auto& w : model.group_weights(g)) parts.push_back(quantize_to_int(w.value(), s, g.spec.lv));
  }
  return flatten(parts);
}

// Weight scales from the weights; activation scales from one traced
// full-precision pass over `tokens`.
void init_scales(QuantPolicy& policy, const Transformer& model, std::span<const int> tokens, Index batch) {
  ActivationTrace trace;
  ForwardContext ctx;
  ctx.trace = &trace;
  model.forward(tokens, batch, ctx);
  for (auto& g : policy.groups()) {
    const auto parts = g.role == SiteRole::Weight ? values_of(model.group_weights(g)) : traced_inputs(g, trace);
    g.state.scale.mutable_value()(0, 0) = init_scale(flatten(parts), g.spec.lv.q_p);
  }
}

double final_sdam(const Transformer& model, const QuantPolicy& policy, const Dataset& eval) {
  const int b = std::min<int>(256, static_cast<int>(eval.samples.size()));
  if (b == 0) return 0.0;
  ActivationTrace trace;
  ForwardContext ctx{&policy, &trace};
  const auto ids = iota_ids(b);
  model.forward(stack_tokens(eval, ids), b, ctx);
  return sdam(trace.layer_groups);
}

}  // namespace

void apply_grad_scaling(QuantPolicy& policy, const Transformer& model, const ActivationTrace& trace, double max_factor) {
  for (auto& g : policy.groups()) {
    if (!g.spec.grad_scaling || !g.state.scale.has_grad()) continue;
    const auto parts = g.role == SiteRole::Weight ? values_of(model.group_weights(g)) : traced_inputs(g, trace);
    g.state.scale.mutable_grad() *= grad_scale_factor(flatten(parts), g.spec.lv.q_p, max_factor);
  }
}

QatResult run_qat(const ExperimentConfig& config, const QatInputs& inputs, const std::string& run_dir) {
  config.validate();
  if (inputs.teacher == nullptr || inputs.data == nullptr) throw ValidationError("run_qat needs a teacher and data");
  const bool mckd = config.kd_mode == KdMode::MultiCrop;
  const bool from_cache = mckd && config.mckd_source == "cache";
  if (from_cache && inputs.cache == nullptr) throw ValidationError("multi-crop KD from cache needs a soft-label cache");
  const auto t0 = std::chrono::steady_clock::now();

  const bool writing = !run_dir.empty();
  if (writing) {
    fs::create_directories(run_dir);
    save_config((fs::path(run_dir) / "config.json").string(), config);
  }

  const Transformer& teacher = *inputs.teacher;
  const Dataset& train = inputs.data->train;
  const Dataset& eval = inputs.data->eval;
  const int n_train = static_cast<int>(train.samples.size());
  const int B = config.batch_size;

  Transformer student = teacher.clone();
  QuantPolicy policy =
      QuantPolicy::build(enumerate_quant_sites(config.model, config.plan.quantize_attention_probs), config.plan);
  {
    const int b = std::min(B, n_train);
    const auto ids = iota_ids(b);
    init_scales(policy, student, stack_tokens(train, ids), b);
  }

  AdamW opt(config.optimizer);
  add_model_parameters(opt, student);
  for (const auto& s : policy.scale_parameters()) opt.add(s, false, true);

  // Soft targets for vanilla KD come from one pass of the teacher.
  Matrix vanilla_targets;
  if (config.kd_mode == KdMode::Vanilla) {
    const auto ids = iota_ids(n_train);
    vanilla_targets = predict_probs(teacher, stack_tokens(train, ids), n_train);
  }
  const auto windows = mckd && !from_cache
                           ? crop_windows(n_train, config.crops, config.model.seq_len, config.effective_crop_len(), config.seed)
                           : std::vector<std::vector<std::pair<int, int>>>{};

  const long per_epoch = steps_per_epoch(n_train, B);
  const long total = per_epoch * config.epochs;
  const long warmup = std::lround(config.optimizer.warmup_fraction * static_cast<double>(total));
  const long horizon = config.obr.horizon > 0 ? config.obr.horizon : total;

  OscillationState osc(weight_ints(student, policy), config.osc_momentum);
  Rng shuffle_rng = substream(config.seed, "shuffle");
  std::vector<int> order = iota_ids(n_train);

  QatResult result;
  auto last_good = model_checkpoint(student, &policy);
  auto abort_with_checkpoint = [&] {
    if (!writing) return;
    save_checkpoint((fs::path(run_dir) / "checkpoint_last_good").string(), last_good);
    write_diagnostics_csv((fs::path(run_dir) / "diagnostics.csv").string(), result.diagnostics);
  };

  try {
    long it = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      std::vector<CropKey> keys;
      if (mckd) {
        keys = mckd_epoch_keys(n_train, config.crops, epoch, config.seed);
      } else {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
      }
      for (int start = 0; start < n_train; start += B, ++it) {
        const int b = std::min(B, n_train - start);
        std::vector<int> tokens;
        std::vector<int> labels;
        Matrix targets;
        if (mckd) {
          std::span<const CropKey> batch_keys(keys.data() + start, static_cast<std::size_t>(b));
          for (const auto& k : batch_keys) {
            const Sample& s = train.samples[static_cast<std::size_t>(k.sample_id)];
            const auto [offset, length] = from_cache ? std::pair{inputs.cache->get(k).offset, inputs.cache->get(k).length}
                                                     : windows[static_cast<std::size_t>(k.sample_id)]
                                                              [static_cast<std::size_t>(k.crop_index)];
            const auto t = crop_tokens(s.tokens, offset, length);
            tokens.insert(tokens.end(), t.begin(), t.end());
            labels.push_back(s.label);
          }
          targets = from_cache ? cached_teacher_probs(*inputs.cache, batch_keys)
                               : live_crop_probs(teacher, train, batch_keys, windows);
        } else {
          std::span<const int> ids(order.data() + start, static_cast<std::size_t>(b));
          tokens = stack_tokens(train, ids);
          for (int id : ids) labels.push_back(train.samples[static_cast<std::size_t>(id)].label);
          if (config.kd_mode == KdMode::Vanilla) {
            targets.resize(b, vanilla_targets.cols());
            for (int r = 0; r < b; ++r) targets.row(r) = vanilla_targets.row(ids[static_cast<std::size_t>(r)]);
          }
        }

        const double lr = learning_rate(it, total, warmup, config.optimizer);
        const double lambda = lambda_schedule(std::min(it, horizon), horizon, config.obr.lambda_end);
        ActivationTrace trace;
        ForwardContext ctx{&policy, &trace};
        const auto groups = obr_groups(student, policy);

        DiagnosticsRow row;
        row.iteration = it;
        row.epoch = epoch;
        row.lr = lr;
        row.lambda = lambda;
        {
          Tape tape;
          TapeScope scope(tape);
          Tensor logits = student.forward(tokens, b, ctx);
          Tensor kd = config.kd_mode == KdMode::None ? hard_cross_entropy(logits, labels) : kd_loss(logits, Tensor(targets));
          Tensor loss = kd;
          if (lambda > 0.0) {
            Tensor obr = obr_loss(groups, config.obr);
            row.obr_loss = obr.item();
            loss = total_loss(kd, obr, lambda);
          }
          backward(loss);
          row.kd_loss = kd.item();
          row.train_acc = 100.0 * correct_top1(logits.value(), labels) / b;
        }
        if (lambda == 0.0) row.obr_loss = obr_loss(groups, config.obr).item();
        row.sdam = sdam(trace.layer_groups);

        apply_grad_scaling(policy, student, trace, config.plan.grad_scale_max);
        opt.step(lr);
        opt.zero_grad();

        osc.update(weight_ints(student, policy));
        row.oscillating_pct = oscillating_fraction(osc, config.osc_threshold);
        if (start + b >= n_train) {
          row.eval_acc = evaluate(student, eval, config.topk, &policy).top1;
          last_good = model_checkpoint(student, &policy);
        }
        result.diagnostics.push_back(row);
      }
    }
  } catch (const NonFiniteError&) {
    abort_with_checkpoint();
    throw;
  } catch (const CacheMissError&) {
    abort_with_checkpoint();
    throw;
  }

  result.eval = evaluate(student, eval, config.topk, &policy);
  result.oscillating_pct_final = oscillating_fraction(osc, config.osc_threshold);
  result.sdam_final = final_sdam(student, policy, eval);
  const auto groups = obr_groups(student, policy);
  result.bin_variance_final = mean_bin_variance(groups, config.obr.min_bin_population);
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (writing) {
    const fs::path dir(run_dir);
    write_diagnostics_csv((dir / "diagnostics.csv").string(), result.diagnostics);
    write_json((dir / "metrics.json").string(), metrics_json(result));
    write_json((dir / "timing.json").string(), {{"wall_seconds", result.wall_seconds}});
    write_json((dir / "policy.json").string(), policy.to_json());
    save_checkpoint((dir / "checkpoint").string(), model_checkpoint(student, &policy));
  }
  return result;
}

void write_diagnostics_csv(const std::string& path, const std::vector<DiagnosticsRow>& rows) {
  std::ofstream os(path);
  if (!os) throw RuntimeAbort("cannot open " + path + " for writing");
  os << "iteration,oscillating_pct,sdam,obr_loss,kd_loss,lambda,train_acc,eval_acc\n";
  for (const auto& r : rows) {
    os << r.iteration << ',' << fmt(r.oscillating_pct) << ',' << fmt(r.sdam) << ',' << fmt(r.obr_loss) << ','
       << fmt(r.kd_loss) << ',' << fmt(r.lambda) << ',' << fmt(r.train_acc) << ','
       << (r.eval_acc ? fmt(*r.eval_acc) : std::string()) << '\n';
  }
  if (!os) throw RuntimeAbort("write failed for " + path);
}

nlohmann::json metrics_json(const QatResult& r) {
  return {{"top1", r.eval.top1},
          {"topk", r.eval.topk},
          {"oscillating_pct_final", r.oscillating_pct_final},
          {"sdam_final", r.sdam_final},
          {"bin_variance_final", r.bin_variance_final},
          {"iterations", r.diagnostics.size()}};
}

// --- file-level pipeline --------------------------------------------------------------------

std::string resolve_path(const ExperimentConfig& config, const std::string& path) {
  const fs::path p(path);
  return p.is_absolute() ? p.string() : (fs::path(config.out_dir) / p).string();
}

TeacherResult train_teacher_to_disk(const ExperimentConfig& config) {
  const TaskData data = generate_task(config.task, config.seed);
  TeacherResult r = train_teacher(config, data);
  const std::string path = resolve_path(config, config.teacher_path);
  fs::create_directories(fs::path(path).parent_path().empty() ? fs::path(".") : fs::path(path).parent_path());
  save_checkpoint(path, model_checkpoint(r.model));
  write_json(path + "_metrics.json", {{"top1", r.eval.top1}, {"topk", r.eval.topk}, {"final_loss", r.final_loss}});
  return r;
}

Transformer load_teacher(const ExperimentConfig& config) {
  const std::string path = resolve_path(config, config.teacher_path);
  Rng rng = substream(config.seed, "init");
  Transformer model = Transformer::init(config.model, rng);
  restore_checkpoint(load_checkpoint(path), model);
  return model;
}

SoftLabelCache build_cache_to_disk(const ExperimentConfig& config, const Transformer& teacher) {
  const TaskData data = generate_task(config.task, config.seed);
  SoftLabelCache cache =
      build_soft_label_cache(teacher, data.train, config.crops, config.effective_crop_len(), config.seed);
  const std::string path = resolve_path(config, config.cache_path);
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  cache.save_jsonl(path);
  return cache;
}

QatResult run_experiment(const ExperimentConfig& config, bool prepare) {
  config.validate();
  const TaskData data = generate_task(config.task, config.seed);
  const std::string teacher_path = resolve_path(config, config.teacher_path);
  Transformer teacher;
  if (fs::exists(teacher_path + ".json")) {
    teacher = load_teacher(config);
  } else if (prepare) {
    teacher = train_teacher_to_disk(config).model;
  } else {
    throw ValidationError("teacher checkpoint " + teacher_path + " not found (run train-teacher first)");
  }
  std::optional<SoftLabelCache> cache;
  if (config.kd_mode == KdMode::MultiCrop && config.mckd_source == "cache") {
    const std::string cache_path = resolve_path(config, config.cache_path);
    if (fs::exists(cache_path)) {
      cache = SoftLabelCache::load_jsonl(cache_path);
    } else if (prepare) {
      cache = build_cache_to_disk(config, teacher);
    } else {
      throw ValidationError("soft-label cache " + cache_path + " not found (run build-cache first)");
    }
  }
  QatInputs inputs{&teacher, &data, cache ? &*cache : nullptr};
  return run_qat(config, inputs, (fs::path(config.out_dir) / config.run_name).string());
}

GridRunner make_grid_runner(const ExperimentConfig& config, const QatInputs& inputs) {
  return [config, inputs](const GridRun& run) {
    ExperimentConfig c = config;
    c.plan = run.plan;
    const QatResult r = run_qat(c, inputs);
    return RunScores{r.eval.top1, r.eval.topk};
  };
}

}  // namespace vaqat
