// Command-line entry point: data generation, teacher training, soft-label
// caching, QAT runs, sensitivity sweeps, hardware cost and run reports.

#include "vaqat/config.hpp"
#include "vaqat/data.hpp"
#include "vaqat/diagnostics.hpp"
#include "vaqat/errors.hpp"
#include "vaqat/hwcost.hpp"
#include "vaqat/model.hpp"
#include "vaqat/report.hpp"
#include "vaqat/train.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fs = std::filesystem;
using namespace vaqat;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig load(const GlobalOptions& g) {
  ExperimentConfig c;
  if (!g.config_path.empty()) c = load_config(g.config_path);
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.out_dir = g.out;
  c.validate();
  fs::create_directories(c.out_dir);
  return c;
}

std::vector<std::string> split_targets(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto piece = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!piece.empty()) out.push_back(piece);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Keep large Eigen temporaries on the heap instead of a fresh mmap each time.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  CLI::App app{"Variation-aware quantization-aware training toolkit"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config_path, "Experiment config (JSON)");
  app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--out", g.out, "Override the output directory");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic train/eval sets as JSON lines");
  auto* teacher = app.add_subcommand("train-teacher", "Train the full-precision teacher");
  auto* cache = app.add_subcommand("build-cache", "Build the multi-crop soft-label cache from the teacher");

  auto* train = app.add_subcommand("train", "Quantization-aware training run");
  bool prepare = false;
  train->add_flag("--prepare", prepare, "Train the teacher and build the cache first if they are missing");

  auto* sweep = app.add_subcommand("sweep-sensitivity", "Bitwidth sensitivity grid");
  std::string mode = "leave-one-out";
  std::string targets;
  int low_bits = 3;
  int high_bits = 8;
  int jobs = 1;
  std::string grid_out = "sensitivity.csv";
  sweep->add_option("--mode", mode, "leave-one-out | only-one | per-head");
  sweep->add_option("--targets", targets, "Comma-separated site selectors");
  sweep->add_option("--low-bits", low_bits, "Bitwidth under study");
  sweep->add_option("--high-bits", high_bits, "Per-head mode: bitwidth of the rest");
  sweep->add_option("--jobs", jobs, "Concurrent runs");
  sweep->add_option("--output", grid_out, "CSV path, relative to the output directory");

  auto* hwcost = app.add_subcommand("hwcost", "MAC area/power of a bitwidth assignment");
  std::string assignment;
  std::string table_path;
  hwcost->add_option("--assignment", assignment, "Assignment JSON")->required();
  hwcost->add_option("--table", table_path, "MAC cost table JSON (checked against the built-in one)");

  auto* report = app.add_subcommand("report", "Compare finished runs");
  std::string runs_root;
  report->add_option("runs", runs_root, "Directory holding run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*gen) {
      const auto c = load(g);
      const TaskData data = generate_task(c.task, c.seed);
      save_dataset_jsonl((fs::path(c.out_dir) / "train.jsonl").string(), data.train);
      save_dataset_jsonl((fs::path(c.out_dir) / "eval.jsonl").string(), data.eval);
      std::cout << "wrote " << data.train.samples.size() << " train and " << data.eval.samples.size()
                << " eval samples to " << c.out_dir << '\n';
    } else if (*teacher) {
      const auto c = load(g);
      const auto r = train_teacher_to_disk(c);
      std::cout << "teacher eval top1 " << r.eval.top1 << "% top" << c.topk << ' ' << r.eval.topk << "%\n";
    } else if (*cache) {
      const auto c = load(g);
      const auto t = load_teacher(c);
      const auto sc = build_cache_to_disk(c, t);
      std::cout << "wrote " << sc.size() << " soft labels to " << resolve_path(c, c.cache_path) << '\n';
    } else if (*train) {
      const auto c = load(g);
      const auto r = run_experiment(c, prepare);
      std::cout << metrics_json(r).dump(2) << '\n';
    } else if (*sweep) {
      const auto c = load(g);
      SensitivityGridSpec spec;
      spec.mode = grid_mode_from_string(mode);
      spec.targets = split_targets(targets);
      spec.low_bits = low_bits;
      spec.high_bits = high_bits;
      const auto runs = plan_sensitivity_grid(spec, c.plan, enumerate_quant_sites(c.model, c.plan.quantize_attention_probs),
                                              c.model.layers, c.model.heads);
      const TaskData data = generate_task(c.task, c.seed);
      const Transformer t = load_teacher(c);
      std::optional<SoftLabelCache> sc;
      if (c.kd_mode == KdMode::MultiCrop && c.mckd_source == "cache") {
        sc = SoftLabelCache::load_jsonl(resolve_path(c, c.cache_path));
      }
      const QatInputs inputs{&t, &data, sc ? &*sc : nullptr};
      const auto rows = run_sensitivity_grid(spec, runs, make_grid_runner(c, inputs), jobs);
      const std::string path = resolve_path(c, grid_out);
      write_grid_csv(path, rows);
      for (const auto& r : rows) {
        std::cout << r.mode << ',' << r.target << ',' << r.bitwidth << ',' << r.top1 << ',' << r.topk << ','
                  << r.status << '\n';
      }
    } else if (*hwcost) {
      const auto table = table_path.empty() ? hw::MacCostTable::builtin() : hw::MacCostTable::load(table_path);
      const auto cost = hw::aggregate(hw::BitwidthAssignment::load(assignment), table);
      std::cout << nlohmann::json{{"area", cost.area}, {"power", cost.power}}.dump() << '\n';
    } else if (*report) {
      const auto runs = collect_runs(runs_root);
      std::cout << format_report_table(runs);
      write_report_tsv((fs::path(runs_root) / "report.tsv").string(), runs);
      write_curves_tsv((fs::path(runs_root) / "curves.tsv").string(), runs_root, runs);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const RuntimeAbort& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
