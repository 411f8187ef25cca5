#include "vaqat/report.hpp"

#include "vaqat/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace vaqat {

namespace fs = std::filesystem;

namespace {

nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw ValidationError("cannot read " + p.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(p.string() + ": " + e.what());
  }
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string num(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::vector<RunSummary> collect_runs(const std::string& root) {
  if (!fs::is_directory(root)) throw ValidationError(root + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "metrics.json") && fs::exists(e.path() / "config.json")) {
      dirs.push_back(e.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<RunSummary> out;
  for (const auto& d : dirs) {
    const auto m = read_json(d / "metrics.json");
    const auto c = read_json(d / "config.json");
    RunSummary r;
    r.run = d.filename().string();
    r.global_bits = c.value("plan", nlohmann::json::object()).value("global_bits", 0);
    r.kd_mode = c.value("kd_mode", std::string());
    r.lambda_end = c.value("obr", nlohmann::json::object()).value("lambda_end", 0.0);
    r.top1 = m.at("top1").get<double>();
    r.topk = m.at("topk").get<double>();
    r.oscillating_pct = m.at("oscillating_pct_final").get<double>();
    r.sdam = m.at("sdam_final").get<double>();
    if (m.contains("bin_variance_final")) r.bin_variance = m.at("bin_variance_final").get<double>();
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_report_table(const std::vector<RunSummary>& runs) {
  std::size_t w = 3;
  for (const auto& r : runs) w = std::max(w, r.run.size());
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %4s %-10s %8s %8s %8s %8s %8s %12s\n", static_cast<int>(w), "run", "bits",
                "kd", "lambda", "top1", "topk", "osc_%", "sdam", "bin_var");
  os << buf;
  for (const auto& r : runs) {
    std::snprintf(buf, sizeof buf, "%-*s %4d %-10s %8s %8s %8s %8s %8s %12s\n", static_cast<int>(w), r.run.c_str(),
                  r.global_bits, r.kd_mode.c_str(), num(r.lambda_end, 3).c_str(), num(r.top1, 2).c_str(),
                  num(r.topk, 2).c_str(), num(r.oscillating_pct, 3).c_str(), num(r.sdam, 4).c_str(),
                  r.bin_variance ? num(*r.bin_variance, 8).c_str() : "-");
    os << buf;
  }
  return os.str();
}

void write_report_tsv(const std::string& path, const std::vector<RunSummary>& runs) {
  std::ofstream os(path);
  if (!os) throw RuntimeAbort("cannot open " + path + " for writing");
  os << "run\tglobal_bits\tkd_mode\tlambda_end\ttop1\ttopk\toscillating_pct\tsdam\tbin_variance\n";
  for (const auto& r : runs) {
    os << r.run << '\t' << r.global_bits << '\t' << r.kd_mode << '\t' << r.lambda_end << '\t' << r.top1 << '\t'
       << r.topk << '\t' << r.oscillating_pct << '\t' << r.sdam << '\t';
    if (r.bin_variance) os << *r.bin_variance;
    os << '\n';
  }
}

void write_curves_tsv(const std::string& path, const std::string& root, const std::vector<RunSummary>& runs) {
  static const char* columns[] = {"iteration", "oscillating_pct", "kd_loss", "obr_loss", "lambda", "sdam"};
  std::ofstream os(path);
  if (!os) throw RuntimeAbort("cannot open " + path + " for writing");
  os << "run";
  for (const char* c : columns) os << '\t' << c;
  os << '\n';
  for (const auto& r : runs) {
    std::ifstream is(fs::path(root) / r.run / "diagnostics.csv");
    if (!is) continue;
    std::string line;
    if (!std::getline(is, line)) continue;
    const auto header = split(line, ',');
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    while (std::getline(is, line)) {
      const auto cells = split(line, ',');
      os << r.run;
      for (const char* c : columns) {
        auto it = col.find(c);
        os << '\t' << (it != col.end() && it->second < cells.size() ? cells[it->second] : std::string());
      }
      os << '\n';
    }
  }
}

}  // namespace vaqat
