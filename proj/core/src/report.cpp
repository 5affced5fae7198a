#include <fstream>
#include <iomanip>
#include <sstream>

#include "dept/error.hpp"
#include "dept/harness.hpp"
#include "json.hpp"

#ifndef DEPT_VERSION
#define DEPT_VERSION "0.0.0"
#endif

namespace dept {
namespace {

using nlohmann::json;

json report_to_json(const RunReport& r) {
  json curve = json::array();
  for (const auto& p : r.curve) {
    curve.push_back({{"step", p.step},
                     {"loss", p.loss},
                     {"accuracy", p.accuracy},
                     {"lr_prompt", p.lr_prompt},
                     {"lr_lowrank", p.lr_lowrank}});
  }
  json j;
  j["curve"] = std::move(curve);
  j["initial_accuracy"] = r.initial_accuracy;
  j["initial_loss"] = r.initial_loss;
  j["final_metric"] = r.final_metric;
  j["best_step"] = r.best_step;
  j["last_accuracy"] = r.last_accuracy;
  j["trainable_params"] = r.trainable_params;
  j["slack"] = r.slack;
  j["composed_len"] = r.composed_len;
  j["peak_activation_elems"] = r.peak_activation_elems;
  j["seconds_per_step"] = r.seconds_per_step;
  j["seed"] = r.seed;
  j["config"] = r.config.empty() ? json::object() : json::parse(r.config);
  return j;
}

}  // namespace

const char* version_string() { return DEPT_VERSION; }

std::string run_report_json(const RunReport& report) { return report_to_json(report).dump(2); }

std::string curve_csv(const RunReport& report) {
  std::ostringstream os;
  os << "step,loss,accuracy,lr_prompt,lr_lowrank\n";
  os << std::setprecision(9);
  for (const auto& p : report.curve) {
    os << p.step << ',' << p.loss << ',' << p.accuracy << ',' << p.lr_prompt << ','
       << p.lr_lowrank << '\n';
  }
  return os.str();
}

std::string ablation_json(const AblationReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"setting", to_string(r.setting)}, {"seed", r.seed}, {"final_metric", r.final_metric}});
  }
  json j;
  j["rows"] = std::move(rows);
  j["median"] = {{"single-high", report.median_high},
                 {"single-low", report.median_low},
                 {"mixed", report.median_mixed}};
  j["reference_average_score"] = {{"single-high", report.reference_high},
                                  {"single-low", report.reference_low},
                                  {"mixed", report.reference_mixed}};
  return j.dump(2);
}

std::string ablation_csv(const AblationReport& report) {
  std::ostringstream os;
  os << "setting,seed,final_metric\n" << std::setprecision(9);
  for (const auto& r : report.rows) os << to_string(r.setting) << ',' << r.seed << ',' << r.final_metric << '\n';
  return os.str();
}

std::string fewshot_json(const FewShotReport& report) {
  json runs = json::array();
  for (const auto& r : report.runs) {
    runs.push_back({{"k", r.k},
                    {"seed", r.seed},
                    {"init", r.transfer ? "transfer" : "random"},
                    {"final_metric", r.report.final_metric},
                    {"initial_accuracy", r.report.initial_accuracy}});
  }
  json table = json::array();
  for (const auto& row : report.table) {
    json e = {{"k", row.k}, {"random", {{"mean", row.random_mean}, {"std", row.random_std}}}};
    if (report.has_transfer) e["transfer"] = {{"mean", row.transfer_mean}, {"std", row.transfer_std}};
    table.push_back(std::move(e));
  }
  return json{{"runs", std::move(runs)}, {"table", std::move(table)}}.dump(2);
}

std::string fewshot_table(const FewShotReport& report) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "k\trandom init";
  if (report.has_transfer) os << "\ttransfer init";
  os << '\n';
  for (const auto& row : report.table) {
    os << row.k << '\t' << 100.0 * row.random_mean << " ± " << 100.0 * row.random_std;
    if (report.has_transfer) {
      os << '\t' << 100.0 * row.transfer_mean << " ± " << 100.0 * row.transfer_std;
    }
    os << '\n';
  }
  return os.str();
}

std::string manifest_json(const RunConfig& cfg, std::uint64_t seed, const std::string& command) {
  json j;
  j["version"] = version_string();
  j["command"] = command;
  j["seed"] = seed;
  j["config"] = json::parse(to_json(cfg));
  return j.dump(2);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace dept
