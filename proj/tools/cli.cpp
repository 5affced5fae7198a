#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "dept/checkpoint.hpp"
#include "dept/config.hpp"
#include "dept/cost.hpp"
#include "dept/error.hpp"
#include "dept/harness.hpp"

namespace dept::cli {
namespace {

namespace fs = std::filesystem;
using Overrides = std::vector<std::pair<std::string, std::string>>;

struct Options {
  std::string config_path;
  std::string out;
  std::string m;
  std::string k;
  std::string seeds;
  std::string source;
  std::string backbone;
  std::string peft;
};

// Pulls "--section.field value" and "--section.field=value" out of the
// argument list; everything else is left for the parser.
Overrides extract_dotted(std::vector<std::string>& args) {
  Overrides out;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const auto& a = args[i];
    if (i > 0 && a.rfind("--", 0) == 0 && a.find('.') != std::string::npos &&
        a.find('.') < a.find('=')) {
      const auto eq = a.find('=');
      if (eq != std::string::npos) {
        out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
      } else if (i + 1 < args.size()) {
        out.emplace_back(a.substr(2), args[++i]);
      } else {
        throw ConfigError("override " + a + " needs a value");
      }
      continue;
    }
    rest.push_back(a);
  }
  args = std::move(rest);
  return out;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A config file may be partial, or a run manifest whose "config" member is
// the full resolved config. Either way the result is a complete document.
std::string config_text(const std::string& file_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(file_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (doc.is_object() && doc.contains("config") && doc.contains("command") && doc["config"].is_object()) {
    doc = doc["config"];
  }
  return to_json(run_config_from_json(doc.dump()));
}

fs::path output_dir(const std::string& verb, const Options& opt, const RunConfig& cfg) {
  if (!opt.out.empty()) return opt.out;
  if (!cfg.out_dir.empty()) return cfg.out_dir;
  const char* root = std::getenv("DEPT_OUT");
  return fs::path(root && *root ? root : "runs") / verb;
}

void require_file(const std::string& path, const char* what) {
  if (!path.empty() && !fs::is_regular_file(path)) {
    throw ConfigError(std::string(what) + " not found: " + path);
  }
}

void write_report(const fs::path& dir, const RunReport& report) {
  write_text(dir / "report.json", run_report_json(report));
  write_text(dir / "curve.csv", curve_csv(report));
}

std::vector<Example> bench_examples(const RunConfig& cfg) {
  TaskSpec spec = cfg.task;
  spec.vocab_size = cfg.backbone.vocab_size;
  return gen_task(spec, cfg.bench.eval_examples, 0).train;
}

Backbone<float> bench_backbone(const RunConfig& cfg) {
  // Throughput does not depend on trained weights; a fresh backbone is used
  // unless a checkpoint is given.
  if (!cfg.backbone_checkpoint.empty()) return obtain_backbone(cfg);
  auto b = Backbone<float>::init(cfg.backbone, cfg.backbone_seed);
  b.freeze();
  return b;
}

int execute(const std::string& verb, const Options& opt, const RunConfig& cfg, const fs::path& out_dir,
            std::ostream& out) {
  fs::create_directories(out_dir);
  write_text(out_dir / "manifest.json", manifest_json(cfg, cfg.train.seed, verb));

  if (verb == "pretrain") {
    const auto result = pretrain_backbone(cfg);
    save_checkpoint(out_dir / "backbone.ckpt", result.backbone.to_checkpoint());
    std::ostringstream js;
    js << "{\n  \"initial_loss\": " << result.initial_loss << ",\n  \"final_loss\": "
       << result.final_loss << ",\n  \"eval_accuracy\": " << result.eval.accuracy
       << ",\n  \"eval_loss\": " << result.eval.loss << "\n}\n";
    write_text(out_dir / "pretrain.json", js.str());
    out << "pretrain: loss " << result.initial_loss << " -> " << result.final_loss
        << ", source accuracy " << result.eval.accuracy << "\n";
    return kOk;
  }

  if (verb == "sweep" || verb == "bench") {
    SweepOptions so;
    so.l = cfg.bench.l;
    so.m_values = cfg.bench.m_values;
    so.batch = cfg.bench.batch;
    so.repeats = cfg.bench.repeats;
    so.pad_to_max_len = cfg.bench.pad_to_max_len;
    so.measure = verb == "bench" && cfg.bench.measure;
    so.seed = cfg.train.seed;
    std::vector<CostReport> rows;
    if (so.measure) {
      const auto backbone = bench_backbone(cfg);
      const auto examples = bench_examples(cfg);
      rows = sweep(cfg.backbone, so, &backbone, &examples);
    } else {
      rows = sweep(cfg.backbone, so);
    }
    write_text(out_dir / "sweep.csv", sweep_csv(rows));
    write_text(out_dir / "sweep.json", sweep_json(rows));
    out << sweep_csv(rows);
    for (const auto& r : rows) {
      if (r.throughput_noisy) out << "warning: throughput at m=" << r.m << " is noisy\n";
    }
    return kOk;
  }

  const auto backbone = obtain_backbone(cfg);

  if (verb == "train") {
    const auto data = task_dataset(cfg);
    Checkpoint source;
    if (!opt.source.empty()) source = load_checkpoint(opt.source);
    const auto result = train_peft(cfg, backbone, data, opt.source.empty() ? nullptr : &source);
    write_report(out_dir, result.report);
    save_checkpoint(out_dir / "peft.ckpt", result.best.to_checkpoint());
    out << "train: " << to_string(result.best.tag()) << " params " << result.report.trainable_params
        << ", accuracy " << result.report.initial_accuracy << " -> best " << result.report.final_metric
        << " at step " << result.report.best_step << "\n";
    return kOk;
  }

  if (verb == "eval") {
    if (opt.peft.empty()) throw ConfigError("eval needs --peft <checkpoint>");
    const auto variant =
        PeftVariant<float>::from_checkpoint(load_checkpoint(opt.peft), cfg.peft.alpha1, cfg.peft.alpha2);
    const auto data = task_dataset(cfg);
    const auto m = evaluate(backbone, &variant, data.eval, cfg.train.eval_batch);
    std::ostringstream js;
    js << "{\n  \"accuracy\": " << m.accuracy << ",\n  \"loss\": " << m.loss << ",\n  \"count\": "
       << m.count << "\n}\n";
    write_text(out_dir / "eval.json", js.str());
    out << "eval: accuracy " << m.accuracy << ", loss " << m.loss << " over " << m.count << "\n";
    return kOk;
  }

  if (verb == "ablate-lr") {
    const auto report = lr_ablation(cfg, backbone, task_dataset(cfg));
    write_text(out_dir / "ablation.json", ablation_json(report));
    write_text(out_dir / "ablation.csv", ablation_csv(report));
    out << "median final accuracy: single-high " << report.median_high << ", single-low "
        << report.median_low << ", mixed " << report.median_mixed << "\n";
    return kOk;
  }

  if (verb == "fewshot") {
    Checkpoint source;
    if (!opt.source.empty()) {
      source = load_checkpoint(opt.source);
    } else {
      out << "fewshot: training the source run\n";
      const auto src = train_peft(cfg, backbone, task_dataset(cfg));
      source = src.best.to_checkpoint();
      save_checkpoint(out_dir / "source.ckpt", source);
      write_report(out_dir / "source", src.report);
    }
    const auto report = few_shot(cfg, backbone, &source);
    for (const auto& run : report.runs) {
      write_report(out_dir / ("k" + std::to_string(run.k) + "-seed" + std::to_string(run.seed) + "-" +
                              (run.transfer ? "transfer" : "random")),
                   run.report);
    }
    write_text(out_dir / "fewshot.json", fewshot_json(report));
    write_text(out_dir / "fewshot.txt", fewshot_table(report));
    out << fewshot_table(report);
    return kOk;
  }
  throw ConfigError("unknown command: " + verb);
}

}  // namespace

int run(const std::vector<std::string>& argv_in, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args = argv_in;
  if (args.empty()) args.push_back("dept");
  Overrides overrides;
  try {
    overrides = extract_dotted(args);
  } catch (const Error& e) {
    err << "dept: " << e.what() << "\n";
    return kConfigError;
  }

  CLI::App app{"Prompt tuning and decomposed prompt tuning experiments", "dept"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());
  Options opt;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", opt.config_path, "JSON config file");
    sub->add_option("-o,--out", opt.out, "Output directory");
    sub->add_option("--backbone", opt.backbone, "Backbone checkpoint");
  };
  const std::vector<std::pair<std::string, std::string>> verbs = {
      {"pretrain", "Pretrain a backbone on the copy-recall mixture"},
      {"train", "Train a PEFT variant against a frozen backbone"},
      {"eval", "Evaluate a PEFT checkpoint"},
      {"bench", "Cost sweep with measured throughput"},
      {"sweep", "Analytic cost sweep"},
      {"ablate-lr", "Single vs mixed learning-rate ablation"},
      {"fewshot", "Few-shot target runs with and without transfer initialisation"},
  };
  for (const auto& [name, help] : verbs) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub);
    if (name == "train" || name == "bench" || name == "sweep") {
      sub->add_option("--m", opt.m, name == "train" ? "DePT prompt length" : "Prompt lengths to sweep (comma list)");
    }
    if (name == "train" || name == "fewshot") sub->add_option("--source", opt.source, "Source PEFT checkpoint");
    if (name == "eval") sub->add_option("--peft", opt.peft, "PEFT checkpoint")->required();
    if (name == "fewshot") sub->add_option("--k", opt.k, "Shots per run (comma list)");
    if (name == "fewshot" || name == "ablate-lr" || name == "train") {
      sub->add_option("--seeds", opt.seeds, "Seeds (comma list)");
    }
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << version_string() << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "dept: " << e.what() << "\n";
    return kConfigError;
  }
  const std::string verb = app.get_subcommands().front()->get_name();

  if (!opt.m.empty()) overrides.emplace_back(verb == "train" ? "peft.m" : "bench.m_values", opt.m);
  if (!opt.k.empty()) overrides.emplace_back("fewshot.k_values", opt.k);
  if (!opt.seeds.empty()) {
    if (verb == "fewshot") overrides.emplace_back("fewshot.seeds", opt.seeds);
    if (verb == "ablate-lr") overrides.emplace_back("ablation.seeds", opt.seeds);
    if (verb == "train") overrides.emplace_back("train.seed", opt.seeds.substr(0, opt.seeds.find(',')));
  }
  if (!opt.backbone.empty()) overrides.emplace_back("backbone.checkpoint", opt.backbone);

  RunConfig cfg;
  try {
    std::string text = to_json(RunConfig{});
    if (!opt.config_path.empty()) {
      if (!fs::is_regular_file(opt.config_path)) {
        throw ConfigError("config file not found: " + opt.config_path);
      }
      text = config_text(read_text(opt.config_path));
    }
    cfg = run_config_from_json(apply_overrides(text, overrides));
    cfg.validate();
    require_file(cfg.backbone_checkpoint, "backbone checkpoint");
    require_file(opt.source, "source checkpoint");
    require_file(opt.peft, "PEFT checkpoint");
    require_file(cfg.train_path, "training set");
    require_file(cfg.eval_path, "eval set");
  } catch (const Error& e) {
    err << "dept: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    return execute(verb, opt, cfg, output_dir(verb, opt, cfg), out);
  } catch (const ConfigError& e) {
    err << "dept: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "dept: " << e.what() << "\n";
    return kRuntimeError;
  }
}

int run(const std::vector<std::string>& args) { return run(args, std::cout, std::cerr); }

}  // namespace dept::cli
