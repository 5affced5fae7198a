// End-to-end acceptance checks on the desk configuration. Prints one
// PASS/FAIL line per criterion; exits non-zero if any fails.
//
//   dept_acceptance [criterion numbers...]
//
// The pretrained desk backbone is cached in DEPT_TEST_CACHE (or the
// directory named by $DEPT_CACHE) so only the first run pays for it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "dept/checkpoint.hpp"
#include "dept/cost.hpp"
#include "dept/gradcheck.hpp"
#include "dept/harness.hpp"
#include "dept/ops.hpp"
#include "dept/peft.hpp"

namespace {

using namespace dept;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;  // 0: no runtime bound
  std::function<Outcome()> run;
};

fs::path cache_dir() {
  if (const char* env = std::getenv("DEPT_CACHE"); env && *env) return env;
#ifdef DEPT_TEST_CACHE
  return DEPT_TEST_CACHE;
#else
  return fs::temp_directory_path() / "dept-cache";
#endif
}

fs::path report_dir() { return cache_dir() / "acceptance"; }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Shared desk setup: config, frozen pretrained backbone, task data.
struct Desk {
  RunConfig cfg;
  Backbone<float> backbone;
  Dataset data;
};

Desk& desk() {
  static std::optional<Desk> d;
  if (!d) {
    RunConfig cfg;
    cfg.validate();
    const auto t0 = Clock::now();
    auto bb = obtain_backbone(cfg, cache_dir());
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    if (secs > 5.0) std::cout << "  (desk backbone pretrained in " << fmt(secs, 3) << " s)\n";
    d.emplace(Desk{cfg, std::move(bb), task_dataset(cfg)});
  }
  return *d;
}

// 1. Budget parity at the reference configuration.
Outcome parameter_parity() {
  const auto sol = solve_budget(100, 768, 256, 40);
  const bool ok = sol.r == 45 && sol.trainable_params == 76800 && sol.trainable_params == 100u * 768u &&
                  sol.slack == 0;
  return {ok, "r=" + std::to_string(sol.r) + " params=" + std::to_string(sol.trainable_params)};
}

// 2. DePT at initialisation equals vanilla prompt tuning with the same short prompt.
Outcome zero_init_equivalence() {
  auto& d = desk();
  const auto plan = plan_variant(d.cfg.peft, d.backbone.config());
  std::vector<std::vector<std::int32_t>> texts;
  for (std::size_t i = 0; i < 16; ++i) texts.push_back(d.data.eval[i].tokens);
  const auto ids = TokenBatch::from_sequences(texts);
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto params = init_dept(d.backbone, plan.m, plan.r, d.cfg.peft.sigma, seed, d.cfg.peft.init);
    const auto dept = PeftVariant<float>::dept(params, 0.3, 5e-4, d.cfg.peft.l);
    const auto pt = PeftVariant<float>::vanilla({params.prompt}, 0.3);
    const auto a = dept.compose(d.backbone, ids);
    const auto b = pt.compose(d.backbone, ids);
    const auto la = d.backbone.forward_embeds(a.embeds, a.prompt_len, a.key_is_pad);
    const auto lb = d.backbone.forward_embeds(b.embeds, b.prompt_len, b.key_is_pad);
    for (std::size_t i = 0; i < la.numel(); ++i) {
      worst = std::max(worst, static_cast<double>(std::abs(la.data()[i] - lb.data()[i])));
    }
  }
  return {worst <= 1e-6, "max |diff| " + fmt(worst) + " over 20 seeds (m=" + std::to_string(plan.m) +
                             ", r=" + std::to_string(plan.r) + ")"};
}

// 3. Finite differences on the full DePT loss, 64-bit.
Outcome gradient_correctness() {
  BackboneConfig c;
  c.vocab_size = 16;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 6;
  c.max_prompt_len = 2;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto bb = Backbone<float>::init(c, 100 + seed).cast<double>();
    bb.freeze();
    // Redraw weights at unit-ish scale: with 0.02 weights some coordinates
    // carry gradients near 1e-7, below what central differences resolve.
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, 0.5);
    for (const auto& nt : bb.named_parameters()) {
      if (nt.name.find("gamma") != std::string::npos) continue;
      auto t = nt.tensor;
      for (auto& v : t.mutable_data()) v = n01(rng);
    }
    auto p = init_dept(bb, 2, 2, 0.02, seed, PromptInit::kRandomGaussian);
    // Away from B = 0 so that A receives a gradient.
    for (auto& v : p.lowrank_b.mutable_data()) v = n01(rng);
    for (auto& v : p.lowrank_a.mutable_data()) v = n01(rng);
    const auto ids = TokenBatch::from_sequences({{3, 7, 2, 9, 11, 5}, {4, 12, 6}});
    const std::vector<std::int32_t> targets = {8, 13};
    auto loss = [&] {
      const auto in = compose_dept(bb, p, ids);
      const auto hidden = bb.hidden_states(in.embeds, in.key_is_pad);
      return ops::cross_entropy(bb.logits_at(hidden, in.last_rows), targets);
    };
    const auto rep = finite_diff_check(loss, {p.prompt, p.lowrank_a, p.lowrank_b}, 1e-5, 1e-5);
    checked += rep.checked;
    worst = std::max(worst, rep.max_rel_error);
    if (!rep.passed) return {false, "seed " + std::to_string(seed) + ": " + rep.summary()};
  }
  return {true, std::to_string(checked) + " coordinates, max rel error " + fmt(worst)};
}

// 4. Backbone bytes unchanged by PEFT training.
Outcome frozen_backbone_conservation() {
  auto& d = desk();
  const auto dir = report_dir() / "frozen";
  fs::create_directories(dir);
  save_checkpoint(dir / "before.ckpt", d.backbone.to_checkpoint());
  std::string detail;
  bool ok = true;
  for (auto tag : {VariantTag::kVanillaPT, VariantTag::kDePT}) {
    auto cfg = d.cfg;
    cfg.peft.variant = tag;
    cfg.train.steps = 500;
    const auto res = train_peft(cfg, d.backbone, d.data);
    const auto after = dir / ("after-" + to_string(tag) + ".ckpt");
    save_checkpoint(after, d.backbone.to_checkpoint());
    const bool same = slurp(dir / "before.ckpt") == slurp(after);
    ok = ok && same;
    detail += to_string(tag) + (same ? " identical" : " CHANGED") + " (acc " + fmt(res.report.final_metric, 3) + ") ";
  }
  return {ok, detail};
}

// 5. Analytic cost reduction at the reference shape.
Outcome quadratic_cost() {
  BackboneConfig c;
  c.d_model = 768;
  c.d_ff = 3072;
  c.n_layers = 12;
  c.n_heads = 12;
  c.max_seq_len = 256;
  c.max_prompt_len = 100;
  const auto pt = flop_count(c, 100 + 256), dept = flop_count(c, 20 + 256);
  const double attn = 100.0 * (1.0 - static_cast<double>(dept.attention) / static_cast<double>(pt.attention));
  const double total = 100.0 * (1.0 - static_cast<double>(dept.total()) / static_cast<double>(pt.total()));
  const bool ok = std::abs(attn - 39.9) <= 0.1 && total >= 22.0;
  return {ok, "attention -" + fmt(attn) + "%, total -" + fmt(total) + "%"};
}

// 6. Measured throughput follows the analytic ordering.
Outcome throughput_direction() {
  auto& d = desk();
  SweepOptions so;
  so.l = d.cfg.bench.l;
  so.m_values = d.cfg.bench.m_values;
  so.batch = d.cfg.bench.batch;
  so.repeats = 5;
  so.measure = true;
  so.pad_to_max_len = true;
  TaskSpec spec = d.cfg.task;
  const auto examples = gen_task(spec, d.cfg.bench.eval_examples, 0).train;
  const auto rows = sweep(d.backbone.config(), so, &d.backbone, &examples);
  fs::create_directories(report_dir());
  std::ofstream(report_dir() / "sweep.csv") << sweep_csv(rows);

  const CostReport* m20 = nullptr;
  const CostReport* m100 = nullptr;
  std::vector<double> sps, flops;
  for (const auto& r : rows) {
    if (r.m == 20) m20 = &r;
    if (r.m == so.l) m100 = &r;
    sps.push_back(r.throughput_sps);
    flops.push_back(-static_cast<double>(r.total_flops));
  }
  if (!m20 || !m100) return {false, "sweep lacks m=20 or m=l"};
  const double ratio = m20->throughput_sps / m100->throughput_sps;
  const double rho = spearman(sps, flops);
  // Ordering violations are tolerated only between adjacent rows flagged noisy.
  bool order_ok = rho == 1.0;
  if (!order_ok) {
    order_ok = true;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = i + 1; j < rows.size(); ++j) {
        if (rows[j].throughput_sps > rows[i].throughput_sps) continue;
        const bool adjacent_noisy = j == i + 1 && (rows[i].throughput_noisy || rows[j].throughput_noisy);
        if (!adjacent_noisy) order_ok = false;
      }
    }
  }
  std::string detail = "sps(m=20)/sps(m=" + std::to_string(so.l) + ") = " + fmt(ratio) + ", spearman " + fmt(rho);
  return {ratio >= 1.05 && order_ok, detail};
}

// 7. DePT with r = 0 retraces vanilla prompt tuning exactly.
Outcome zero_rank_reduction() {
  auto& d = desk();
  auto dept_cfg = d.cfg;
  dept_cfg.peft.variant = VariantTag::kDePT;
  dept_cfg.peft.m = dept_cfg.peft.l;
  dept_cfg.train.steps = 200;
  auto pt_cfg = dept_cfg;
  pt_cfg.peft.variant = VariantTag::kVanillaPT;
  std::vector<std::vector<float>> a, b;
  auto record = [](std::vector<std::vector<float>>& out) {
    return [&out](std::size_t, double, const PeftVariant<float>& v) {
      const auto& p = v.tag() == VariantTag::kDePT ? v.dept_params().prompt : v.prompt_params().prompt;
      out.emplace_back(p.data().begin(), p.data().end());
    };
  };
  const auto rd = train_peft(dept_cfg, d.backbone, d.data, nullptr, record(a));
  const auto rp = train_peft(pt_cfg, d.backbone, d.data, nullptr, record(b));
  std::size_t first_diff = a.size();
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    if (a[i] != b[i]) {
      first_diff = i;
      break;
    }
  }
  const bool ok = rd.best.rank() == 0 && a.size() == 200 && b.size() == 200 && first_diff == a.size() &&
                  rd.report.step_losses == rp.report.step_losses;
  return {ok, ok ? "200 steps bit-identical" : "diverges at step " + std::to_string(first_diff)};
}

// 8. Mixed learning rates beat either single rate.
Outcome dual_lr_ablation() {
  auto& d = desk();
  const auto rep = lr_ablation(d.cfg, d.backbone, d.data);
  fs::create_directories(report_dir());
  std::ofstream(report_dir() / "ablation.csv") << ablation_csv(rep);
  const bool ok = rep.median_mixed >= rep.median_high && rep.median_mixed >= rep.median_low &&
                  rep.median_mixed >= 0.90 && rep.reference_mixed > rep.reference_low &&
                  rep.reference_low > rep.reference_high;
  return {ok, "median high " + fmt(rep.median_high, 3) + ", low " + fmt(rep.median_low, 3) + ", mixed " +
                  fmt(rep.median_mixed, 3) + " (reference " + fmt(rep.reference_mixed) + " > " +
                  fmt(rep.reference_low) + " > " + fmt(rep.reference_high) + ")"};
}

// 9. Matched-budget DePT keeps up with vanilla prompt tuning.
Outcome learning_parity() {
  auto& d = desk();
  std::vector<double> pt, dp;
  std::size_t pt_len = 0, dept_len = 0, pt_params = 0, dept_params = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto cfg = d.cfg;
    cfg.train.seed = seed;
    cfg.peft.variant = VariantTag::kVanillaPT;
    const auto a = train_peft(cfg, d.backbone, d.data).report;
    cfg.peft.variant = VariantTag::kDePT;
    const auto b = train_peft(cfg, d.backbone, d.data).report;
    pt.push_back(a.final_metric);
    dp.push_back(b.final_metric);
    pt_len = a.composed_len;
    dept_len = b.composed_len;
    pt_params = a.trainable_params;
    dept_params = b.trainable_params;
  }
  const double mp = median_of(pt), md = median_of(dp);
  const bool ok = md >= mp - 0.02 && dept_len < pt_len && dept_params + 0 <= pt_params;
  return {ok, "median PT " + fmt(mp, 3) + " vs DePT " + fmt(md, 3) + ", params " + std::to_string(pt_params) +
                  "/" + std::to_string(dept_params) + ", composed length " + std::to_string(pt_len) + " vs " +
                  std::to_string(dept_len)};
}

// 10. Transfer initialisation helps few-shot target training.
Outcome fewshot_transfer() {
  auto& d = desk();
  const auto source = train_peft(d.cfg, d.backbone, d.data);
  const auto ckpt = source.best.to_checkpoint();
  const auto rep = few_shot(d.cfg, d.backbone, &ckpt);
  const auto table = fewshot_table(rep);
  fs::create_directories(report_dir());
  std::ofstream(report_dir() / "fewshot.txt") << table;
  bool ok = rep.has_transfer && rep.table.size() == d.cfg.fewshot.k_values.size();
  std::string detail;
  for (const auto& row : rep.table) {
    ok = ok && row.transfer_mean >= row.random_mean;
    detail += "k=" + std::to_string(row.k) + " " + fmt(100 * row.random_mean, 3) + "->" +
              fmt(100 * row.transfer_mean, 3) + " ";
  }
  ok = ok && std::count(table.begin(), table.end(), '\n') >= static_cast<long>(rep.table.size()) &&
       table.find("±") != std::string::npos;
  return {ok, detail + "(source " + fmt(source.report.final_metric, 3) + ")"};
}

// 11. save -> load -> save is byte-stable.
Outcome checkpoint_round_trip() {
  auto& d = desk();
  const auto dir = report_dir() / "roundtrip";
  fs::create_directories(dir);
  save_checkpoint(dir / "backbone1.ckpt", d.backbone.to_checkpoint());
  save_checkpoint(dir / "backbone2.ckpt",
                  Backbone<float>::from_checkpoint(load_checkpoint(dir / "backbone1.ckpt")).to_checkpoint());
  auto cfg = d.cfg;
  cfg.train.steps = 50;
  const auto v = train_peft(cfg, d.backbone, d.data).best;
  save_checkpoint(dir / "peft1.ckpt", v.to_checkpoint());
  save_checkpoint(dir / "peft2.ckpt",
                  PeftVariant<float>::from_checkpoint(load_checkpoint(dir / "peft1.ckpt"), 0.3, 5e-4).to_checkpoint());
  const bool b = slurp(dir / "backbone1.ckpt") == slurp(dir / "backbone2.ckpt");
  const bool p = slurp(dir / "peft1.ckpt") == slurp(dir / "peft2.ckpt");
  return {b && p, std::string("backbone ") + (b ? "identical" : "differs") + ", peft " + (p ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "parameter parity", 0.001, parameter_parity},
      {2, "zero-init equivalence", 10, zero_init_equivalence},
      {3, "gradient correctness", 60, gradient_correctness},
      {4, "frozen-backbone conservation", 0, frozen_backbone_conservation},
      {5, "quadratic-cost reproduction", 0.001, quadratic_cost},
      {6, "measured throughput direction", 300, throughput_direction},
      {7, "r=0 reduction", 0, zero_rank_reduction},
      {8, "dual-LR ablation", 900, dual_lr_ablation},
      {9, "learning parity at matched budget", 900, learning_parity},
      {10, "few-shot transfer", 1200, fewshot_transfer},
      {11, "checkpoint round-trip", 0, checkpoint_round_trip},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    if (c.id != 1 && c.id != 3 && c.id != 5) desk();  // setup is not part of the timing
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    if (c.limit_seconds > 0 && secs > c.limit_seconds) {
      o.pass = false;
      o.detail += " [over time limit " + fmt(c.limit_seconds) + " s]";
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << c.id << ". " << c.name << ": " << o.detail
              << " (" << fmt(secs, 3) << " s)" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
