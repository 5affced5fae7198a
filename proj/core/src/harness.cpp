#include "dept/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "dept/cost.hpp"
#include "dept/error.hpp"
#include "dept/ops.hpp"
#include "dept/optim.hpp"
#include "json.hpp"

namespace dept {
namespace {

using Clock = std::chrono::steady_clock;

struct LabelBatch {
  TokenBatch ids;
  std::vector<std::int32_t> labels;
};

LabelBatch make_batch(const std::vector<Example>& examples, std::span<const std::size_t> idx,
                      bool with_prefix) {
  std::vector<std::vector<std::int32_t>> seqs;
  LabelBatch out;
  seqs.reserve(idx.size());
  for (auto i : idx) {
    const auto& ex = examples[i];
    std::vector<std::int32_t> seq;
    if (with_prefix) seq = ex.prefix;
    seq.insert(seq.end(), ex.tokens.begin(), ex.tokens.end());
    seqs.push_back(std::move(seq));
    out.labels.push_back(ex.label);
  }
  out.ids = TokenBatch::from_sequences(seqs);
  return out;
}

// Logits [B x V] at each row's label position.
Tensor<float> label_logits(const Backbone<float>& backbone, const PeftVariant<float>* variant,
                           const TokenBatch& ids) {
  if (variant) {
    const auto in = variant->compose(backbone, ids);
    const auto hidden = backbone.hidden_states(in.embeds, in.key_is_pad);
    return backbone.logits_at(hidden, in.last_rows);
  }
  const auto mask = ids.pad_mask();
  const auto hidden = backbone.hidden_states(backbone.embed(ids), mask);
  std::vector<std::int32_t> rows(ids.batch);
  for (std::size_t b = 0; b < ids.batch; ++b) {
    const auto len = ids.row_length(b);
    if (len == 0) throw DegenerateInputError("empty sequence in batch");
    rows[b] = static_cast<std::int32_t>(b * ids.length + len - 1);
  }
  return backbone.logits_at(hidden, rows);
}

// Epoch-wise shuffled mini-batches; a short tail is dropped.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : order_(n), batch_(std::min(batch, n)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }

  std::span<const std::size_t> next() {
    if (pos_ + batch_ > order_.size()) reshuffle();
    std::span<const std::size_t> out(order_.data() + pos_, batch_);
    pos_ += batch_;
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::size_t longest_text(const std::vector<Example>& examples) {
  std::size_t n = 0;
  for (const auto& ex : examples) n = std::max(n, ex.tokens.size());
  return n;
}

void check_variant_fits(const PeftVariant<float>& v, const BackboneConfig& cfg) {
  const std::size_t d = cfg.d_model;
  auto fail = [](const std::string& msg) { throw ConfigError("variant does not fit backbone: " + msg); };
  if (v.prompt_length() > cfg.max_prompt_len) {
    fail("prompt length " + std::to_string(v.prompt_length()) + " > max_prompt_len " +
         std::to_string(cfg.max_prompt_len));
  }
  for (const auto& nt : v.named_tensors()) {
    if (nt.tensor.dim(nt.tensor.rank() - 1) != d && nt.name != "lowrank_a") {
      fail(nt.name + " has width " + std::to_string(nt.tensor.dim(nt.tensor.rank() - 1)));
    }
    if (nt.name == "lowrank_a" && nt.tensor.dim(0) != cfg.max_seq_len) {
      fail("lowrank_a has " + std::to_string(nt.tensor.dim(0)) + " rows, expected " +
           std::to_string(cfg.max_seq_len));
    }
  }
}

}  // namespace

EvalMetrics evaluate(const Backbone<float>& backbone, const PeftVariant<float>* variant,
                     const std::vector<Example>& examples, std::size_t batch) {
  if (examples.empty()) throw DegenerateInputError("evaluate: empty eval set");
  if (batch == 0) throw ConfigError("evaluate: batch must be positive");
  PeftVariant<float> frozen;
  if (variant) frozen = variant->detached();
  const bool use_prefix = variant == nullptr;

  std::vector<std::size_t> idx(examples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t vocab = backbone.config().vocab_size;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch) {
    const std::size_t count = std::min(batch, idx.size() - start);
    const auto b = make_batch(examples, std::span<const std::size_t>(idx).subspan(start, count),
                              use_prefix);
    const auto logits = label_logits(backbone, variant ? &frozen : nullptr, b.ids);
    const auto loss = ops::cross_entropy(logits, b.labels);
    loss_sum += static_cast<double>(loss.item()) * static_cast<double>(count);
    const auto data = logits.data();
    for (std::size_t i = 0; i < count; ++i) {
      const auto row = data.subspan(i * vocab, vocab);
      const auto arg = std::max_element(row.begin(), row.end()) - row.begin();
      if (arg == b.labels[i]) ++correct;
    }
  }
  EvalMetrics m;
  m.count = examples.size();
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.count);
  m.loss = loss_sum / static_cast<double>(m.count);
  return m;
}

namespace {

// Trains every backbone tensor on label-position loss. Returns per-step losses.
std::vector<double> train_all_weights(Backbone<float>& backbone, const std::vector<Example>& train,
                                      const OptimizerConfig& optim, std::size_t steps,
                                      std::size_t batch, double lr, std::uint64_t seed,
                                      const char* what) {
  if (train.empty()) throw DegenerateInputError(std::string(what) + ": empty training set");
  backbone.unfreeze();
  OptimizerConfig oc = optim;
  oc.total_steps = steps;
  AdamW<float> opt(oc, {{"backbone", backbone.parameters(), lr}});
  BatchSampler sampler(train.size(), batch, seed);
  std::vector<double> losses;
  losses.reserve(steps);
  for (std::size_t step = 0; step < steps; ++step) {
    const auto b = make_batch(train, sampler.next(), true);
    auto loss = ops::cross_entropy(label_logits(backbone, nullptr, b.ids), b.labels);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw TrainingError(std::string(what) + " diverged at step " + std::to_string(step));
    }
    loss.backward();
    opt.step(step);
    losses.push_back(value);
  }
  backbone.freeze();
  return losses;
}

}  // namespace

PretrainResult pretrain_backbone(const RunConfig& cfg) {
  const auto& ps = cfg.pretrain;
  TaskSpec source = cfg.task;
  source.generator = Generator::kCopyRecall;
  source.vocab_size = cfg.backbone.vocab_size;
  source.max_prefix = ps.max_prefix;
  source.seed = ps.seed;
  const auto data = gen_task(source, ps.n_train, ps.n_eval);

  PretrainResult out;
  out.backbone = Backbone<float>::init(cfg.backbone, cfg.backbone_seed);
  out.step_losses = train_all_weights(out.backbone, data.train, cfg.optim, ps.steps, ps.batch_size,
                                      ps.lr, ps.seed, "pretraining");
  const std::size_t window = std::max<std::size_t>(1, std::min<std::size_t>(100, ps.steps / 10));
  if (!out.step_losses.empty()) {
    const auto& l = out.step_losses;
    const std::size_t w = std::min(window, l.size());
    out.initial_loss = std::accumulate(l.begin(), l.begin() + w, 0.0) / static_cast<double>(w);
    out.final_loss = std::accumulate(l.end() - w, l.end(), 0.0) / static_cast<double>(w);
  }
  out.eval = evaluate(out.backbone, nullptr, data.eval);
  return out;
}

EvalMetrics finetune_all_weights(const RunConfig& cfg, const Backbone<float>& backbone,
                                 const Dataset& data, std::size_t steps, double lr) {
  auto copy = Backbone<float>::from_checkpoint(backbone.to_checkpoint());
  train_all_weights(copy, data.train, cfg.optim, steps, cfg.train.batch_size, lr, cfg.train.seed,
                    "fine-tuning");
  return evaluate(copy, nullptr, data.eval);
}

Backbone<float> obtain_backbone(const RunConfig& cfg, const std::filesystem::path& cache_dir) {
  if (!cfg.backbone_checkpoint.empty()) {
    if (!std::filesystem::exists(cfg.backbone_checkpoint)) {
      throw ConfigError("backbone checkpoint not found: " + cfg.backbone_checkpoint);
    }
    auto b = Backbone<float>::from_checkpoint(load_checkpoint(cfg.backbone_checkpoint));
    if (!(b.config() == cfg.backbone)) {
      throw ConfigError("backbone checkpoint " + cfg.backbone_checkpoint +
                        " does not match the configured backbone");
    }
    return b;
  }
  std::filesystem::path cached;
  if (!cache_dir.empty()) {
    // Key on everything pretraining reads; the PEFT rates live under "optim"
    // but do not affect the backbone.
    auto j = nlohmann::json::parse(to_json(cfg));
    j["optim"].erase("alpha1");
    j["optim"].erase("alpha2");
    std::ostringstream name;
    name << "backbone-" << std::hex
         << fnv1a(j["backbone"].dump() + j["pretrain"].dump() +
                  j["optim"].dump() + j["task"]["min_slots"].dump() + j["task"]["max_slots"].dump())
         << ".ckpt";
    cached = cache_dir / name.str();
    if (std::filesystem::exists(cached)) return Backbone<float>::from_checkpoint(load_checkpoint(cached));
  }
  auto result = pretrain_backbone(cfg);
  if (!cached.empty()) {
    std::filesystem::create_directories(cache_dir);
    auto tmp = cached;
    tmp += ".tmp" + std::to_string(Clock::now().time_since_epoch().count());
    save_checkpoint(tmp, result.backbone.to_checkpoint());
    std::filesystem::rename(tmp, cached);
  }
  return std::move(result.backbone);
}

Dataset task_dataset(const RunConfig& cfg) {
  if (!cfg.train_path.empty() || !cfg.eval_path.empty()) {
    if (cfg.train_path.empty() || cfg.eval_path.empty()) {
      throw ConfigError("task.train_path and task.eval_path must be given together");
    }
    for (const auto& p : {cfg.train_path, cfg.eval_path}) {
      if (!std::filesystem::exists(p)) throw ConfigError("dataset not found: " + p);
    }
    return {load_dataset(cfg.train_path, cfg.backbone.vocab_size),
            load_dataset(cfg.eval_path, cfg.backbone.vocab_size)};
  }
  TaskSpec spec = cfg.task;
  spec.vocab_size = cfg.backbone.vocab_size;
  return gen_task(spec, cfg.n_train, cfg.n_eval);
}

VariantPlan plan_variant(const PeftSettings& peft, const BackboneConfig& backbone) {
  VariantPlan plan;
  if (peft.variant == VariantTag::kVanillaPT) {
    plan.m = peft.l;
    return plan;
  }
  plan.m = peft.m;
  const auto budget = solve_budget(peft.l, backbone.d_model, backbone.max_seq_len, peft.m);
  if (peft.r) {
    plan.r = *peft.r;
    const std::size_t used = plan.m * backbone.d_model + (backbone.max_seq_len + backbone.d_model) * plan.r;
    plan.slack = used <= budget.budget ? budget.budget - used : 0;
  } else {
    plan.r = budget.r;
    plan.slack = budget.slack;
  }
  return plan;
}

PeftVariant<float> make_variant(const PeftSettings& peft, const Backbone<float>& backbone,
                                std::uint64_t seed) {
  const auto plan = plan_variant(peft, backbone.config());
  if (peft.variant == VariantTag::kVanillaPT) {
    if (plan.m > backbone.config().max_prompt_len) {
      throw ConfigError("prompt length " + std::to_string(plan.m) + " exceeds max_prompt_len " +
                        std::to_string(backbone.config().max_prompt_len));
    }
    PromptParams<float> p{init_prompt(backbone.token_embedding(), plan.m, peft.init, seed, peft.sigma)};
    return PeftVariant<float>::vanilla(std::move(p), peft.alpha1);
  }
  return PeftVariant<float>::dept(init_dept(backbone, plan.m, plan.r, peft.sigma, seed, peft.init),
                                  peft.alpha1, peft.alpha2, peft.l);
}

TrainResult train_variant(const RunConfig& cfg, const Backbone<float>& backbone,
                          const PeftVariant<float>& initial, const Dataset& data,
                          const StepObserver& observer) {
  const auto& ts = cfg.train;
  if (data.train.empty()) throw DegenerateInputError("train: empty training set");
  if (ts.eval_every == 0) throw ConfigError("train.eval_every must be positive");
  if (!backbone.frozen()) throw ContractError("train: backbone must be frozen");
  check_variant_fits(initial, backbone.config());

  PeftVariant<float> variant = initial.clone();
  OptimizerConfig oc = cfg.optim;
  oc.total_steps = ts.steps;
  std::vector<ParamGroup<float>> groups;
  if (auto g = variant.prompt_group(); !g.empty()) groups.push_back({"prompt", g, variant.alpha1()});
  if (auto g = variant.lowrank_group(); !g.empty()) groups.push_back({"lowrank", g, variant.alpha2()});
  AdamW<float> opt(oc, groups);

  RunReport report;
  report.seed = ts.seed;
  report.config = to_json(cfg);
  report.trainable_params = variant.trainable_params();
  report.slack = variant.tag() == VariantTag::kDePT
                     ? variant.budget_length() * backbone.config().d_model - report.trainable_params
                     : 0;
  report.composed_len = variant.prompt_length() + longest_text(data.train);
  report.peak_activation_elems =
      memory_estimate(backbone.config(), report.composed_len, std::min(ts.batch_size, data.train.size()));

  const auto initial_eval = evaluate(backbone, &variant, data.eval, ts.eval_batch);
  report.initial_accuracy = initial_eval.accuracy;
  report.initial_loss = initial_eval.loss;
  report.final_metric = initial_eval.accuracy;
  report.best_step = 0;
  PeftVariant<float> best = variant.clone();

  BatchSampler sampler(data.train.size(), ts.batch_size, ts.seed);
  report.step_losses.reserve(ts.steps);
  double seconds = 0.0;
  for (std::size_t step = 0; step < ts.steps; ++step) {
    const auto t0 = Clock::now();
    const auto b = make_batch(data.train, sampler.next(), false);
    auto loss = ops::cross_entropy(label_logits(backbone, &variant, b.ids), b.labels);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw TrainingError("training diverged at step " + std::to_string(step));
    }
    loss.backward();
    opt.step(step);
    seconds += std::chrono::duration<double>(Clock::now() - t0).count();
    report.step_losses.push_back(value);
    if (observer) observer(step, value, variant);

    const std::size_t done = step + 1;
    if (done % ts.eval_every == 0) {
      const auto m = evaluate(backbone, &variant, data.eval, ts.eval_batch);
      CurvePoint p;
      p.step = done;
      p.loss = m.loss;
      p.accuracy = m.accuracy;
      std::size_t gi = 0;
      if (!variant.prompt_group().empty()) p.lr_prompt = opt.group_lr(gi++, step);
      if (!variant.lowrank_group().empty()) p.lr_lowrank = opt.group_lr(gi, step);
      report.curve.push_back(p);
      if (m.accuracy > report.final_metric) {
        report.final_metric = m.accuracy;
        report.best_step = done;
        best = variant.clone();
      }
    }
  }
  report.seconds_per_step = ts.steps ? seconds / static_cast<double>(ts.steps) : 0.0;
  report.last_accuracy =
      report.curve.empty() ? report.initial_accuracy : report.curve.back().accuracy;
  if (ts.steps % ts.eval_every != 0) {
    report.last_accuracy = evaluate(backbone, &variant, data.eval, ts.eval_batch).accuracy;
  }
  return {std::move(report), std::move(best), std::move(variant)};
}

TrainResult train_peft(const RunConfig& cfg, const Backbone<float>& backbone, const Dataset& data,
                       const Checkpoint* source, const StepObserver& observer) {
  if (!(cfg.backbone == backbone.config())) {
    throw ConfigError("configured backbone shape does not match the backbone being adapted");
  }
  cfg.validate();
  auto variant = make_variant(cfg.peft, backbone, cfg.train.seed);
  if (source) variant = transfer_init(variant, *source);
  return train_variant(cfg, backbone, variant, data, observer);
}

std::string to_string(LrSetting s) {
  switch (s) {
    case LrSetting::kSingleHigh: return "single-high";
    case LrSetting::kSingleLow: return "single-low";
    case LrSetting::kMixed: return "mixed";
  }
  return "?";
}

double median_of(std::vector<double> values) {
  if (values.empty()) throw DegenerateInputError("median of an empty sample");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
  if (values.empty()) throw DegenerateInputError("mean of an empty sample");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

AblationReport lr_ablation(const RunConfig& cfg, const Backbone<float>& backbone,
                           const Dataset& data) {
  if (cfg.ablation.seeds.empty()) throw ConfigError("ablation.seeds must not be empty");
  const double a1 = cfg.peft.alpha1, a2 = cfg.peft.alpha2;
  AblationReport out;
  std::vector<double> per[3];
  for (auto setting : {LrSetting::kSingleHigh, LrSetting::kSingleLow, LrSetting::kMixed}) {
    for (auto seed : cfg.ablation.seeds) {
      RunConfig run = cfg;
      run.train.seed = seed;
      auto variant = make_variant(cfg.peft, backbone, seed);
      switch (setting) {
        case LrSetting::kSingleHigh: variant.set_learning_rates(a1, a1); break;
        case LrSetting::kSingleLow: variant.set_learning_rates(a2, a2); break;
        case LrSetting::kMixed: variant.set_learning_rates(a1, a2); break;
      }
      const auto result = train_variant(run, backbone, variant, data);
      out.rows.push_back({setting, seed, result.report.final_metric});
      per[static_cast<int>(setting)].push_back(result.report.final_metric);
    }
  }
  out.median_high = median_of(per[0]);
  out.median_low = median_of(per[1]);
  out.median_mixed = median_of(per[2]);
  return out;
}

TaskSpec fewshot_target_task(const RunConfig& cfg) {
  TaskSpec t = cfg.task;
  t.vocab_size = cfg.backbone.vocab_size;
  t.class_offset = cfg.fewshot.target_class_offset;
  t.seed = cfg.task.seed + 1;
  return t;
}

FewShotReport few_shot(const RunConfig& cfg, const Backbone<float>& backbone,
                       const Checkpoint* source) {
  const auto& fs = cfg.fewshot;
  if (fs.k_values.empty() || fs.seeds.empty()) throw ConfigError("fewshot.k and fewshot.seeds must not be empty");
  const auto target = gen_task(fewshot_target_task(cfg), cfg.n_train, cfg.n_eval);

  FewShotReport out;
  out.has_transfer = source != nullptr;
  for (auto k : fs.k_values) {
    std::vector<double> random_acc, transfer_acc;
    for (auto seed : fs.seeds) {
      RunConfig run = cfg;
      run.train.seed = seed;
      run.train.steps = fs.steps;
      run.train.eval_every = std::min(cfg.train.eval_every, fs.steps);
      run.optim.total_steps = fs.steps;
      const Dataset data{few_shot_sample(target.train, k, seed), target.eval};
      const auto init = make_variant(cfg.peft, backbone, seed);

      auto r = train_variant(run, backbone, init, data);
      random_acc.push_back(r.report.final_metric);
      out.runs.push_back({k, seed, false, std::move(r.report)});
      if (source) {
        auto t = train_variant(run, backbone, transfer_init(init, *source), data);
        transfer_acc.push_back(t.report.final_metric);
        out.runs.push_back({k, seed, true, std::move(t.report)});
      }
    }
    FewShotRow row;
    row.k = k;
    std::tie(row.random_mean, row.random_std) = mean_std(random_acc);
    if (source) std::tie(row.transfer_mean, row.transfer_std) = mean_std(transfer_acc);
    out.table.push_back(row);
  }
  return out;
}

}  // namespace dept
