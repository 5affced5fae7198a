#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dept/backbone.hpp"
#include "dept/checkpoint.hpp"
#include "dept/config.hpp"
#include "dept/peft.hpp"
#include "dept/tasks.hpp"

namespace dept {

struct EvalMetrics {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t count = 0;
};

// Argmax accuracy and mean cross-entropy at each example's label position.
// A null variant evaluates the bare backbone on prefix + text.
EvalMetrics evaluate(const Backbone<float>& backbone, const PeftVariant<float>* variant,
                     const std::vector<Example>& examples, std::size_t batch = 128);

struct PretrainResult {
  Backbone<float> backbone;  // frozen
  double initial_loss = 0.0;  // mean training loss over the first eval interval
  double final_loss = 0.0;    // mean training loss over the last eval interval
  EvalMetrics eval;
  std::vector<double> step_losses;
};

// Full training of a fresh backbone on the copy-recall mixture.
// Throws TrainingError (with the step index) if the loss goes non-finite.
PretrainResult pretrain_backbone(const RunConfig& cfg);

// Trains a copy of every backbone weight on `data` (prefix + text) and
// evaluates it; the input backbone is left untouched.
EvalMetrics finetune_all_weights(const RunConfig& cfg, const Backbone<float>& backbone,
                                 const Dataset& data, std::size_t steps, double lr);

// Loads cfg.backbone_checkpoint, or pretrains. When `cache_dir` is non-empty
// a pretrained backbone is stored there keyed by the backbone and pretrain
// settings, and reused on later calls.
Backbone<float> obtain_backbone(const RunConfig& cfg, const std::filesystem::path& cache_dir = {});

// Task data from cfg.train_path/eval_path when given, else generated.
Dataset task_dataset(const RunConfig& cfg);

struct VariantPlan {
  std::size_t m = 0;
  std::size_t r = 0;
  std::size_t slack = 0;
};

// Resolves (m, r) for the configured variant. With r unset, DePT solves the
// budget for (l, m).
VariantPlan plan_variant(const PeftSettings& peft, const BackboneConfig& backbone);

PeftVariant<float> make_variant(const PeftSettings& peft, const Backbone<float>& backbone,
                                std::uint64_t seed);

struct CurvePoint {
  std::size_t step = 0;
  double loss = 0.0;  // eval loss
  double accuracy = 0.0;
  double lr_prompt = 0.0;
  double lr_lowrank = 0.0;
};

struct RunReport {
  std::vector<CurvePoint> curve;  // one point per eval_every steps
  std::vector<double> step_losses;  // training loss of every step
  double initial_accuracy = 0.0;
  double initial_loss = 0.0;
  double final_metric = 0.0;  // best eval accuracy (step 0 included)
  std::size_t best_step = 0;
  double last_accuracy = 0.0;
  std::size_t trainable_params = 0;
  std::size_t slack = 0;
  std::size_t composed_len = 0;  // prompt length + longest text
  std::uint64_t peak_activation_elems = 0;
  double seconds_per_step = 0.0;  // wall clock; not reproducible
  std::uint64_t seed = 0;
  std::string config;  // RunConfig JSON
};

struct TrainResult {
  RunReport report;
  PeftVariant<float> best;
  PeftVariant<float> last;
};

// Called after every optimizer step with the training loss and the updated
// variant.
using StepObserver =
    std::function<void(std::size_t step, double loss, const PeftVariant<float>& variant)>;

// Trains `initial` (copied, never mutated) on data.train against a frozen
// backbone, evaluating on data.eval every cfg.train.eval_every steps.
TrainResult train_variant(const RunConfig& cfg, const Backbone<float>& backbone,
                          const PeftVariant<float>& initial, const Dataset& data,
                          const StepObserver& observer = {});

// make_variant + optional transfer initialisation from `source` + training.
TrainResult train_peft(const RunConfig& cfg, const Backbone<float>& backbone, const Dataset& data,
                       const Checkpoint* source = nullptr, const StepObserver& observer = {});

enum class LrSetting { kSingleHigh, kSingleLow, kMixed };
std::string to_string(LrSetting s);

struct AblationRow {
  LrSetting setting = LrSetting::kMixed;
  std::uint64_t seed = 0;
  double final_metric = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;  // settings in order high, low, mixed; seeds inner
  double median_high = 0.0;
  double median_low = 0.0;
  double median_mixed = 0.0;
  // Average scores of the same three settings for the full-size model.
  double reference_high = 40.8;
  double reference_low = 54.7;
  double reference_mixed = 85.7;
};

// Single high rate (alpha1 everywhere), single low rate (alpha2 everywhere)
// and mixed, for every seed in cfg.ablation.seeds.
AblationReport lr_ablation(const RunConfig& cfg, const Backbone<float>& backbone,
                           const Dataset& data);

struct FewShotRun {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  bool transfer = false;
  RunReport report;
};

struct FewShotRow {
  std::size_t k = 0;
  double random_mean = 0.0;
  double random_std = 0.0;
  double transfer_mean = 0.0;
  double transfer_std = 0.0;
};

struct FewShotReport {
  std::vector<FewShotRun> runs;
  std::vector<FewShotRow> table;
  bool has_transfer = false;
};

// The related target task: same generator and key category, next block of
// class tokens.
TaskSpec fewshot_target_task(const RunConfig& cfg);

// For every k and seed, trains a randomly initialised variant and, when
// `source` is given, a transfer-initialised one on k target examples.
// Accuracy is measured on the target eval set.
FewShotReport few_shot(const RunConfig& cfg, const Backbone<float>& backbone,
                       const Checkpoint* source);

// Mean and sample standard deviation (0 for fewer than two values).
std::pair<double, double> mean_std(const std::vector<double>& values);
double median_of(std::vector<double> values);

// Serialisation of reports.
std::string run_report_json(const RunReport& report);
std::string curve_csv(const RunReport& report);
std::string ablation_json(const AblationReport& report);
std::string ablation_csv(const AblationReport& report);
std::string fewshot_json(const FewShotReport& report);
std::string fewshot_table(const FewShotReport& report);

// {"version", "seed", "config", ...extra}
std::string manifest_json(const RunConfig& cfg, std::uint64_t seed, const std::string& command);

void write_text(const std::filesystem::path& path, const std::string& text);

const char* version_string();

}  // namespace dept
