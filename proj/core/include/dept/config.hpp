#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dept/backbone.hpp"
#include "dept/optim.hpp"
#include "dept/peft.hpp"
#include "dept/tasks.hpp"

namespace dept {

struct PretrainSettings {
  std::size_t steps = 6000;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  std::size_t max_prefix = 24;
  std::size_t n_train = 50000;
  std::size_t n_eval = 500;
  std::uint64_t seed = 7;
};

struct PeftSettings {
  VariantTag variant = VariantTag::kDePT;
  std::size_t l = 20;                // vanilla length, and the DePT budget length
  std::size_t m = 4;                 // DePT prompt length
  std::optional<std::size_t> r;      // unset: solve the budget for (l, m)
  PromptInit init = PromptInit::kSampleVocabRows;
  double sigma = kDefaultInitSigma;
  double alpha1 = 3e-1;
  double alpha2 = 5e-4;
};

struct TrainSettings {
  std::size_t batch_size = 16;
  std::size_t steps = 600;
  std::size_t eval_every = 100;
  std::size_t eval_batch = 128;
  std::uint64_t seed = 1;
};

struct BenchSettings {
  std::size_t l = 100;
  std::vector<std::size_t> m_values = {0, 20, 40, 60, 80, 100};
  std::size_t repeats = 5;
  std::size_t batch = 16;
  std::size_t eval_examples = 64;
  bool measure = true;
  // Pad every text to max_seq_len so the measured composed length is m + s,
  // matching the analytic model.
  bool pad_to_max_len = true;
};

struct FewShotSettings {
  std::vector<std::size_t> k_values = {4, 16, 32};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::size_t steps = 200;
  // The related target task shares the key category but uses the next
  // block of class tokens.
  std::size_t target_class_offset = 4;
};

struct AblationSettings {
  std::vector<std::uint64_t> seeds = {1, 2, 3};
};

// Everything a run needs. Serialised verbatim into every run manifest.
struct RunConfig {
  BackboneConfig backbone;
  std::string backbone_checkpoint;  // empty: pretrain in-process
  std::uint64_t backbone_seed = 7;
  PretrainSettings pretrain;
  TaskSpec task;
  std::size_t n_train = 2000;
  std::size_t n_eval = 500;
  std::string train_path;  // optional JSON-lines datasets; override the generator
  std::string eval_path;
  PeftSettings peft;
  OptimizerConfig optim;  // total_steps is taken from train.steps
  TrainSettings train;
  BenchSettings bench;
  FewShotSettings fewshot;
  AblationSettings ablation;
  std::string out_dir;

  void validate() const;
};

std::string to_json(const RunConfig& cfg, int indent = 2);
RunConfig run_config_from_json(const std::string& text);

// Applies dotted-path overrides ("optim.alpha1" -> "0.4") to a config
// document. Paths must name an existing field and values must parse as that
// field's JSON type; anything else is a ConfigError.
std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::pair<std::string, std::string>>& overrides);

// Every dotted leaf path in the default config, e.g. "optim.alpha1".
std::vector<std::string> config_paths();

}  // namespace dept
