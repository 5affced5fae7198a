#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dept/tensor.hpp"

namespace dept {

enum class Schedule { kWarmupLinear, kConstant };

// AdamW hyperparameters; defaults follow the prompt-tuning recipe
// (betas 0.9/0.98, eps 1e-6, decay 0.01, 6% linear warmup).
struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double warmup_proportion = 0.06;
  std::size_t total_steps = 2000;
  Schedule schedule = Schedule::kWarmupLinear;

  void validate() const;
  std::size_t warmup_steps() const;
};

// Linear 0 -> peak over the warmup, then linear peak -> 0 at total_steps.
double lr_at(const OptimizerConfig& cfg, std::size_t step, double peak);

template <typename T>
struct ParamGroup {
  std::string name;
  std::vector<Tensor<T>> params;
  double peak_lr = 0.0;
};

// AdamW with decoupled weight decay, bias correction and one scheduled
// learning rate per parameter group.
template <typename T>
class AdamW {
 public:
  AdamW(OptimizerConfig cfg, std::vector<ParamGroup<T>> groups);

  // Applies one update using lr_at(step_index) for each group, then clears
  // the gradients. Every grouped parameter must hold a gradient.
  void step(std::size_t step_index);

  std::size_t steps_taken() const { return t_; }
  const std::vector<ParamGroup<T>>& groups() const { return groups_; }
  const OptimizerConfig& config() const { return cfg_; }
  double group_lr(std::size_t group, std::size_t step_index) const;

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  OptimizerConfig cfg_;
  std::vector<ParamGroup<T>> groups_;
  std::vector<std::vector<Moments>> state_;
  std::size_t t_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace dept
