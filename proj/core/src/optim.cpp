#include "dept/optim.hpp"

#include <cmath>
#include <unordered_set>

namespace dept {

void OptimizerConfig::validate() const {
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) {
    throw ConfigError("optimizer betas must lie in (0, 1)");
  }
  if (!(eps > 0)) throw ConfigError("optimizer eps must be positive");
  if (weight_decay < 0) throw ConfigError("weight decay must be non-negative");
  if (!(warmup_proportion >= 0 && warmup_proportion < 1)) {
    throw ConfigError("warmup_proportion must lie in [0, 1)");
  }
  if (total_steps == 0) throw ConfigError("total_steps must be positive");
}

std::size_t OptimizerConfig::warmup_steps() const {
  return static_cast<std::size_t>(std::llround(warmup_proportion * static_cast<double>(total_steps)));
}

double lr_at(const OptimizerConfig& cfg, std::size_t step, double peak) {
  if (cfg.schedule == Schedule::kConstant) return peak;
  if (step >= cfg.total_steps) return 0.0;
  const std::size_t warmup = cfg.warmup_steps();
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  return peak * static_cast<double>(cfg.total_steps - step) /
         static_cast<double>(cfg.total_steps - warmup);
}

template <typename T>
AdamW<T>::AdamW(OptimizerConfig cfg, std::vector<ParamGroup<T>> groups)
    : cfg_(cfg), groups_(std::move(groups)) {
  cfg_.validate();
  std::unordered_set<const void*> seen;
  for (const auto& g : groups_) {
    if (!(g.peak_lr > 0)) throw ConfigError("group '" + g.name + "' needs a positive learning rate");
    std::vector<Moments> moments;
    for (const auto& p : g.params) {
      if (!p.is_leaf() || !p.requires_grad()) {
        throw ContractError("group '" + g.name + "' holds a tensor that is not a trainable leaf");
      }
      if (!seen.insert(p.node().get()).second) {
        throw ConfigError("a parameter appears in more than one optimizer group");
      }
      moments.push_back({std::vector<double>(p.numel(), 0.0), std::vector<double>(p.numel(), 0.0)});
    }
    state_.push_back(std::move(moments));
  }
}

template <typename T>
double AdamW<T>::group_lr(std::size_t group, std::size_t step_index) const {
  return lr_at(cfg_, step_index, groups_.at(group).peak_lr);
}

template <typename T>
void AdamW<T>::step(std::size_t step_index) {
  for (const auto& g : groups_) {
    for (const auto& p : g.params) {
      if (!p.has_grad()) {
        throw ContractError("optimizer step: a parameter in group '" + g.name +
                            "' has no gradient");
      }
    }
  }
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    const double lr = group_lr(gi, step_index);
    const double decay = 1.0 - lr * cfg_.weight_decay;
    for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
      auto& p = groups_[gi].params[pi];
      auto& st = state_[gi][pi];
      auto w = p.mutable_data();
      auto grad = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gr = static_cast<double>(grad[i]);
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * gr;
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * gr * gr;
        const double mhat = st.m[i] / c1;
        const double vhat = st.v[i] / c2;
        double x = static_cast<double>(w[i]) * decay;
        x -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        w[i] = static_cast<T>(x);
      }
      p.zero_grad();
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace dept
