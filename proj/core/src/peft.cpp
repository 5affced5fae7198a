#include "dept/peft.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "dept/ops.hpp"

namespace dept {
namespace {

// Separate stream for the low-rank factor so that the prompt drawn for a
// given seed is the same in PT and DePT.
constexpr std::uint64_t kLowRankStream = 0x9E3779B97F4A7C15ULL;

template <typename T>
Tensor<T> gaussian(Shape shape, double sigma, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, sigma);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
ComposedInput<T> finish_compose(const Tensor<T>& words, const Tensor<T>& prompt,
                                const TokenBatch& ids) {
  ComposedInput<T> out;
  out.prompt_len = prompt.defined() ? prompt.dim(0) : 0;
  out.embeds = prompt.defined() ? ops::prepend_rows(prompt, words) : words;
  const std::size_t total = out.prompt_len + ids.length;
  out.key_is_pad.assign(ids.batch * total, 0);
  out.last_rows.resize(ids.batch);
  for (std::size_t b = 0; b < ids.batch; ++b) {
    auto row = ids.row(b);
    for (std::size_t i = 0; i < ids.length; ++i) {
      out.key_is_pad[b * total + out.prompt_len + i] = row[i] == kPadId;
    }
    const std::size_t len = ids.row_length(b);
    if (len == 0) throw DegenerateInputError("compose: empty sequence in batch");
    out.last_rows[b] = static_cast<std::int32_t>(b * total + out.prompt_len + len - 1);
  }
  return out;
}

template <typename T>
void check_text_length(const Backbone<T>& backbone, const TokenBatch& ids) {
  if (ids.length > backbone.config().max_seq_len) {
    throw LengthError("compose: sequence length " + std::to_string(ids.length) +
                      " exceeds max_seq_len " + std::to_string(backbone.config().max_seq_len));
  }
}

}  // namespace

std::string to_string(VariantTag tag) { return tag == VariantTag::kDePT ? "dept" : "pt"; }

std::string to_string(PromptInit init) {
  return init == PromptInit::kRandomGaussian ? "random-gaussian" : "sample-vocab-rows";
}

VariantTag parse_variant_tag(const std::string& s) {
  if (s == "dept" || s == "DePT") return VariantTag::kDePT;
  if (s == "pt" || s == "vanilla" || s == "VanillaPT") return VariantTag::kVanillaPT;
  throw ConfigError("unknown PEFT variant '" + s + "' (expected 'pt' or 'dept')");
}

PromptInit parse_prompt_init(const std::string& s) {
  if (s == "random-gaussian") return PromptInit::kRandomGaussian;
  if (s == "sample-vocab-rows") return PromptInit::kSampleVocabRows;
  throw ConfigError("unknown prompt init '" + s +
                    "' (expected 'random-gaussian' or 'sample-vocab-rows')");
}

BudgetSolution solve_budget(std::size_t l, std::size_t d, std::size_t s, std::size_t m) {
  if (d == 0 || s == 0) throw BudgetError("solve_budget: d and s must be >= 1");
  if (m > l) {
    throw BudgetError("solve_budget: prompt length m=" + std::to_string(m) +
                      " exceeds the budget length l=" + std::to_string(l));
  }
  BudgetSolution sol;
  sol.m = m;
  sol.budget = l * d;
  sol.r = (l - m) * d / (s + d);
  sol.trainable_params = m * d + (s + d) * sol.r;
  sol.slack = sol.budget - sol.trainable_params;
  return sol;
}

template <typename T>
Tensor<T> DeptParams<T>::delta() const {
  if (r == 0) throw ContractError("delta(): rank-0 DePT has no low-rank update");
  return ops::matmul(lowrank_a, lowrank_b);
}

template <typename T>
Tensor<T> init_prompt(const Tensor<T>& embedding_table, std::size_t length, PromptInit policy,
                      std::uint64_t seed, double sigma) {
  if (length == 0) throw ConfigError("init_prompt: length must be >= 1");
  const std::size_t vocab = embedding_table.dim(0), d = embedding_table.dim(1);
  std::mt19937_64 rng(seed);
  if (policy == PromptInit::kRandomGaussian) return gaussian<T>({length, d}, sigma, rng, true);

  const std::size_t top = std::min(vocab, kPromptInitTopVocab);
  if (length > top) {
    throw ConfigError("init_prompt: cannot sample " + std::to_string(length) +
                      " distinct rows from " + std::to_string(top));
  }
  // Partial Fisher-Yates: the first `length` entries are a uniform sample
  // without replacement.
  std::vector<std::size_t> idx(top);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < length; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, top - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::vector<T> data(length * d);
  auto src = embedding_table.data();
  for (std::size_t i = 0; i < length; ++i) {
    std::copy_n(src.data() + idx[i] * d, d, data.data() + i * d);
  }
  return Tensor<T>({length, d}, std::move(data), true);
}

template <typename T>
DeptParams<T> init_dept(const Backbone<T>& backbone, std::size_t m, std::size_t r, double sigma,
                        std::uint64_t seed, PromptInit prompt_policy) {
  const auto& cfg = backbone.config();
  const std::size_t s = cfg.max_seq_len, d = cfg.d_model;
  if (m == 0 && r == 0) throw ConfigError("init_dept: m and r cannot both be zero");
  if (r > std::min(s, d)) {
    throw RankError("init_dept: rank " + std::to_string(r) + " exceeds min(s, d) = " +
                    std::to_string(std::min(s, d)));
  }
  if (m > cfg.max_prompt_len) {
    throw LengthError("init_dept: prompt length " + std::to_string(m) +
                      " exceeds max_prompt_len " + std::to_string(cfg.max_prompt_len));
  }
  DeptParams<T> p;
  p.m = m;
  p.r = r;
  p.s = s;
  p.d = d;
  if (m > 0) p.prompt = init_prompt(backbone.token_embedding(), m, prompt_policy, seed, sigma);
  if (r > 0) {
    std::mt19937_64 rng(seed ^ kLowRankStream);
    p.lowrank_a = gaussian<T>({s, r}, sigma, rng, true);
    p.lowrank_b = Tensor<T>::zeros({r, d}, true);
  }
  return p;
}

template <typename T>
ComposedInput<T> compose_vanilla(const Backbone<T>& backbone, const PromptParams<T>& params,
                                 const TokenBatch& ids) {
  check_text_length(backbone, ids);
  if (params.length() > backbone.config().max_prompt_len) {
    throw LengthError("compose_vanilla: prompt length " + std::to_string(params.length()) +
                      " exceeds max_prompt_len " +
                      std::to_string(backbone.config().max_prompt_len));
  }
  return finish_compose(backbone.embed(ids), params.prompt, ids);
}

template <typename T>
ComposedInput<T> compose_dept(const Backbone<T>& backbone, const DeptParams<T>& params,
                              const TokenBatch& ids) {
  check_text_length(backbone, ids);
  if (ids.length > params.s) {
    throw LengthError("compose_dept: sequence length " + std::to_string(ids.length) +
                      " exceeds the low-rank update's " + std::to_string(params.s) + " rows");
  }
  auto words = backbone.embed(ids);
  if (params.r > 0) words = ops::add_position_rows(words, params.delta());
  return finish_compose(words, params.prompt, ids);
}

template <typename T>
PeftVariant<T> PeftVariant<T>::vanilla(PromptParams<T> params, double alpha1) {
  if (params.length() == 0) throw ConfigError("vanilla prompt tuning needs l >= 1");
  if (!(alpha1 > 0)) throw ConfigError("alpha1 must be positive");
  PeftVariant v;
  v.tag_ = VariantTag::kVanillaPT;
  v.budget_length_ = params.length();
  v.params_ = std::move(params);
  v.alpha1_ = alpha1;
  v.alpha2_ = alpha1;
  return v;
}

template <typename T>
PeftVariant<T> PeftVariant<T>::dept(DeptParams<T> params, double alpha1, double alpha2,
                                    std::size_t budget_length) {
  if (params.m == 0 && params.r == 0) throw ConfigError("DePT needs m > 0 or r > 0");
  if (!(alpha1 > 0) || !(alpha2 > 0)) throw ConfigError("alpha1 and alpha2 must be positive");
  PeftVariant v;
  v.tag_ = VariantTag::kDePT;
  v.budget_length_ = budget_length;
  v.params_ = std::move(params);
  v.alpha1_ = alpha1;
  v.alpha2_ = alpha2;
  return v;
}

template <typename T>
void PeftVariant<T>::set_learning_rates(double alpha1, double alpha2) {
  if (!(alpha1 > 0) || !(alpha2 > 0)) throw ConfigError("learning rates must be positive");
  alpha1_ = alpha1;
  alpha2_ = alpha2;
}

template <typename T>
const PromptParams<T>& PeftVariant<T>::prompt_params() const {
  if (tag_ != VariantTag::kVanillaPT) throw ContractError("not a vanilla prompt-tuning variant");
  return std::get<PromptParams<T>>(params_);
}

template <typename T>
const DeptParams<T>& PeftVariant<T>::dept_params() const {
  if (tag_ != VariantTag::kDePT) throw ContractError("not a DePT variant");
  return std::get<DeptParams<T>>(params_);
}

template <typename T>
std::size_t PeftVariant<T>::prompt_length() const {
  return tag_ == VariantTag::kVanillaPT ? prompt_params().length() : dept_params().m;
}

template <typename T>
std::size_t PeftVariant<T>::rank() const {
  return tag_ == VariantTag::kVanillaPT ? 0 : dept_params().r;
}

template <typename T>
std::size_t PeftVariant<T>::trainable_params() const {
  if (tag_ == VariantTag::kVanillaPT) {
    const auto& p = prompt_params();
    return p.length() * p.prompt.dim(1);
  }
  const auto& p = dept_params();
  return p.m * p.d + p.s * p.r + p.r * p.d;
}

template <typename T>
ComposedInput<T> PeftVariant<T>::compose(const Backbone<T>& backbone, const TokenBatch& ids) const {
  return tag_ == VariantTag::kVanillaPT ? compose_vanilla(backbone, prompt_params(), ids)
                                        : compose_dept(backbone, dept_params(), ids);
}

template <typename T>
std::vector<Tensor<T>> PeftVariant<T>::prompt_group() const {
  if (tag_ == VariantTag::kVanillaPT) return {prompt_params().prompt};
  const auto& p = dept_params();
  if (p.m == 0) return {};
  return {p.prompt};
}

template <typename T>
std::vector<Tensor<T>> PeftVariant<T>::lowrank_group() const {
  if (tag_ == VariantTag::kVanillaPT) return {};
  const auto& p = dept_params();
  if (p.r == 0) return {};
  return {p.lowrank_a, p.lowrank_b};
}

template <typename T>
std::vector<NamedTensor<T>> PeftVariant<T>::named_tensors() const {
  std::vector<NamedTensor<T>> out;
  if (tag_ == VariantTag::kVanillaPT) {
    out.push_back({"prompt", prompt_params().prompt});
    return out;
  }
  const auto& p = dept_params();
  if (p.m > 0) out.push_back({"prompt", p.prompt});
  if (p.r > 0) {
    out.push_back({"lowrank_a", p.lowrank_a});
    out.push_back({"lowrank_b", p.lowrank_b});
  }
  return out;
}

template <typename T>
Checkpoint PeftVariant<T>::to_checkpoint() const {
  Checkpoint ckpt;
  std::size_t d = 0, s = 0;
  if (tag_ == VariantTag::kVanillaPT) {
    d = prompt_params().prompt.dim(1);
  } else {
    d = dept_params().d;
    s = dept_params().s;
  }
  // [variant tag, m, r, l, d, s]
  ckpt.add("peft.meta", {6},
           {tag_ == VariantTag::kDePT ? 1.0f : 0.0f, static_cast<float>(prompt_length()),
            static_cast<float>(rank()), static_cast<float>(budget_length_),
            static_cast<float>(d), static_cast<float>(s)});
  for (const auto& nt : named_tensors()) ckpt.add(nt.name, nt.tensor);
  return ckpt;
}

template <typename T>
PeftVariant<T> PeftVariant<T>::from_checkpoint(const Checkpoint& ckpt, double alpha1,
                                               double alpha2) {
  const auto& meta = ckpt.at("peft.meta");
  if (meta.values.size() != 6) throw CheckpointError("peft.meta must hold 6 values");
  auto field = [&](std::size_t i) { return static_cast<std::size_t>(meta.values[i]); };
  auto leaf = [&](const char* name) {
    const auto& t = ckpt.at(name);
    return Tensor<T>(t.shape, std::vector<T>(t.values.begin(), t.values.end()), true);
  };
  if (meta.values[0] == 0.0f) return vanilla(PromptParams<T>{leaf("prompt")}, alpha1);
  DeptParams<T> p;
  p.m = field(1);
  p.r = field(2);
  p.d = field(4);
  p.s = field(5);
  if (p.m > 0) p.prompt = leaf("prompt");
  if (p.r > 0) {
    p.lowrank_a = leaf("lowrank_a");
    p.lowrank_b = leaf("lowrank_b");
  }
  return dept(std::move(p), alpha1, alpha2, field(3));
}

template <typename T>
PeftVariant<T> PeftVariant<T>::clone() const {
  PeftVariant out = *this;
  auto copy = [](const Tensor<T>& t) { return t.defined() ? t.detach(true) : Tensor<T>(); };
  if (tag_ == VariantTag::kVanillaPT) {
    out.params_ = PromptParams<T>{copy(prompt_params().prompt)};
  } else {
    DeptParams<T> p = dept_params();
    p.prompt = copy(p.prompt);
    p.lowrank_a = copy(p.lowrank_a);
    p.lowrank_b = copy(p.lowrank_b);
    out.params_ = std::move(p);
  }
  return out;
}

template <typename T>
PeftVariant<T> PeftVariant<T>::detached() const {
  PeftVariant out = clone();
  for (auto& nt : out.named_tensors()) nt.tensor.set_requires_grad(false);
  return out;
}

template <typename T>
PeftVariant<T> transfer_init(const PeftVariant<T>& target, const Checkpoint& source) {
  PeftVariant<T> out = target.clone();
  const auto named = out.named_tensors();
  for (const auto& nt : named) {
    const auto* src = source.find(nt.name);
    if (!src) throw TransferError("transfer: source checkpoint has no '" + nt.name + "' tensor");
    if (src->shape != nt.tensor.shape()) {
      throw TransferError("transfer: '" + nt.name + "' has shape " + shape_string(src->shape) +
                          " in the source but " + shape_string(nt.tensor.shape()) +
                          " in the target");
    }
  }
  for (const auto& st : source.tensors) {
    if (st.name == "peft.meta") continue;
    const bool wanted = std::any_of(named.begin(), named.end(),
                                    [&](const auto& nt) { return nt.name == st.name; });
    if (!wanted) throw TransferError("transfer: target has no '" + st.name + "' tensor");
  }
  for (auto nt : named) {
    const auto& src = source.at(nt.name);
    auto dst = nt.tensor.mutable_data();
    std::transform(src.values.begin(), src.values.end(), dst.begin(),
                   [](float v) { return static_cast<T>(v); });
  }
  return out;
}

#define DEPT_INSTANTIATE_PEFT(T)                                                                  \
  template struct DeptParams<T>;                                                                  \
  template class PeftVariant<T>;                                                                  \
  template Tensor<T> init_prompt(const Tensor<T>&, std::size_t, PromptInit, std::uint64_t,        \
                                 double);                                                         \
  template DeptParams<T> init_dept(const Backbone<T>&, std::size_t, std::size_t, double,          \
                                   std::uint64_t, PromptInit);                                    \
  template ComposedInput<T> compose_vanilla(const Backbone<T>&, const PromptParams<T>&,           \
                                            const TokenBatch&);                                   \
  template ComposedInput<T> compose_dept(const Backbone<T>&, const DeptParams<T>&,                \
                                         const TokenBatch&);                                      \
  template PeftVariant<T> transfer_init(const PeftVariant<T>&, const Checkpoint&);

DEPT_INSTANTIATE_PEFT(float)
DEPT_INSTANTIATE_PEFT(double)

}  // namespace dept
