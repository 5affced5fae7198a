#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "dept/backbone.hpp"
#include "dept/checkpoint.hpp"
#include "dept/tensor.hpp"

namespace dept {

enum class VariantTag { kVanillaPT, kDePT };
enum class PromptInit { kRandomGaussian, kSampleVocabRows };

std::string to_string(VariantTag tag);
std::string to_string(PromptInit init);
VariantTag parse_variant_tag(const std::string& s);
PromptInit parse_prompt_init(const std::string& s);

inline constexpr double kDefaultInitSigma = 0.02;
// Rows eligible for sample-vocab-rows initialisation.
inline constexpr std::size_t kPromptInitTopVocab = 5000;

// (m, r) under the budget l*d = m*d + (s + d)*r, with r rounded down when the
// split is not exact.
struct BudgetSolution {
  std::size_t m = 0;
  std::size_t r = 0;
  std::size_t trainable_params = 0;
  std::size_t budget = 0;
  std::size_t slack = 0;
};

BudgetSolution solve_budget(std::size_t l, std::size_t d, std::size_t s, std::size_t m);

template <typename T>
struct PromptParams {
  Tensor<T> prompt;  // [l x d]
  std::size_t length() const { return prompt.defined() ? prompt.dim(0) : 0; }
};

// Shorter prompt [m x d] plus the low-rank embedding update A [s x r] . B [r x d].
// Either part may be absent (m == 0 or r == 0), never both.
template <typename T>
struct DeptParams {
  Tensor<T> prompt;
  Tensor<T> lowrank_a;
  Tensor<T> lowrank_b;
  std::size_t m = 0;
  std::size_t r = 0;
  std::size_t s = 0;
  std::size_t d = 0;

  // A . B as a graph node, [s x d]. Requires r > 0.
  Tensor<T> delta() const;
};

template <typename T>
struct ComposedInput {
  Tensor<T> embeds;  // [B x (prompt_len + n) x d]
  std::size_t prompt_len = 0;
  std::vector<std::uint8_t> key_is_pad;  // B * (prompt_len + n)
  // Flat row (b * composed_len + position) of each example's last real token.
  std::vector<std::int32_t> last_rows;
};

template <typename T>
Tensor<T> init_prompt(const Tensor<T>& embedding_table, std::size_t length, PromptInit policy,
                      std::uint64_t seed, double sigma = kDefaultInitSigma);

template <typename T>
DeptParams<T> init_dept(const Backbone<T>& backbone, std::size_t m, std::size_t r, double sigma,
                        std::uint64_t seed, PromptInit prompt_policy = PromptInit::kSampleVocabRows);

template <typename T>
ComposedInput<T> compose_vanilla(const Backbone<T>& backbone, const PromptParams<T>& params,
                                 const TokenBatch& ids);

template <typename T>
ComposedInput<T> compose_dept(const Backbone<T>& backbone, const DeptParams<T>& params,
                              const TokenBatch& ids);

template <typename T>
class PeftVariant {
 public:
  static PeftVariant vanilla(PromptParams<T> params, double alpha1);
  static PeftVariant dept(DeptParams<T> params, double alpha1, double alpha2,
                          std::size_t budget_length);

  VariantTag tag() const { return tag_; }
  double alpha1() const { return alpha1_; }
  double alpha2() const { return alpha2_; }
  void set_learning_rates(double alpha1, double alpha2);

  const PromptParams<T>& prompt_params() const;
  const DeptParams<T>& dept_params() const;

  // Number of prepended virtual tokens (l or m).
  std::size_t prompt_length() const;
  std::size_t rank() const;
  // The vanilla budget length l this variant was sized against.
  std::size_t budget_length() const { return budget_length_; }
  std::size_t trainable_params() const;

  ComposedInput<T> compose(const Backbone<T>& backbone, const TokenBatch& ids) const;

  // Optimizer groups: the prompt (alpha1) and the low-rank pair (alpha2).
  std::vector<Tensor<T>> prompt_group() const;
  std::vector<Tensor<T>> lowrank_group() const;
  std::vector<NamedTensor<T>> named_tensors() const;

  Checkpoint to_checkpoint() const;
  static PeftVariant from_checkpoint(const Checkpoint& ckpt, double alpha1, double alpha2);

  // Independent copy with fresh leaf tensors.
  PeftVariant clone() const;
  // Independent copy with gradients disabled, for inference.
  PeftVariant detached() const;

 private:
  VariantTag tag_ = VariantTag::kVanillaPT;
  std::variant<PromptParams<T>, DeptParams<T>> params_;
  double alpha1_ = 0.0;
  double alpha2_ = 0.0;
  std::size_t budget_length_ = 0;
};

template <typename T>
std::size_t trainable_params(const PeftVariant<T>& v) {
  return v.trainable_params();
}

// Copies every PEFT tensor of `source` into a fresh copy of `target`.
// Shapes must match exactly; learning rates stay those of `target`.
template <typename T>
PeftVariant<T> transfer_init(const PeftVariant<T>& target, const Checkpoint& source);

extern template class PeftVariant<float>;
extern template class PeftVariant<double>;

}  // namespace dept
