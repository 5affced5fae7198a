#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dept/checkpoint.hpp"
#include "dept/tensor.hpp"

namespace dept {

inline constexpr std::int32_t kPadId = 0;

struct BackboneConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 64;     // s
  std::size_t max_prompt_len = 100; // upper bound on prepended virtual tokens

  void validate() const;
  std::size_t position_rows() const { return max_prompt_len + max_seq_len; }
  // 4d^2 + 2 d d_ff + 9d + d_ff: qkv/out projections, two FFN matrices,
  // their biases and two layer norms.
  std::size_t params_per_layer() const;

  bool operator==(const BackboneConfig&) const = default;
};

// Right-padded batch of token sequences, flattened row-major.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;

  static TokenBatch from_sequences(const std::vector<std::vector<std::int32_t>>& seqs);

  std::span<const std::int32_t> row(std::size_t b) const {
    return std::span<const std::int32_t>(ids).subspan(b * length, length);
  }
  // Number of tokens before the first pad in row b.
  std::size_t row_length(std::size_t b) const;
  std::vector<std::uint8_t> pad_mask() const;
};

struct ParamCounts {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::size_t total() const { return trainable + frozen; }
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct LayerWeights {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> w_qkv, b_qkv;  // [d x 3d], [3d]
  Tensor<T> w_out, b_out;  // [d x d], [d]
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w_ff1, b_ff1;  // [d x d_ff], [d_ff]
  Tensor<T> w_ff2, b_ff2;  // [d_ff x d], [d]
};

// Pre-norm decoder-only transformer with learned absolute positions and an
// output head tied to the token embedding. Positions cover prompt + text, so
// a prepended prompt of length m occupies positions 0..m-1.
template <typename T>
class Backbone {
 public:
  static Backbone init(const BackboneConfig& cfg, std::uint64_t seed);
  static Backbone from_checkpoint(const Checkpoint& ckpt);

  const BackboneConfig& config() const { return cfg_; }
  const Tensor<T>& token_embedding() const { return token_embedding_; }
  const Tensor<T>& position_embedding() const { return position_embedding_; }
  const std::vector<LayerWeights<T>>& layers() const { return layers_; }

  // Token lookup: [B x n x d].
  Tensor<T> embed(const TokenBatch& ids) const;

  // Logits [B x n x V] for plain token input. Requires n <= max_seq_len.
  Tensor<T> forward_ids(const TokenBatch& ids) const;

  // Logits [B x n x V] for composed embeddings [B x n x d] whose first
  // prompt_len positions are virtual tokens. key_is_pad has B*n entries
  // (or is empty).
  Tensor<T> forward_embeds(const Tensor<T>& embeds, std::size_t prompt_len,
                           std::span<const std::uint8_t> key_is_pad = {}) const;

  // Final normalised hidden states [B*n x d]; forward_embeds without the head.
  Tensor<T> hidden_states(const Tensor<T>& embeds, std::span<const std::uint8_t> key_is_pad) const;

  // Logits [rows.size() x V] for selected rows of hidden_states().
  Tensor<T> logits_at(const Tensor<T>& hidden, std::span<const std::int32_t> rows) const;

  void freeze();
  void unfreeze();
  bool frozen() const { return frozen_; }

  ParamCounts count_params() const;
  std::vector<NamedTensor<T>> named_parameters() const;
  std::vector<Tensor<T>> parameters() const;

  // Checkpoints are always 32-bit.
  Checkpoint to_checkpoint() const;

  // Same weights in another precision (used for 64-bit gradient checks).
  template <typename U>
  Backbone<U> cast() const;

 private:
  template <typename U>
  friend class Backbone;

  BackboneConfig cfg_;
  Tensor<T> token_embedding_;
  Tensor<T> position_embedding_;
  std::vector<LayerWeights<T>> layers_;
  Tensor<T> lnf_gamma_, lnf_beta_;
  bool frozen_ = false;
};

extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace dept
