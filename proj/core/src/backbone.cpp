#include "dept/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dept/ops.hpp"

namespace dept {
namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
Tensor<T> filled(Shape shape, T value) {
  std::vector<T> data(shape_numel(shape), value);
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename U, typename T>
Tensor<U> convert(const Tensor<T>& t) {
  return Tensor<U>(t.shape(), std::vector<U>(t.data().begin(), t.data().end()), t.requires_grad());
}

}  // namespace

void BackboneConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("backbone: vocab_size must be at least 2");
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0) {
    throw ConfigError("backbone: d_model, n_layers, n_heads and d_ff must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("backbone: d_model " + std::to_string(d_model) +
                      " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (max_seq_len < 1) throw ConfigError("backbone: max_seq_len must be >= 1");
}

std::size_t BackboneConfig::params_per_layer() const {
  return 4 * d_model * d_model + 2 * d_model * d_ff + 9 * d_model + d_ff;
}

TokenBatch TokenBatch::from_sequences(const std::vector<std::vector<std::int32_t>>& seqs) {
  if (seqs.empty()) throw DegenerateInputError("token batch is empty");
  TokenBatch out;
  out.batch = seqs.size();
  for (const auto& s : seqs) out.length = std::max(out.length, s.size());
  if (out.length == 0) throw DegenerateInputError("token batch has only empty sequences");
  out.ids.assign(out.batch * out.length, kPadId);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    std::copy(seqs[b].begin(), seqs[b].end(), out.ids.begin() + b * out.length);
  }
  return out;
}

std::size_t TokenBatch::row_length(std::size_t b) const {
  auto r = row(b);
  return static_cast<std::size_t>(std::find(r.begin(), r.end(), kPadId) - r.begin());
}

std::vector<std::uint8_t> TokenBatch::pad_mask() const {
  std::vector<std::uint8_t> mask(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = ids[i] == kPadId;
  return mask;
}

template <typename T>
Backbone<T> Backbone<T>::init(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg.d_model;
  const double out_std = kInitStd / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  Backbone b;
  b.cfg_ = cfg;
  b.token_embedding_ = normal_tensor<T>({cfg.vocab_size, d}, kInitStd, rng);
  b.position_embedding_ = normal_tensor<T>({cfg.position_rows(), d}, kInitStd, rng);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights<T> w;
    w.ln1_gamma = filled<T>({d}, T{1});
    w.ln1_beta = filled<T>({d}, T{0});
    w.w_qkv = normal_tensor<T>({d, 3 * d}, kInitStd, rng);
    w.b_qkv = filled<T>({3 * d}, T{0});
    w.w_out = normal_tensor<T>({d, d}, out_std, rng);
    w.b_out = filled<T>({d}, T{0});
    w.ln2_gamma = filled<T>({d}, T{1});
    w.ln2_beta = filled<T>({d}, T{0});
    w.w_ff1 = normal_tensor<T>({d, cfg.d_ff}, kInitStd, rng);
    w.b_ff1 = filled<T>({cfg.d_ff}, T{0});
    w.w_ff2 = normal_tensor<T>({cfg.d_ff, d}, out_std, rng);
    w.b_ff2 = filled<T>({d}, T{0});
    b.layers_.push_back(std::move(w));
  }
  b.lnf_gamma_ = filled<T>({d}, T{1});
  b.lnf_beta_ = filled<T>({d}, T{0});
  b.unfreeze();
  return b;
}

template <typename T>
std::vector<NamedTensor<T>> Backbone<T>::named_parameters() const {
  std::vector<NamedTensor<T>> out;
  out.push_back({"token_embedding", token_embedding_});
  out.push_back({"position_embedding", position_embedding_});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& w = layers_[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gamma", w.ln1_gamma});
    out.push_back({p + "ln1.beta", w.ln1_beta});
    out.push_back({p + "attn.w_qkv", w.w_qkv});
    out.push_back({p + "attn.b_qkv", w.b_qkv});
    out.push_back({p + "attn.w_out", w.w_out});
    out.push_back({p + "attn.b_out", w.b_out});
    out.push_back({p + "ln2.gamma", w.ln2_gamma});
    out.push_back({p + "ln2.beta", w.ln2_beta});
    out.push_back({p + "ffn.w_in", w.w_ff1});
    out.push_back({p + "ffn.b_in", w.b_ff1});
    out.push_back({p + "ffn.w_out", w.w_ff2});
    out.push_back({p + "ffn.b_out", w.b_ff2});
  }
  out.push_back({"final_norm.gamma", lnf_gamma_});
  out.push_back({"final_norm.beta", lnf_beta_});
  return out;
}

template <typename T>
std::vector<Tensor<T>> Backbone<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& nt : named_parameters()) out.push_back(nt.tensor);
  return out;
}

template <typename T>
void Backbone<T>::freeze() {
  for (auto& t : parameters()) t.set_requires_grad(false);
  frozen_ = true;
}

template <typename T>
void Backbone<T>::unfreeze() {
  for (auto& t : parameters()) t.set_requires_grad(true);
  frozen_ = false;
}

template <typename T>
ParamCounts Backbone<T>::count_params() const {
  ParamCounts c;
  for (const auto& t : parameters()) (t.requires_grad() ? c.trainable : c.frozen) += t.numel();
  return c;
}

template <typename T>
Tensor<T> Backbone<T>::embed(const TokenBatch& ids) const {
  auto rows = ops::embedding_lookup(token_embedding_, std::span<const std::int32_t>(ids.ids));
  return ops::reshape(rows, {ids.batch, ids.length, cfg_.d_model});
}

template <typename T>
Tensor<T> Backbone<T>::forward_ids(const TokenBatch& ids) const {
  if (ids.length > cfg_.max_seq_len) {
    throw LengthError("forward_ids: sequence length " + std::to_string(ids.length) +
                      " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  }
  const auto mask = ids.pad_mask();
  return forward_embeds(embed(ids), 0, mask);
}

template <typename T>
Tensor<T> Backbone<T>::hidden_states(const Tensor<T>& embeds,
                                     std::span<const std::uint8_t> key_is_pad) const {
  if (embeds.rank() != 3 || embeds.dim(2) != cfg_.d_model) {
    throw ShapeError("backbone: expected embeddings [B x n x " + std::to_string(cfg_.d_model) +
                     "], got " + shape_string(embeds.shape()));
  }
  const std::size_t batch = embeds.dim(0), n = embeds.dim(1), d = cfg_.d_model;
  if (n > cfg_.position_rows()) {
    throw LengthError("backbone: composed length " + std::to_string(n) +
                      " exceeds the positional table (" + std::to_string(cfg_.position_rows()) +
                      " rows)");
  }
  const T eps = static_cast<T>(kLayerNormEps);
  auto x = ops::reshape(ops::add_position_rows(embeds, position_embedding_), {batch * n, d});
  for (const auto& w : layers_) {
    auto h = ops::layer_norm(x, w.ln1_gamma, w.ln1_beta, eps);
    auto qkv = ops::add_bias(ops::matmul(h, w.w_qkv), w.b_qkv);
    auto att = ops::causal_attention(qkv, batch, n, cfg_.n_heads, key_is_pad);
    x = ops::add(x, ops::add_bias(ops::matmul(att, w.w_out), w.b_out));
    h = ops::layer_norm(x, w.ln2_gamma, w.ln2_beta, eps);
    auto ff = ops::gelu(ops::add_bias(ops::matmul(h, w.w_ff1), w.b_ff1));
    x = ops::add(x, ops::add_bias(ops::matmul(ff, w.w_ff2), w.b_ff2));
  }
  return ops::layer_norm(x, lnf_gamma_, lnf_beta_, eps);
}

template <typename T>
Tensor<T> Backbone<T>::forward_embeds(const Tensor<T>& embeds, std::size_t prompt_len,
                                      std::span<const std::uint8_t> key_is_pad) const {
  if (embeds.rank() == 3 && prompt_len > embeds.dim(1)) {
    throw LengthError("forward_embeds: prompt length " + std::to_string(prompt_len) +
                      " exceeds composed length " + std::to_string(embeds.dim(1)));
  }
  auto hidden = hidden_states(embeds, key_is_pad);
  auto logits = ops::matmul_transposed(hidden, token_embedding_);
  return ops::reshape(logits, {embeds.dim(0), embeds.dim(1), cfg_.vocab_size});
}

template <typename T>
Tensor<T> Backbone<T>::logits_at(const Tensor<T>& hidden, std::span<const std::int32_t> rows) const {
  auto picked = ops::embedding_lookup(hidden, rows);
  return ops::matmul_transposed(picked, token_embedding_);
}

template <typename T>
Checkpoint Backbone<T>::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.add("backbone.config", {7},
           {static_cast<float>(cfg_.vocab_size), static_cast<float>(cfg_.d_model),
            static_cast<float>(cfg_.n_layers), static_cast<float>(cfg_.n_heads),
            static_cast<float>(cfg_.d_ff), static_cast<float>(cfg_.max_seq_len),
            static_cast<float>(cfg_.max_prompt_len)});
  for (const auto& nt : named_parameters()) ckpt.add(nt.name, nt.tensor);
  return ckpt;
}

template <typename T>
Backbone<T> Backbone<T>::from_checkpoint(const Checkpoint& ckpt) {
  const auto& meta = ckpt.at("backbone.config");
  if (meta.values.size() != 7) throw CheckpointError("backbone.config must hold 7 values");
  BackboneConfig cfg;
  auto field = [&](std::size_t i) { return static_cast<std::size_t>(meta.values[i]); };
  cfg.vocab_size = field(0);
  cfg.d_model = field(1);
  cfg.n_layers = field(2);
  cfg.n_heads = field(3);
  cfg.d_ff = field(4);
  cfg.max_seq_len = field(5);
  cfg.max_prompt_len = field(6);
  cfg.validate();

  // Initialise for shapes and names, then overwrite every value.
  Backbone b = init(cfg, 0);
  for (auto& nt : b.named_parameters()) {
    const auto& src = ckpt.at(nt.name);
    if (src.shape != nt.tensor.shape()) {
      throw CheckpointError("tensor '" + nt.name + "' has shape " + shape_string(src.shape) +
                            ", expected " + shape_string(nt.tensor.shape()));
    }
    auto dst = nt.tensor.mutable_data();
    std::transform(src.values.begin(), src.values.end(), dst.begin(),
                   [](float v) { return static_cast<T>(v); });
  }
  b.freeze();
  return b;
}

template <typename T>
template <typename U>
Backbone<U> Backbone<T>::cast() const {
  Backbone<U> out;
  out.cfg_ = cfg_;
  out.token_embedding_ = convert<U>(token_embedding_);
  out.position_embedding_ = convert<U>(position_embedding_);
  for (const auto& w : layers_) {
    LayerWeights<U> c;
    c.ln1_gamma = convert<U>(w.ln1_gamma);
    c.ln1_beta = convert<U>(w.ln1_beta);
    c.w_qkv = convert<U>(w.w_qkv);
    c.b_qkv = convert<U>(w.b_qkv);
    c.w_out = convert<U>(w.w_out);
    c.b_out = convert<U>(w.b_out);
    c.ln2_gamma = convert<U>(w.ln2_gamma);
    c.ln2_beta = convert<U>(w.ln2_beta);
    c.w_ff1 = convert<U>(w.w_ff1);
    c.b_ff1 = convert<U>(w.b_ff1);
    c.w_ff2 = convert<U>(w.w_ff2);
    c.b_ff2 = convert<U>(w.b_ff2);
    out.layers_.push_back(std::move(c));
  }
  out.lnf_gamma_ = convert<U>(lnf_gamma_);
  out.lnf_beta_ = convert<U>(lnf_beta_);
  out.frozen_ = frozen_;
  return out;
}

template class Backbone<float>;
template class Backbone<double>;
template Backbone<double> Backbone<float>::cast<double>() const;
template Backbone<float> Backbone<float>::cast<float>() const;
template Backbone<float> Backbone<double>::cast<float>() const;
template Backbone<double> Backbone<double>::cast<double>() const;

}  // namespace dept
