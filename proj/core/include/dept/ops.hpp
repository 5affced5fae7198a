#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "dept/tensor.hpp"

// Differentiable operations over Tensor<T>. Every op validates shapes
// eagerly and throws ShapeError naming the offending shapes. No implicit
// broadcasting: the only row-wise expansion is add_bias.
namespace dept::ops {

// [p x q] . [q x t] -> [p x t]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// [p x q] . [t x q]^T -> [p x t]; used for the tied output head.
template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

// x[..., d] + bias[d] on every row.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// Softmax over the last axis, stabilised by subtracting the row maximum.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

// Per-row normalisation over the last axis (biased variance), then affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// Elementwise map with a caller-supplied derivative. Mostly for tests.
template <typename T>
Tensor<T> elementwise(const Tensor<T>& x, std::function<T(T)> fn, std::function<T(T)> derivative);

// Row gather: out[i] = table[ids[i]]. Backward scatter-adds into the table.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids);

// x[b, i, :] += table[i, :] for i < n, every batch item b. x is [B x n x d],
// table is [R x d] with R >= n.
template <typename T>
Tensor<T> add_position_rows(const Tensor<T>& x, const Tensor<T>& table);

// [m x d] prompt broadcast over the batch and prepended to x [B x n x d].
template <typename T>
Tensor<T> prepend_rows(const Tensor<T>& prompt, const Tensor<T>& x);

// Multi-head causal self-attention over fused projections.
// qkv is [B*n x 3d] laid out as [q | k | v]; returns [B*n x d].
// key_is_pad (length B*n, or empty) hides padded keys from every query.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& qkv, std::size_t batch, std::size_t seq_len,
                           std::size_t n_heads, std::span<const std::uint8_t> key_is_pad);

// Mean negative log-likelihood over positions whose mask entry is non-zero.
// An empty mask means every position counts.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask = {});

}  // namespace dept::ops
