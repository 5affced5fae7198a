#include "dept/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dept::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;
template <typename T>
using Node = detail::Node<T>;

template <typename T>
ConstMap<T> as_matrix(std::span<const T> s, std::size_t rows, std::size_t cols) {
  return ConstMap<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
MutMap<T> as_matrix(std::span<T> s, std::size_t rows, std::size_t cols) {
  return MutMap<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(s));
  }
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

std::size_t last_dim(const Shape& s) { return s.back(); }

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const std::size_t p = a.dim(0), q = a.dim(1), t = b.dim(1);
  std::vector<T> out(p * t);
  as_matrix<T>(std::span<T>(out), p, t).noalias() =
      as_matrix(a.data(), p, q) * as_matrix(b.data(), q, t);
  return Tensor<T>::from_op({p, t}, std::move(out), {a, b}, [p, q, t](Node<T>& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    auto dout = as_matrix(std::span<const T>(self.grad), p, t);
    if (na.requires_grad) {
      as_matrix(na.grad_buffer(), p, q).noalias() +=
          dout * as_matrix(std::span<const T>(nb.data), q, t).transpose();
    }
    if (nb.requires_grad) {
      as_matrix(nb.grad_buffer(), q, t).noalias() +=
          as_matrix(std::span<const T>(na.data), p, q).transpose() * dout;
    }
  });
}

template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_transposed: shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const std::size_t p = a.dim(0), q = a.dim(1), t = b.dim(0);
  std::vector<T> out(p * t);
  as_matrix<T>(std::span<T>(out), p, t).noalias() =
      as_matrix(a.data(), p, q) * as_matrix(b.data(), t, q).transpose();
  return Tensor<T>::from_op({p, t}, std::move(out), {a, b}, [p, q, t](Node<T>& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    auto dout = as_matrix(std::span<const T>(self.grad), p, t);
    if (na.requires_grad) {
      as_matrix(na.grad_buffer(), p, q).noalias() +=
          dout * as_matrix(std::span<const T>(nb.data), t, q);
    }
    if (nb.requires_grad) {
      as_matrix(nb.grad_buffer(), t, q).noalias() +=
          dout.transpose() * as_matrix(std::span<const T>(na.data), p, q);
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  std::vector<T> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& parent : self.parents) {
      if (!parent->requires_grad) continue;
      auto g = parent->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mul");
  std::vector<T> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    // Read both operands before writing: a and b may be the same node.
    const std::vector<T> va = na.data;
    const std::vector<T> vb = nb.data;
    if (na.requires_grad) {
      auto g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * vb[i];
    }
    if (nb.requires_grad) {
      auto g = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * va[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v *= factor;
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [factor](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || bias.dim(0) != last_dim(x.shape())) {
    throw ShapeError("add_bias: shape mismatch " + shape_string(x.shape()) + " vs " +
                     shape_string(bias.shape()));
  }
  const std::size_t d = bias.dim(0);
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) row[j] += b[j];
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), {x, bias}, [rows, d](Node<T>& self) {
    auto& nx = *self.parents[0];
    auto& nb = *self.parents[1];
    if (nx.requires_grad) {
      auto g = nx.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (nb.requires_grad) {
      auto g = nb.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* row = self.grad.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) g[j] += row[j];
      }
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = std::accumulate(x.data().begin(), x.data().end(), T{0});
  return Tensor<T>::from_op({1}, {total}, {x}, [](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    const T seed = self.grad[0];
    for (T& v : g) v += seed;
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                     shape_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return Tensor<T>::from_op(std::move(shape), std::move(out), {x}, [](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t n = last_dim(x.shape());
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = in.data() + r * n;
    T* dst = out.data() + r * n;
    const T mx = *std::max_element(src, src + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      dst[j] = std::exp(src[j] - mx);
      z += dst[j];
    }
    for (std::size_t j = 0; j < n; ++j) dst[j] /= z;
  }
  std::vector<T> saved = out;
  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x}, [rows, n, y = std::move(saved)](Node<T>& self) {
        auto g = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* yr = y.data() + r * n;
          const T* dy = self.grad.data() + r * n;
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += dy[j] * yr[j];
          for (std::size_t j = 0; j < n; ++j) g[r * n + j] += yr[j] * (dy[j] - dot);
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = last_dim(x.shape());
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
    throw ShapeError("layer_norm: shape mismatch " + shape_string(x.shape()) + " vs gamma " +
                     shape_string(gamma.shape()) + ", beta " + shape_string(beta.shape()));
  }
  if (!(eps > T{0})) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  auto in = x.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = in.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += src[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (src[j] - mean) * (src[j] - mean);
    var /= static_cast<T>(d);
    const T inv = T{1} / std::sqrt(var + eps);
    rstd[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (src[j] - mean) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gm[j] + bt[j];
    }
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        auto& nx = *self.parents[0];
        auto& ng = *self.parents[1];
        auto& nb = *self.parents[2];
        const T* dy = self.grad.data();
        if (ng.requires_grad) {
          auto g = ng.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += dy[r * d + j] * xhat[r * d + j];
        }
        if (nb.requires_grad) {
          auto g = nb.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += dy[r * d + j];
        }
        if (nx.requires_grad) {
          auto g = nx.grad_buffer();
          const T* gm = ng.data.data();
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = dy[r * d + j] * gm[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + j];
            }
            mean_dh /= static_cast<T>(d);
            mean_dh_h /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = dy[r * d + j] * gm[j];
              g[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = in[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& nx = *self.parents[0];
    auto g = nx.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = nx.data[i];
      const T u = kC * (v + kA * v * v * v);
      const T th = std::tanh(u);
      const T du = kC * (T(1) + T(3) * kA * v * v);
      const T deriv = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
      g[i] += self.grad[i] * deriv;
    }
  });
}

template <typename T>
Tensor<T> elementwise(const Tensor<T>& x, std::function<T(T)> fn, std::function<T(T)> derivative) {
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(in[i]);
  return Tensor<T>::from_op(x.shape(), std::move(out), {x},
                            [derivative = std::move(derivative)](Node<T>& self) {
                              auto& nx = *self.parents[0];
                              auto g = nx.grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i)
                                g[i] += self.grad[i] * derivative(nx.data[i]);
                            });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_rank(table.shape(), 2, "embedding_lookup");
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  for (std::int32_t id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " out of range for " +
                       std::to_string(vocab) + " rows");
    }
  }
  std::vector<T> out(idx.size() * d);
  auto src = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(src.data() + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
  }
  const std::size_t n = idx.size();
  return Tensor<T>::from_op({n, d}, std::move(out), {table},
                            [d, idx = std::move(idx)](Node<T>& self) {
                              auto g = self.parents[0]->grad_buffer();
                              for (std::size_t i = 0; i < idx.size(); ++i) {
                                T* dst = g.data() + static_cast<std::size_t>(idx[i]) * d;
                                const T* row = self.grad.data() + i * d;
                                for (std::size_t j = 0; j < d; ++j) dst[j] += row[j];
                              }
                            });
}

template <typename T>
Tensor<T> add_position_rows(const Tensor<T>& x, const Tensor<T>& table) {
  require_rank(x.shape(), 3, "add_position_rows");
  require_rank(table.shape(), 2, "add_position_rows");
  const std::size_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (table.dim(1) != d) {
    throw ShapeError("add_position_rows: shape mismatch " + shape_string(x.shape()) + " vs " +
                     shape_string(table.shape()));
  }
  if (table.dim(0) < n) {
    throw LengthError("add_position_rows: sequence length " + std::to_string(n) +
                      " exceeds the " + std::to_string(table.dim(0)) + " available rows");
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto tb = table.data();
  for (std::size_t b = 0; b < batch; ++b) {
    T* dst = out.data() + b * n * d;
    for (std::size_t k = 0; k < n * d; ++k) dst[k] += tb[k];
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), {x, table},
                            [batch, n, d](Node<T>& self) {
                              auto& nx = *self.parents[0];
                              auto& nt = *self.parents[1];
                              if (nx.requires_grad) {
                                auto g = nx.grad_buffer();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                              }
                              if (nt.requires_grad) {
                                auto g = nt.grad_buffer();
                                for (std::size_t b = 0; b < batch; ++b) {
                                  const T* src = self.grad.data() + b * n * d;
                                  for (std::size_t k = 0; k < n * d; ++k) g[k] += src[k];
                                }
                              }
                            });
}

template <typename T>
Tensor<T> prepend_rows(const Tensor<T>& prompt, const Tensor<T>& x) {
  require_rank(prompt.shape(), 2, "prepend_rows");
  require_rank(x.shape(), 3, "prepend_rows");
  const std::size_t m = prompt.dim(0), batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (prompt.dim(1) != d) {
    throw ShapeError("prepend_rows: shape mismatch " + shape_string(prompt.shape()) + " vs " +
                     shape_string(x.shape()));
  }
  const std::size_t total = m + n;
  std::vector<T> out(batch * total * d);
  auto p = prompt.data();
  auto in = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    T* dst = out.data() + b * total * d;
    std::copy(p.begin(), p.end(), dst);
    std::copy_n(in.data() + b * n * d, n * d, dst + m * d);
  }
  return Tensor<T>::from_op({batch, total, d}, std::move(out), {prompt, x},
                            [m, batch, n, d, total](Node<T>& self) {
                              auto& np = *self.parents[0];
                              auto& nx = *self.parents[1];
                              if (np.requires_grad) {
                                auto g = np.grad_buffer();
                                for (std::size_t b = 0; b < batch; ++b) {
                                  const T* src = self.grad.data() + b * total * d;
                                  for (std::size_t k = 0; k < m * d; ++k) g[k] += src[k];
                                }
                              }
                              if (nx.requires_grad) {
                                auto g = nx.grad_buffer();
                                for (std::size_t b = 0; b < batch; ++b) {
                                  const T* src = self.grad.data() + b * total * d + m * d;
                                  T* dst = g.data() + b * n * d;
                                  for (std::size_t k = 0; k < n * d; ++k) dst[k] += src[k];
                                }
                              }
                            });
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& qkv, std::size_t batch, std::size_t seq_len,
                           std::size_t n_heads, std::span<const std::uint8_t> key_is_pad) {
  require_rank(qkv.shape(), 2, "causal_attention");
  const std::size_t rows = batch * seq_len;
  if (qkv.dim(0) != rows || qkv.dim(1) % 3 != 0 || n_heads == 0 ||
      (qkv.dim(1) / 3) % n_heads != 0) {
    throw ShapeError("causal_attention: shape " + shape_string(qkv.shape()) +
                     " incompatible with batch " + std::to_string(batch) + ", length " +
                     std::to_string(seq_len) + ", heads " + std::to_string(n_heads));
  }
  if (!key_is_pad.empty() && key_is_pad.size() != rows) {
    throw ShapeError("causal_attention: pad mask has " + std::to_string(key_is_pad.size()) +
                     " entries for " + std::to_string(rows) + " rows");
  }
  const std::size_t d = qkv.dim(1) / 3;
  const std::size_t dh = d / n_heads;
  const std::size_t stride = 3 * d;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<std::uint8_t> pad(key_is_pad.begin(), key_is_pad.end());
  if (pad.empty()) pad.assign(rows, 0);

  // probs[((b * H + h) * n + i) * n + j], zero where j > i or j is padding.
  std::vector<T> probs(batch * n_heads * seq_len * seq_len, T{0});
  std::vector<T> out(rows * d, T{0});
  const T* src = qkv.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* pb = probs.data() + (b * n_heads + h) * seq_len * seq_len;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const T* q = src + (b * seq_len + i) * stride + h * dh;
        T* p = pb + i * seq_len;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          if (pad[b * seq_len + j]) continue;
          const T* k = src + (b * seq_len + j) * stride + d + h * dh;
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += q[c] * k[c];
          p[j] = s * inv_sqrt;
          mx = std::max(mx, p[j]);
        }
        if (mx == -std::numeric_limits<T>::infinity()) continue;  // no visible key
        T z = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          if (pad[b * seq_len + j]) continue;
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        T* o = out.data() + (b * seq_len + i) * d + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          if (pad[b * seq_len + j]) continue;
          p[j] /= z;
          const T* v = src + (b * seq_len + j) * stride + 2 * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += p[j] * v[c];
        }
      }
    }
  }

  return Tensor<T>::from_op(
      {rows, d}, std::move(out), {qkv},
      [batch, seq_len, n_heads, d, dh, stride, inv_sqrt, probs = std::move(probs)](Node<T>& self) {
        auto& nq = *self.parents[0];
        const T* src = nq.data.data();
        T* g = nq.grad_buffer().data();
        const T* dout = self.grad.data();
        std::vector<T> dp(seq_len);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const T* pb = probs.data() + (b * n_heads + h) * seq_len * seq_len;
            for (std::size_t i = 0; i < seq_len; ++i) {
              const T* p = pb + i * seq_len;
              const T* go = dout + (b * seq_len + i) * d + h * dh;
              T dot = 0;
              for (std::size_t j = 0; j <= i; ++j) {
                dp[j] = 0;
                if (p[j] == T{0}) continue;
                const T* v = src + (b * seq_len + j) * stride + 2 * d + h * dh;
                T* gv = g + (b * seq_len + j) * stride + 2 * d + h * dh;
                T acc = 0;
                for (std::size_t c = 0; c < dh; ++c) {
                  acc += go[c] * v[c];
                  gv[c] += p[j] * go[c];
                }
                dp[j] = acc;
                dot += acc * p[j];
              }
              const T* q = src + (b * seq_len + i) * stride + h * dh;
              T* gq = g + (b * seq_len + i) * stride + h * dh;
              for (std::size_t j = 0; j <= i; ++j) {
                if (p[j] == T{0}) continue;
                const T ds = p[j] * (dp[j] - dot) * inv_sqrt;
                const T* k = src + (b * seq_len + j) * stride + d + h * dh;
                T* gk = g + (b * seq_len + j) * stride + d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  gq[c] += ds * k[c];
                  gk[c] += ds * q[c];
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask) {
  require_rank(logits.shape(), 2, "cross_entropy");
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(logits.shape()));
  }
  if (!mask.empty() && mask.size() != n) {
    throw ShapeError("cross_entropy: mask has " + std::to_string(mask.size()) +
                     " entries for logits " + shape_string(logits.shape()));
  }
  std::vector<std::uint8_t> active(n, 1);
  if (!mask.empty()) std::copy(mask.begin(), mask.end(), active.begin());
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!active[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) +
                       " out of range for vocabulary " + std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) throw DegenerateInputError("cross_entropy: every position is masked");

  std::vector<T> probs(n * vocab, T{0});
  auto in = logits.data();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!active[i]) continue;
    const T* row = in.data() + i * vocab;
    T* p = probs.data() + i * vocab;
    const T mx = *std::max_element(row, row + vocab);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] = std::exp(row[j] - mx);
      z += p[j];
    }
    total += std::log(z) + mx - row[targets[i]];
    for (std::size_t j = 0; j < vocab; ++j) p[j] /= z;
  }
  const T inv_count = T(1) / static_cast<T>(count);
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return Tensor<T>::from_op(
      {1}, {total * inv_count}, {logits},
      [n, vocab, inv_count, probs = std::move(probs), tgt = std::move(tgt),
       active = std::move(active)](Node<T>& self) {
        auto g = self.parents[0]->grad_buffer();
        const T seed = self.grad[0] * inv_count;
        for (std::size_t i = 0; i < n; ++i) {
          if (!active[i]) continue;
          const T* p = probs.data() + i * vocab;
          T* gr = g.data() + i * vocab;
          for (std::size_t j = 0; j < vocab; ++j) gr[j] += seed * p[j];
          gr[tgt[i]] -= seed;
        }
      });
}

#define DEPT_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> matmul_transposed(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> softmax(const Tensor<T>&);                                                  \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> gelu(const Tensor<T>&);                                                     \
  template Tensor<T> elementwise(const Tensor<T>&, std::function<T(T)>, std::function<T(T)>);    \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const std::int32_t>);          \
  template Tensor<T> add_position_rows(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> prepend_rows(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> causal_attention(const Tensor<T>&, std::size_t, std::size_t, std::size_t,   \
                                      std::span<const std::uint8_t>);                            \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>,              \
                                   std::span<const std::uint8_t>);

DEPT_INSTANTIATE_OPS(float)
DEPT_INSTANTIATE_OPS(double)

}  // namespace dept::ops
