// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Every op computes its forward result the same way
// whether or not a tape is active; tracing only adds a backward closure.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "btrans/tensor.hpp"

namespace btrans {

inline constexpr double kDefaultNormEps = 1e-6;

namespace detail {

template <typename T, typename... Ts>
GradTape<T>* tracing_tape(const Ts&... inputs) {
  GradTape<T>* tape = active_tape<T>();
  if (tape == nullptr) return nullptr;
  return ((inputs.requires_grad() || ...)) ? tape : nullptr;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
Tensor<T> traced_output(Shape shape, std::vector<T> data, GradTape<T>* tape) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (tape) out.set_requires_grad(true);
  return out;
}

// out[m x n] += a[m x k] * b[k x n]; i-k-j order keeps the inner loop unit-stride.
template <typename T>
void gemm_acc(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = out + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

}  // namespace detail

/// Standard matrix product of a[m x k] and b[k x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  detail::gemm_acc(a.ptr(), b.ptr(), out.data(), m, k, n);
  auto* tape = detail::tracing_tape<T>(a, b);
  auto result = detail::traced_output<T>({m, n}, std::move(out), tape);
  if (tape) {
    tape->record("matmul", {a.id(), b.id()}, result,
                 [sa = a.storage(), sb = b.storage(), ra = a.requires_grad(),
                  rb = b.requires_grad(), m, k, n](std::span<const T> g) {
                   if (ra) {
                     auto bt = detail::transpose(sb->data.data(), k, n);  // [n x k]
                     detail::gemm_acc(g.data(), bt.data(), sa->ensure_grad().data(), m, n, k);
                   }
                   if (rb) {
                     auto at = detail::transpose(sa->data.data(), m, k);  // [k x m]
                     detail::gemm_acc(at.data(), g.data(), sb->ensure_grad().data(), k, m, n);
                   }
                 });
  }
  return result;
}

/// x[..., k] times w[k x n] -> [..., n].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0))
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()));
  const std::size_t k = w.dim(0);
  auto out = matmul(x.reshape({x.numel() / k, k}), w);
  Shape shape = x.shape();
  shape.back() = w.dim(1);
  return out.reshape(std::move(shape));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.ptr()[i] + b.ptr()[i];
  auto* tape = detail::tracing_tape<T>(a, b);
  auto result = detail::traced_output<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record("add", {a.id(), b.id()}, result,
                 [sa = a.storage(), sb = b.storage(), ra = a.requires_grad(),
                  rb = b.requires_grad()](std::span<const T> g) {
                   if (ra) {
                     auto& ga = sa->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   }
                   if (rb) {
                     auto& gb = sb->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                   }
                 });
  }
  return result;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.ptr()[i] - b.ptr()[i];
  auto* tape = detail::tracing_tape<T>(a, b);
  auto result = detail::traced_output<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record("sub", {a.id(), b.id()}, result,
                 [sa = a.storage(), sb = b.storage(), ra = a.requires_grad(),
                  rb = b.requires_grad()](std::span<const T> g) {
                   if (ra) {
                     auto& ga = sa->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   }
                   if (rb) {
                     auto& gb = sb->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                   }
                 });
  }
  return result;
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.ptr()[i] * b.ptr()[i];
  auto* tape = detail::tracing_tape<T>(a, b);
  auto result = detail::traced_output<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record("mul", {a.id(), b.id()}, result,
                 [sa = a.storage(), sb = b.storage(), ra = a.requires_grad(),
                  rb = b.requires_grad()](std::span<const T> g) {
                   if (ra) {
                     auto& ga = sa->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sb->data[i];
                   }
                   if (rb) {
                     auto& gb = sb->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * sa->data[i];
                   }
                 });
  }
  return result;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.ptr()[i] * s;
  auto* tape = detail::tracing_tape<T>(a);
  auto result = detail::traced_output<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record("scale", {a.id()}, result, [sa = a.storage(), s](std::span<const T> g) {
      auto& ga = sa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return result;
}

/// Elementwise product with a constant (non-differentiable) vector.
template <typename T>
Tensor<T> mul_const(const Tensor<T>& a, std::span<const T> c) {
  if (c.size() != a.numel()) throw DimensionError("mul_const: size mismatch");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.ptr()[i] * c[i];
  auto* tape = detail::tracing_tape<T>(a);
  auto result = detail::traced_output<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record("mul_const", {a.id()}, result,
                 [sa = a.storage(), cv = std::vector<T>(c.begin(), c.end())](std::span<const T> g) {
                   auto& ga = sa->ensure_grad();
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * cv[i];
                 });
  }
  return result;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.ptr()[i]);
  auto* tape = detail::tracing_tape<T>(a);
  auto result = detail::traced_output<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record("exp", {a.id()}, result,
                 [sa = a.storage(), so = result.storage()](std::span<const T> g) {
                   auto& ga = sa->ensure_grad();
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * so->data[i];
                 });
  }
  return result;
}

/// Clamp to [lo, hi]; the gradient is zero wherever the bound is active.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(a.ptr()[i], lo), hi);
  auto* tape = detail::tracing_tape<T>(a);
  auto result = detail::traced_output<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record("clamp", {a.id()}, result, [sa = a.storage(), lo, hi](std::span<const T> g) {
      auto& ga = sa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = sa->data[i];
        if (v > lo && v < hi) ga[i] += g[i];
      }
    });
  }
  return result;
}

/// Elementwise minimum; ties route the gradient to `a`.
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "minimum");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.ptr()[i], b.ptr()[i]);
  auto* tape = detail::tracing_tape<T>(a, b);
  auto result = detail::traced_output<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record("minimum", {a.id(), b.id()}, result,
                 [sa = a.storage(), sb = b.storage(), ra = a.requires_grad(),
                  rb = b.requires_grad()](std::span<const T> g) {
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     const bool pick_a = sa->data[i] <= sb->data[i];
                     if (pick_a && ra) sa->ensure_grad()[i] += g[i];
                     if (!pick_a && rb) sb->ensure_grad()[i] += g[i];
                   }
                 });
  }
  return result;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = a.ptr()[i];
    out[i] = v / (T(1) + std::exp(-v));
  }
  auto* tape = detail::tracing_tape<T>(a);
  auto result = detail::traced_output<T>(a.shape(), std::move(out), tape);
  if (tape) {
    tape->record("silu", {a.id()}, result, [sa = a.storage()](std::span<const T> g) {
      auto& ga = sa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = sa->data[i];
        const T s = T(1) / (T(1) + std::exp(-v));
        ga[i] += g[i] * s * (T(1) + v * (T(1) - s));
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  auto* tape = detail::tracing_tape<T>(a);
  auto result = detail::traced_output<T>({1}, {acc}, tape);
  if (tape) {
    tape->record("sum", {a.id()}, result, [sa = a.storage()](std::span<const T> g) {
      auto& ga = sa->ensure_grad();
      for (auto& v : ga) v += g[0];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// sum_i w_i * a_i with constant weights (masked means, advantage weighting).
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& a, std::span<const T> w) {
  if (w.size() != a.numel()) throw DimensionError("weighted_sum: size mismatch");
  T acc = T(0);
  for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * a.ptr()[i];
  auto* tape = detail::tracing_tape<T>(a);
  auto result = detail::traced_output<T>({1}, {acc}, tape);
  if (tape) {
    tape->record("weighted_sum", {a.id()}, result,
                 [sa = a.storage(), wv = std::vector<T>(w.begin(), w.end())](std::span<const T> g) {
                   auto& ga = sa->ensure_grad();
                   for (std::size_t i = 0; i < wv.size(); ++i) ga[i] += g[0] * wv[i];
                 });
  }
  return result;
}

/// Numerically stable softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range");
  const std::size_t n = x.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  std::vector<T> out(x.numel());
  const T* in = x.ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = o * n * inner + c;
      T mx = in[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[base + i * inner]);
      T z = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(in[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= z;
    }
  }
  auto* tape = detail::tracing_tape<T>(x);
  auto result = detail::traced_output<T>(x.shape(), std::move(out), tape);
  if (tape) {
    tape->record("softmax", {x.id()}, result,
                 [sx = x.storage(), so = result.storage(), n, outer, inner](std::span<const T> g) {
                   auto& gx = sx->ensure_grad();
                   const auto& y = so->data;
                   for (std::size_t o = 0; o < outer; ++o) {
                     for (std::size_t c = 0; c < inner; ++c) {
                       const std::size_t base = o * n * inner + c;
                       T dot = T(0);
                       for (std::size_t i = 0; i < n; ++i)
                         dot += g[base + i * inner] * y[base + i * inner];
                       for (std::size_t i = 0; i < n; ++i) {
                         const std::size_t j = base + i * inner;
                         gx[j] += y[j] * (g[j] - dot);
                       }
                     }
                   }
                 });
  }
  return result;
}

/// RMS normalization over the last axis: x / sqrt(mean(x^2) + eps) * w.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& w, double eps = kDefaultNormEps) {
  if (w.rank() != 1 || x.rank() < 1 || x.shape().back() != w.dim(0))
    throw DimensionError("rms_norm: weight " + shape_str(w.shape()) + " vs input " +
                         shape_str(x.shape()));
  if (!(eps >= 0.0)) throw ContractError("rms_norm: eps must be non-negative");
  const std::size_t d = w.dim(0), rows = x.numel() / d;
  const T teps = static_cast<T>(eps);
  std::vector<T> out(x.numel());
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * d;
    T ss = T(0);
    for (std::size_t i = 0; i < d; ++i) ss += xr[i] * xr[i];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + teps);
    inv_rms[r] = inv;
    T* orow = out.data() + r * d;
    for (std::size_t i = 0; i < d; ++i) orow[i] = xr[i] * inv * w.ptr()[i];
  }
  auto* tape = detail::tracing_tape<T>(x, w);
  auto result = detail::traced_output<T>(x.shape(), std::move(out), tape);
  if (tape) {
    tape->record("rms_norm", {x.id(), w.id()}, result,
                 [sx = x.storage(), sw = w.storage(), rx = x.requires_grad(),
                  rw = w.requires_grad(), inv_rms = std::move(inv_rms), d,
                  rows](std::span<const T> g) {
                   std::vector<T> dn(d);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const T* xr = sx->data.data() + r * d;
                     const T* gr = g.data() + r * d;
                     const T inv = inv_rms[r];
                     T dot = T(0);
                     for (std::size_t i = 0; i < d; ++i) {
                       const T n = xr[i] * inv;
                       if (rw) sw->ensure_grad()[i] += gr[i] * n;
                       dn[i] = gr[i] * sw->data[i];
                       dot += dn[i] * n;
                     }
                     if (rx) {
                       T* gx = sx->ensure_grad().data() + r * d;
                       const T avg = dot / static_cast<T>(d);
                       for (std::size_t i = 0; i < d; ++i) gx[i] += inv * (dn[i] - xr[i] * inv * avg);
                     }
                   }
                 });
  }
  return result;
}

/// y[B, T, d] + (b[d] + z[B, 1, d]). `z` is an optional constant offset,
/// broadcast along the time axis; `b` is a learnable bias.
template <typename T>
Tensor<T> add_offset(const Tensor<T>& y, const Tensor<T>& b, const Tensor<T>* z = nullptr) {
  if (y.rank() != 3 || b.rank() != 1 || b.dim(0) != y.dim(2))
    throw DimensionError("add_offset: bias " + shape_str(b.shape()) + " vs " + shape_str(y.shape()));
  const std::size_t batch = y.dim(0), steps = y.dim(1), d = y.dim(2);
  if (z && (z->rank() != 3 || z->dim(0) != batch || z->dim(1) != 1 || z->dim(2) != d))
    throw DimensionError("add_offset: offset " + shape_str(z->shape()) + " vs " + shape_str(y.shape()));
  std::vector<T> offset(d);
  std::vector<T> out(y.numel());
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t i = 0; i < d; ++i)
      offset[i] = z ? b.ptr()[i] + z->ptr()[bi * d + i] : b.ptr()[i];
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t base = (bi * steps + t) * d;
      for (std::size_t i = 0; i < d; ++i) out[base + i] = y.ptr()[base + i] + offset[i];
    }
  }
  auto* tape = detail::tracing_tape<T>(y, b);
  auto result = detail::traced_output<T>(y.shape(), std::move(out), tape);
  if (tape) {
    tape->record("add_offset", {y.id(), b.id()}, result,
                 [sy = y.storage(), sb = b.storage(), ry = y.requires_grad(),
                  rb = b.requires_grad(), d](std::span<const T> g) {
                   if (ry) {
                     auto& gy = sy->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i];
                   }
                   if (rb) {
                     auto& gb = sb->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                   }
                 });
  }
  return result;
}

/// Row lookup: table[V x d], tokens (row-major batch x steps) -> [batch, steps, d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> tokens, std::size_t batch,
                    std::size_t steps) {
  if (table.rank() != 2 || tokens.size() != batch * steps)
    throw DimensionError("embedding: bad token batch");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(tokens.size() * d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int tok = tokens[i];
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab)
      throw IndexError("embedding: token id " + std::to_string(tok) + " outside vocabulary of " +
                       std::to_string(vocab));
    std::copy_n(table.ptr() + static_cast<std::size_t>(tok) * d, d, out.data() + i * d);
  }
  auto* tape = detail::tracing_tape<T>(table);
  auto result = detail::traced_output<T>({batch, steps, d}, std::move(out), tape);
  if (tape) {
    tape->record("embedding", {table.id()}, result,
                 [st = table.storage(), toks = std::vector<int>(tokens.begin(), tokens.end()),
                  d](std::span<const T> g) {
                   auto& gt = st->ensure_grad();
                   for (std::size_t i = 0; i < toks.size(); ++i) {
                     T* row = gt.data() + static_cast<std::size_t>(toks[i]) * d;
                     for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                   }
                 });
  }
  return result;
}

namespace detail {

// cos/sin for positions [offset, offset + steps) over half a head dimension.
// Computed in double so float and double models rotate by identical angles.
template <typename T>
void rope_tables(std::size_t offset, std::size_t steps, std::size_t half, double base,
                 std::vector<T>& cos_t, std::vector<T>& sin_t) {
  cos_t.resize(steps * half);
  sin_t.resize(steps * half);
  for (std::size_t t = 0; t < steps; ++t) {
    const double pos = static_cast<double>(offset + t);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / (2.0 * half));
      cos_t[t * half + i] = static_cast<T>(std::cos(pos * freq));
      sin_t[t * half + i] = static_cast<T>(std::sin(pos * freq));
    }
  }
}

template <typename T>
void rope_apply(const T* in, T* out, std::size_t batch, std::size_t steps, std::size_t heads,
                std::size_t head_dim, const std::vector<T>& cos_t, const std::vector<T>& sin_t,
                bool inverse) {
  const std::size_t half = head_dim / 2, d = heads * head_dim;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t base = (b * steps + t) * d + h * head_dim;
        for (std::size_t i = 0; i < half; ++i) {
          const T c = cos_t[t * half + i];
          const T s = inverse ? -sin_t[t * half + i] : sin_t[t * half + i];
          const T x1 = in[base + i], x2 = in[base + i + half];
          out[base + i] = x1 * c - x2 * s;
          out[base + i + half] = x1 * s + x2 * c;
        }
      }
}

}  // namespace detail

/// Rotary position encoding on x[B, T, heads*head_dim]; position of step t is offset + t.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::size_t heads, std::size_t offset, double base = 10000.0) {
  if (x.rank() != 3 || x.dim(2) % heads != 0 || (x.dim(2) / heads) % 2 != 0)
    throw DimensionError("rope: expected [B,T,heads*even] got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), steps = x.dim(1), head_dim = x.dim(2) / heads;
  std::vector<T> cos_t, sin_t;
  detail::rope_tables<T>(offset, steps, head_dim / 2, base, cos_t, sin_t);
  std::vector<T> out(x.numel());
  detail::rope_apply(x.ptr(), out.data(), batch, steps, heads, head_dim, cos_t, sin_t, false);
  auto* tape = detail::tracing_tape<T>(x);
  auto result = detail::traced_output<T>(x.shape(), std::move(out), tape);
  if (tape) {
    tape->record("rope", {x.id()}, result,
                 [sx = x.storage(), batch, steps, heads, head_dim, cos_t = std::move(cos_t),
                  sin_t = std::move(sin_t)](std::span<const T> g) {
                   std::vector<T> back(g.size());
                   detail::rope_apply(g.data(), back.data(), batch, steps, heads, head_dim, cos_t,
                                      sin_t, true);
                   auto& gx = sx->ensure_grad();
                   for (std::size_t i = 0; i < back.size(); ++i) gx[i] += back[i];
                 });
  }
  return result;
}

namespace detail {

// Multi-head causal attention on raw buffers. Query step i sits at absolute
// position q_offset + i and sees keys 0..q_offset+i. k/v rows for batch b start
// at b * kv_batch_stride. When `probs` is non-null it receives the attention
// weights laid out [B, H, Tq, Tk] (zeros where masked).
template <typename T>
void attention_kernel(const T* q, const T* k, const T* v, T* out, T* probs, std::size_t batch,
                      std::size_t tq, std::size_t tk, std::size_t heads, std::size_t head_dim,
                      std::size_t q_offset, std::size_t kv_batch_stride) {
  const std::size_t d = heads * head_dim;
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  std::vector<T> scores(tk);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* kb = k + b * kv_batch_stride;
    const T* vb = v + b * kv_batch_stride;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < tq; ++i) {
        const std::size_t visible = std::min(tk, q_offset + i + 1);
        const T* qi = q + (b * tq + i) * d + h * head_dim;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < visible; ++j) {
          const T* kj = kb + j * d + h * head_dim;
          T dot = T(0);
          for (std::size_t e = 0; e < head_dim; ++e) dot += qi[e] * kj[e];
          scores[j] = dot * scale;
          mx = std::max(mx, scores[j]);
        }
        T z = T(0);
        for (std::size_t j = 0; j < visible; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        T* oi = out + (b * tq + i) * d + h * head_dim;
        for (std::size_t e = 0; e < head_dim; ++e) oi[e] = T(0);
        for (std::size_t j = 0; j < visible; ++j) {
          const T p = scores[j] / z;
          scores[j] = p;
          const T* vj = vb + j * d + h * head_dim;
          for (std::size_t e = 0; e < head_dim; ++e) oi[e] += p * vj[e];
        }
        if (probs) {
          T* pi = probs + ((b * heads + h) * tq + i) * tk;
          for (std::size_t j = 0; j < tk; ++j) pi[j] = j < visible ? scores[j] : T(0);
        }
      }
    }
  }
}

}  // namespace detail

/// Causal multi-head attention. q[B, Tq, D], k/v[B, Tk, D]; query step i has
/// absolute position q_offset + i.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t heads, std::size_t q_offset = 0) {
  if (q.rank() != 3 || k.rank() != 3 || k.shape() != v.shape() || q.dim(0) != k.dim(0) ||
      q.dim(2) != k.dim(2) || q.dim(2) % heads != 0)
    throw DimensionError("causal_attention: incompatible shapes " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()));
  const std::size_t batch = q.dim(0), tq = q.dim(1), tk = k.dim(1), d = q.dim(2);
  const std::size_t head_dim = d / heads;
  auto* tape = detail::tracing_tape<T>(q, k, v);
  std::vector<T> out(q.numel());
  std::vector<T> probs(tape ? batch * heads * tq * tk : 0);
  detail::attention_kernel(q.ptr(), k.ptr(), v.ptr(), out.data(), tape ? probs.data() : nullptr,
                           batch, tq, tk, heads, head_dim, q_offset, tk * d);
  auto result = detail::traced_output<T>(q.shape(), std::move(out), tape);
  if (tape) {
    tape->record(
        "causal_attention", {q.id(), k.id(), v.id()}, result,
        [sq = q.storage(), sk = k.storage(), sv = v.storage(), probs = std::move(probs), batch, tq,
         tk, heads, head_dim, d](std::span<const T> g) {
          auto& gq = sq->ensure_grad();
          auto& gk = sk->ensure_grad();
          auto& gv = sv->ensure_grad();
          const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
          std::vector<T> dp(tk);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < heads; ++h)
              for (std::size_t i = 0; i < tq; ++i) {
                const T* p = probs.data() + ((b * heads + h) * tq + i) * tk;
                const T* gi = g.data() + (b * tq + i) * d + h * head_dim;
                T dot = T(0);
                for (std::size_t j = 0; j < tk; ++j) {
                  if (p[j] == T(0)) {
                    dp[j] = T(0);
                    continue;
                  }
                  const std::size_t kvj = (b * tk + j) * d + h * head_dim;
                  T s = T(0);
                  for (std::size_t e = 0; e < head_dim; ++e) {
                    s += gi[e] * sv->data[kvj + e];
                    gv[kvj + e] += p[j] * gi[e];
                  }
                  dp[j] = s;
                  dot += p[j] * s;
                }
                const std::size_t qi = (b * tq + i) * d + h * head_dim;
                for (std::size_t j = 0; j < tk; ++j) {
                  if (p[j] == T(0)) continue;
                  const T ds = p[j] * (dp[j] - dot) * scale;
                  const std::size_t kvj = (b * tk + j) * d + h * head_dim;
                  for (std::size_t e = 0; e < head_dim; ++e) {
                    gq[qi + e] += ds * sk->data[kvj + e];
                    gk[kvj + e] += ds * sq->data[qi + e];
                  }
                }
              }
        });
  }
  return result;
}

namespace detail {

template <typename T>
void log_softmax_row(const T* logits, std::size_t vocab, T inv_temp, T* out) {
  T mx = logits[0] * inv_temp;
  for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, logits[j] * inv_temp);
  T z = T(0);
  for (std::size_t j = 0; j < vocab; ++j) z += std::exp(logits[j] * inv_temp - mx);
  const T lz = mx + std::log(z);
  for (std::size_t j = 0; j < vocab; ++j) out[j] = logits[j] * inv_temp - lz;
}

}  // namespace detail

/// log softmax(logits / temperature)[target] per position: [B, T, V] -> [B, T].
template <typename T>
Tensor<T> token_logprobs(const Tensor<T>& logits, std::span<const int> targets,
                         T temperature = T(1)) {
  if (logits.rank() != 3 || targets.size() != logits.dim(0) * logits.dim(1))
    throw DimensionError("token_logprobs: targets do not match logits " + shape_str(logits.shape()));
  if (!(temperature > T(0))) throw ContractError("token_logprobs: temperature must be positive");
  const std::size_t vocab = logits.dim(2), rows = targets.size();
  const T inv_temp = T(1) / temperature;
  std::vector<T> out(rows);
  std::vector<T> lsm(rows * vocab);
  for (std::size_t r = 0; r < rows; ++r) {
    const int tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab)
      throw IndexError("token_logprobs: target " + std::to_string(tgt) + " out of range");
    detail::log_softmax_row(logits.ptr() + r * vocab, vocab, inv_temp, lsm.data() + r * vocab);
    out[r] = lsm[r * vocab + static_cast<std::size_t>(tgt)];
  }
  auto* tape = detail::tracing_tape<T>(logits);
  auto result = detail::traced_output<T>({logits.dim(0), logits.dim(1)}, std::move(out), tape);
  if (tape) {
    tape->record("token_logprobs", {logits.id()}, result,
                 [sl = logits.storage(), lsm = std::move(lsm),
                  tg = std::vector<int>(targets.begin(), targets.end()), vocab,
                  inv_temp](std::span<const T> g) {
                   auto& gl = sl->ensure_grad();
                   for (std::size_t r = 0; r < tg.size(); ++r) {
                     if (g[r] == T(0)) continue;
                     T* row = gl.data() + r * vocab;
                     for (std::size_t j = 0; j < vocab; ++j)
                       row[j] -= g[r] * inv_temp * std::exp(lsm[r * vocab + j]);
                     row[static_cast<std::size_t>(tg[r])] += g[r] * inv_temp;
                   }
                 });
  }
  return result;
}

/// Mean negative log-likelihood over positions with mask != 0. Masked positions
/// may hold any target value. Returns 0 when every position is masked.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                        std::span<const std::uint8_t> mask = {}) {
  if (logits.rank() != 3 || targets.size() != logits.dim(0) * logits.dim(1) ||
      (!mask.empty() && mask.size() != targets.size()))
    throw DimensionError("cross_entropy: targets/mask do not match logits " +
                         shape_str(logits.shape()));
  const std::size_t vocab = logits.dim(2), rows = targets.size();
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask.empty() && !mask[r]) continue;
    const int tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab)
      throw IndexError("cross_entropy: target " + std::to_string(tgt) + " out of range [0," +
                       std::to_string(vocab) + ")");
    ++count;
  }
  std::vector<T> lsm(rows * vocab);
  T loss = T(0);
  const T inv_count = count ? T(1) / static_cast<T>(count) : T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask.empty() && !mask[r]) continue;
    detail::log_softmax_row(logits.ptr() + r * vocab, vocab, T(1), lsm.data() + r * vocab);
    loss -= lsm[r * vocab + static_cast<std::size_t>(targets[r])];
  }
  loss *= inv_count;
  auto* tape = detail::tracing_tape<T>(logits);
  auto result = detail::traced_output<T>({1}, {loss}, tape);
  if (tape) {
    tape->record("cross_entropy", {logits.id()}, result,
                 [sl = logits.storage(), lsm = std::move(lsm),
                  tg = std::vector<int>(targets.begin(), targets.end()),
                  mk = std::vector<std::uint8_t>(mask.begin(), mask.end()), vocab,
                  inv_count](std::span<const T> g) {
                   auto& gl = sl->ensure_grad();
                   const T s = g[0] * inv_count;
                   for (std::size_t r = 0; r < tg.size(); ++r) {
                     if (!mk.empty() && !mk[r]) continue;
                     T* row = gl.data() + r * vocab;
                     for (std::size_t j = 0; j < vocab; ++j)
                       row[j] += s * std::exp(lsm[r * vocab + j]);
                     row[static_cast<std::size_t>(tg[r])] -= s;
                   }
                 });
  }
  return result;
}

}  // namespace btrans
