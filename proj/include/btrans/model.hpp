// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer: pre-RMSNorm blocks with rotary attention and a
// SiLU MLP, untied input/output embeddings.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "btrans/lora.hpp"
#include "btrans/model_config.hpp"
#include "btrans/ops.hpp"
#include "btrans/rng.hpp"
#include "btrans/tensor.hpp"

namespace btrans {

template <typename T>
struct BlockParams {
  Tensor<T> attn_norm_w, attn_norm_b;
  Tensor<T> wq, wk, wv, wo;  // [d x d], applied as x * W
  Tensor<T> mlp_norm_w, mlp_norm_b;
  Tensor<T> w_up;    // [d x d_ff]
  Tensor<T> w_down;  // [d_ff x d]
};

/// The deterministic backbone weights. Copies are shallow (shared storage);
/// use clone() for an independent copy.
template <typename T>
struct ModelParams {
  ModelConfig config;
  Tensor<T> tok_emb;  // [V x d]
  std::vector<BlockParams<T>> blocks;
  Tensor<T> final_norm_w, final_norm_b;
  Tensor<T> head;  // [d x V]

  /// Fixed, documented order; this is also the checkpoint record order.
  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("tok_emb", tok_emb);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const auto p = "blocks." + std::to_string(l) + ".";
      const auto& b = blocks[l];
      out.emplace_back(p + "attn_norm.w", b.attn_norm_w);
      out.emplace_back(p + "attn_norm.b", b.attn_norm_b);
      out.emplace_back(p + "attn.wq", b.wq);
      out.emplace_back(p + "attn.wk", b.wk);
      out.emplace_back(p + "attn.wv", b.wv);
      out.emplace_back(p + "attn.wo", b.wo);
      out.emplace_back(p + "mlp_norm.w", b.mlp_norm_w);
      out.emplace_back(p + "mlp_norm.b", b.mlp_norm_b);
      out.emplace_back(p + "mlp.w_up", b.w_up);
      out.emplace_back(p + "mlp.w_down", b.w_down);
    }
    out.emplace_back("final_norm.w", final_norm_w);
    out.emplace_back("final_norm.b", final_norm_b);
    out.emplace_back("head", head);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named()) n += t.numel();
    return n;
  }

  /// FNV-1a over every parameter's bytes, in named() order.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (auto& [name, t] : named()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(t.ptr());
      for (std::size_t i = 0; i < t.numel() * sizeof(T); ++i) h = (h ^ bytes[i]) * 0x100000001B3ULL;
    }
    return h;
  }

  void set_requires_grad(bool on) {
    for (auto& t : parameters()) t.set_requires_grad(on);
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    out.tok_emb = tok_emb.template cast<U>();
    for (const auto& b : blocks) {
      out.blocks.push_back({b.attn_norm_w.template cast<U>(), b.attn_norm_b.template cast<U>(),
                            b.wq.template cast<U>(), b.wk.template cast<U>(),
                            b.wv.template cast<U>(), b.wo.template cast<U>(),
                            b.mlp_norm_w.template cast<U>(), b.mlp_norm_b.template cast<U>(),
                            b.w_up.template cast<U>(), b.w_down.template cast<U>()});
    }
    out.final_norm_w = final_norm_w.template cast<U>();
    out.final_norm_b = final_norm_b.template cast<U>();
    out.head = head.template cast<U>();
    return out;
  }

  ModelParams clone() const { return cast<T>(); }
};

/// Scaled Gaussian initialization: N(0, 1/fan_in) for projections, with the
/// residual-writing projections further scaled by 1/sqrt(2 * n_layers).
/// Norm weights start at one, norm biases at zero.
template <typename T = float>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::uint64_t tag = 0;
  auto gaussian = [&](Shape shape, double stddev) {
    CounterRng rng(derive_key(seed, tag++));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>(std::move(shape), std::move(v));
  };
  const std::size_t d = cfg.d_model;
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));

  ModelParams<T> p;
  p.config = cfg;
  p.tok_emb = gaussian({cfg.vocab_size, d}, 1.0);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    BlockParams<T> b;
    b.attn_norm_w = Tensor<T>::full({d}, T(1));
    b.attn_norm_b = Tensor<T>::zeros({d});
    b.wq = gaussian({d, d}, proj);
    b.wk = gaussian({d, d}, proj);
    b.wv = gaussian({d, d}, proj);
    b.wo = gaussian({d, d}, proj * resid);
    b.mlp_norm_w = Tensor<T>::full({d}, T(1));
    b.mlp_norm_b = Tensor<T>::zeros({d});
    b.w_up = gaussian({d, cfg.d_ff}, proj);
    b.w_down = gaussian({cfg.d_ff, d}, resid / std::sqrt(static_cast<double>(cfg.d_ff)));
    p.blocks.push_back(std::move(b));
  }
  p.final_norm_w = Tensor<T>::full({d}, T(1));
  p.final_norm_b = Tensor<T>::zeros({d});
  p.head = gaussian({d, cfg.vocab_size}, proj);
  return p;
}

/// Attachment point for stochastic norm offsets. `offset` returns the
/// [batch, 1, d_model] tensor added after norm site `site`, or nullptr for
/// the plain norm. Sites: block l uses 2l (attention) and 2l+1 (MLP); the
/// final norm is 2 * n_layers.
template <typename T>
class NormOffsets {
 public:
  virtual ~NormOffsets() = default;
  virtual void begin_forward(std::size_t /*batch*/) {}
  virtual const Tensor<T>* offset(std::size_t site, std::size_t batch, std::size_t d_model) = 0;
};

/// Per-layer key/value buffers laid out [batch, capacity, d_model].
template <typename T>
struct KVCache {
  std::size_t batch = 0;
  std::size_t capacity = 0;
  std::size_t length = 0;
  std::vector<std::vector<T>> keys;
  std::vector<std::vector<T>> values;

  void reset(const ModelConfig& cfg, std::size_t batch_size) {
    batch = batch_size;
    capacity = cfg.max_seq_len;
    length = 0;
    keys.assign(cfg.n_layers, std::vector<T>(batch * capacity * cfg.d_model, T(0)));
    values.assign(cfg.n_layers, std::vector<T>(batch * capacity * cfg.d_model, T(0)));
  }
};

template <typename T>
struct ForwardOptions {
  KVCache<T>* cache = nullptr;
  NormOffsets<T>* offsets = nullptr;
  const LoraAdapter<T>* adapter = nullptr;
};

namespace detail {

template <typename T>
Tensor<T> norm_site(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t site,
                    double eps, NormOffsets<T>* offsets) {
  const Tensor<T>* z = offsets ? offsets->offset(site, x.dim(0), x.dim(2)) : nullptr;
  return add_offset(rms_norm(x, w, eps), b, z);
}

template <typename T>
Tensor<T> project(const Tensor<T>& h, const Tensor<T>& w, const LoraPair<T>* lora, T lora_scale) {
  auto out = linear(h, w);
  if (lora) out = add(out, scale(linear(linear(h, lora->down), lora->up), lora_scale));
  return out;
}

}  // namespace detail

/// Final normalized hidden states [batch, steps, d_model] (input to the head).
/// With a cache, `tokens` are the new positions only and the cache grows.
template <typename T>
Tensor<T> forward_hidden(const ModelParams<T>& p, std::span<const int> tokens, std::size_t batch,
                         std::size_t steps, const ForwardOptions<T>& opt = {}) {
  const auto& cfg = p.config;
  const std::size_t d = cfg.d_model;
  if (tokens.size() != batch * steps || batch == 0 || steps == 0)
    throw DimensionError("forward: token count does not match batch x steps");
  KVCache<T>* cache = opt.cache;
  const std::size_t offset = cache ? cache->length : 0;
  if (cache && cache->batch != batch) throw DimensionError("forward: cache batch size mismatch");
  if (offset + steps > cfg.max_seq_len)
    throw DimensionError("forward: sequence length " + std::to_string(offset + steps) +
                         " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  if (opt.offsets) opt.offsets->begin_forward(batch);

  const T lora_scale = opt.adapter ? opt.adapter->scaling() : T(0);
  auto x = embedding(p.tok_emb, tokens, batch, steps);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& b = p.blocks[l];
    auto h = detail::norm_site(x, b.attn_norm_w, b.attn_norm_b, 2 * l, cfg.norm_eps, opt.offsets);
    const LoraPair<T>* lq = opt.adapter ? &opt.adapter->q[l] : nullptr;
    const LoraPair<T>* lv = opt.adapter ? &opt.adapter->v[l] : nullptr;
    auto q = rope(detail::project(h, b.wq, lq, lora_scale), cfg.n_heads, offset, cfg.rope_base);
    auto k = rope(linear(h, b.wk), cfg.n_heads, offset, cfg.rope_base);
    auto v = detail::project(h, b.wv, lv, lora_scale);
    Tensor<T> attn;
    if (cache) {
      auto& kc = cache->keys[l];
      auto& vc = cache->values[l];
      for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t t = 0; t < steps; ++t) {
          const std::size_t dst = (bi * cache->capacity + offset + t) * d;
          const std::size_t src = (bi * steps + t) * d;
          std::memcpy(kc.data() + dst, k.ptr() + src, d * sizeof(T));
          std::memcpy(vc.data() + dst, v.ptr() + src, d * sizeof(T));
        }
      std::vector<T> out(batch * steps * d);
      detail::attention_kernel<T>(q.ptr(), kc.data(), vc.data(), out.data(), nullptr, batch, steps,
                                  offset + steps, cfg.n_heads, cfg.head_dim(), offset,
                                  cache->capacity * d);
      attn = Tensor<T>({batch, steps, d}, std::move(out));
    } else {
      attn = causal_attention(q, k, v, cfg.n_heads, 0);
    }
    x = add(x, linear(attn, b.wo));
    auto h2 = detail::norm_site(x, b.mlp_norm_w, b.mlp_norm_b, 2 * l + 1, cfg.norm_eps, opt.offsets);
    x = add(x, linear(silu(linear(h2, b.w_up)), b.w_down));
  }
  if (cache) cache->length += steps;
  return detail::norm_site(x, p.final_norm_w, p.final_norm_b, 2 * cfg.n_layers, cfg.norm_eps,
                           opt.offsets);
}

/// Logits [batch, steps, vocab]. Position t only sees tokens at positions <= t.
template <typename T>
Tensor<T> forward(const ModelParams<T>& p, std::span<const int> tokens, std::size_t batch,
                  std::size_t steps, const ForwardOptions<T>& opt = {}) {
  return linear(forward_hidden(p, tokens, batch, steps, opt), p.head);
}

}  // namespace btrans
