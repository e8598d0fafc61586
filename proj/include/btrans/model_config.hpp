// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>

#include "btrans/errors.hpp"
#include "btrans/tokenizer.hpp"

namespace btrans {

struct ModelConfig {
  std::size_t vocab_size = Tokenizer::kVocabSize;
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t max_seq_len = 256;
  double norm_eps = 1e-6;
  double rope_base = 10000.0;

  std::size_t head_dim() const { return d_model / n_heads; }

  /// Two pre-norms per block plus the final norm.
  std::size_t norm_sites() const { return 2 * n_layers + 1; }

  /// Embedding, untied head, per-block attention and MLP weights, and a
  /// weight and bias per norm site.
  std::size_t parameter_count() const {
    const std::size_t block = 4 * d_model * d_model + 2 * d_model * d_ff;
    return 2 * vocab_size * d_model + n_layers * block + 2 * d_model * norm_sites();
  }

  /// Hypothetical 7B-class shape, used only for memory accounting.
  static ModelConfig seven_b_class() {
    ModelConfig c;
    c.vocab_size = 32000;
    c.d_model = 4096;
    c.n_layers = 32;
    c.n_heads = 32;
    c.d_ff = 11008;
    c.max_seq_len = 4096;
    return c;
  }

  void validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0)
      throw ConfigError("model config: dimensions must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("model config: d_model " + std::to_string(d_model) +
                        " is not divisible by n_heads " + std::to_string(n_heads));
    if (head_dim() % 2 != 0) throw ConfigError("model config: head dimension must be even for rotary encoding");
    if (max_seq_len < 2) throw ConfigError("model config: max_seq_len must be at least 2");
    if (!(norm_eps > 0.0)) throw ConfigError("model config: norm_eps must be positive");
    if (!(rope_base > 1.0)) throw ConfigError("model config: rope_base must exceed 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace btrans
