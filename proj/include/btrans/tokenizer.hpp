// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "btrans/errors.hpp"

namespace btrans {

/// Character-level tokenizer over the synthetic-task alphabet (32 symbols).
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kVocabSize = 32;

  // Ids 3..31, in order.
  static constexpr std::string_view kAlphabet = "\n 0123456789+-*=%,[]maxodc?:.";

  static std::vector<int> encode(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(id_of(c));
    return ids;
  }

  /// BOS followed by the encoded text.
  static std::vector<int> encode_prompt(std::string_view text) {
    std::vector<int> ids{kBos};
    for (char c : text) ids.push_back(id_of(c));
    return ids;
  }

  /// Special tokens other than EOS are dropped; decoding stops at EOS.
  static std::string decode(std::span<const int> ids) {
    std::string out;
    for (int id : ids) {
      if (id == kEos) break;
      if (id >= 3 && id < kVocabSize) out.push_back(kAlphabet[static_cast<std::size_t>(id - 3)]);
    }
    return out;
  }

  static bool representable(std::string_view text) {
    for (char c : text)
      if (kAlphabet.find(c) == std::string_view::npos) return false;
    return true;
  }

  static int id_of(char c) {
    const auto pos = kAlphabet.find(c);
    if (pos == std::string_view::npos)
      throw IndexError(std::string("tokenizer: character '") + c + "' is not in the alphabet");
    return static_cast<int>(pos) + 3;
  }
};

static_assert(Tokenizer::kAlphabet.size() + 3 == Tokenizer::kVocabSize);

}  // namespace btrans
