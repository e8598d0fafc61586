// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic tasks with verifiable answers and newline-delimited worked steps.
//
//   addition   "347+285\n"  ->  "7+5=12\n4+8+1=13\n3+2+1=6\n=632"
//   modular    "9+8%13\n"   ->  "9+8=17\n17-13=4\n=4"
//   list_max   "[3,9,4]\n"  ->  "max3,9=9\nmax9,4=9\n=9"
//
// The answer is the last "=<integer>" span of a response.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "btrans/errors.hpp"
#include "btrans/rng.hpp"

namespace btrans {

/// Last "=<integer>" span in `text` (spaces allowed after '='), canonicalized:
/// leading zeros stripped, "+" dropped, "-0" folded to "0". Total function.
inline std::optional<std::string> extract_answer(std::string_view text) {
  std::optional<std::string> found;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '=') continue;
    std::size_t j = i + 1;
    while (j < text.size() && text[j] == ' ') ++j;
    bool negative = false;
    if (j < text.size() && (text[j] == '-' || text[j] == '+')) {
      negative = text[j] == '-';
      ++j;
    }
    const std::size_t start = j;
    while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
    if (j == start) continue;
    std::string digits(text.substr(start, j - start));
    const auto nz = digits.find_first_not_of('0');
    digits = nz == std::string::npos ? "0" : digits.substr(nz);
    found = (negative && digits != "0") ? "-" + digits : digits;
  }
  return found;
}

enum class TaskKind { addition, modular, list_max };

inline std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::addition: return "addition";
    case TaskKind::modular: return "modular";
    case TaskKind::list_max: return "list_max";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "addition") return TaskKind::addition;
  if (s == "modular") return TaskKind::modular;
  if (s == "list_max") return TaskKind::list_max;
  throw ConfigError("task kind must be addition|modular|list_max, got '" + std::string(s) + "'");
}

struct TaskInstance {
  std::string prompt;    // ends with '\n'
  std::string response;  // reference worked solution, no trailing newline
  std::string answer;    // canonical
  std::size_t stratum = 0;
};

/// Sampler parameters. Strata index operand magnitude: for addition the digit
/// count (min_digits..max_digits), for modular the bit-length band of the
/// operands, for list_max the list length (min_digits..max_digits).
struct TaskSpec {
  TaskKind kind = TaskKind::addition;
  std::size_t min_digits = 1;
  std::size_t max_digits = 3;
  std::uint64_t modulus = 97;
  std::uint64_t heldout_mod = 5;  // instances whose hash % heldout_mod == 0 form the held-out split

  std::size_t strata() const {
    return kind == TaskKind::modular ? 3 : (max_digits - min_digits + 1);
  }

  void validate() const {
    if (min_digits == 0 || max_digits < min_digits || max_digits > 9)
      throw ConfigError("task: need 1 <= min_digits <= max_digits <= 9");
    if (kind == TaskKind::modular && (modulus < 2 || modulus > 999))
      throw ConfigError("task: modulus must lie in [2, 999]");
    if (kind == TaskKind::list_max && min_digits < 2)
      throw ConfigError("task: list_max needs lists of at least 2 elements");
    if (heldout_mod < 2) throw ConfigError("task: heldout_mod must be at least 2");
  }

  /// Exact match on canonical answers.
  static bool verify(const std::optional<std::string>& extracted, const std::string& truth) {
    return extracted.has_value() && *extracted == truth;
  }
};

namespace detail {

inline std::uint64_t pow10(std::size_t n) {
  std::uint64_t v = 1;
  while (n--) v *= 10;
  return v;
}

inline std::uint64_t uniform_in(CounterRng& rng, std::uint64_t lo, std::uint64_t hi) {
  return lo + rng.below(hi - lo + 1);
}

inline TaskInstance make_addition(std::uint64_t a, std::uint64_t b) {
  TaskInstance t;
  t.prompt = std::to_string(a) + "+" + std::to_string(b) + "\n";
  const auto sa = std::to_string(a), sb = std::to_string(b);
  const std::size_t n = std::max(sa.size(), sb.size());
  std::uint64_t carry = 0;
  std::string steps;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t da = i < sa.size() ? static_cast<std::uint64_t>(sa[sa.size() - 1 - i] - '0') : 0;
    const std::uint64_t db = i < sb.size() ? static_cast<std::uint64_t>(sb[sb.size() - 1 - i] - '0') : 0;
    const std::uint64_t s = da + db + carry;
    steps += std::to_string(da) + "+" + std::to_string(db);
    if (carry) steps += "+1";
    steps += "=" + std::to_string(s) + "\n";
    carry = s / 10;
  }
  t.answer = std::to_string(a + b);
  t.response = steps + "=" + t.answer;
  return t;
}

inline TaskInstance make_modular(std::uint64_t a, std::uint64_t b, std::uint64_t p) {
  TaskInstance t;
  t.prompt = std::to_string(a) + "+" + std::to_string(b) + "%" + std::to_string(p) + "\n";
  const std::uint64_t s = a + b;
  t.response = std::to_string(a) + "+" + std::to_string(b) + "=" + std::to_string(s) + "\n";
  if (s >= p) t.response += std::to_string(s) + "-" + std::to_string(p) + "=" + std::to_string(s - p) + "\n";
  t.answer = std::to_string(s % p);
  t.response += "=" + t.answer;
  return t;
}

inline TaskInstance make_list_max(const std::vector<std::uint64_t>& xs) {
  TaskInstance t;
  t.prompt = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) t.prompt += (i ? "," : "") + std::to_string(xs[i]);
  t.prompt += "]\n";
  std::uint64_t best = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) {
    const std::uint64_t next = std::max(best, xs[i]);
    t.response += "max" + std::to_string(best) + "," + std::to_string(xs[i]) + "=" + std::to_string(next) + "\n";
    best = next;
  }
  t.answer = std::to_string(best);
  t.response += "=" + t.answer;
  return t;
}

inline std::uint64_t prompt_hash(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001B3ULL;
  return mix64(h);
}

}  // namespace detail

/// Draws one instance from stratum `stratum` (0-based, see TaskSpec).
inline TaskInstance sample_instance(const TaskSpec& spec, std::size_t stratum, CounterRng& rng) {
  TaskInstance t;
  switch (spec.kind) {
    case TaskKind::addition: {
      const std::size_t digits = spec.min_digits + stratum;
      const std::uint64_t lo = digits == 1 ? 0 : detail::pow10(digits - 1), hi = detail::pow10(digits) - 1;
      const auto a = detail::uniform_in(rng, lo, hi);
      const auto b = detail::uniform_in(rng, 0, hi);
      t = rng.below(2) ? detail::make_addition(a, b) : detail::make_addition(b, a);
      break;
    }
    case TaskKind::modular: {
      // Bands over [0, p): low third, middle third, top third of the operand range.
      const std::uint64_t p = spec.modulus;
      const std::uint64_t lo = (p * stratum) / 3, hi = std::max(lo, (p * (stratum + 1)) / 3 - 1);
      const auto a = detail::uniform_in(rng, lo, std::min(hi, p - 1));
      const auto b = detail::uniform_in(rng, 0, p - 1);
      t = detail::make_modular(a, b, p);
      break;
    }
    case TaskKind::list_max: {
      const std::size_t len = spec.min_digits + stratum;
      std::vector<std::uint64_t> xs(len);
      for (auto& x : xs) x = detail::uniform_in(rng, 0, 99);
      t = detail::make_list_max(xs);
      break;
    }
  }
  t.stratum = stratum;
  return t;
}

enum class Split { train, heldout };

inline bool in_split(const TaskSpec& spec, const TaskInstance& t, Split split) {
  const bool held = detail::prompt_hash(t.prompt) % spec.heldout_mod == 0;
  return split == Split::heldout ? held : !held;
}

/// `count` instances, cycling through the strata so every difficulty band is
/// equally represented; instances come only from `split`. Deterministic in seed.
inline std::vector<TaskInstance> make_dataset(const TaskSpec& spec, std::size_t count, std::uint64_t seed,
                                              Split split = Split::train) {
  spec.validate();
  CounterRng rng(derive_key(seed, 0x7A5C));
  std::vector<TaskInstance> out;
  out.reserve(count);
  const std::size_t strata = spec.strata();
  std::size_t attempts = 0;
  while (out.size() < count) {
    const std::size_t stratum = out.size() % strata;
    auto t = sample_instance(spec, stratum, rng);
    if (++attempts > 1000 * (count + 10)) throw ConfigError("task: split too small for requested count");
    if (in_split(spec, t, split)) out.push_back(std::move(t));
  }
  return out;
}

}  // namespace btrans
