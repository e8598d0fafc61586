// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace btrans {

// Shape disagreement between operands, or an empty reduction axis.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Token id or target outside its valid range.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// A caller broke an API precondition (non-scalar loss, empty selector, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// NaN/inf where a finite value is required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or truncated checkpoint file.
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid experiment or model configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace btrans
