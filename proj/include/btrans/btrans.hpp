// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "btrans/bayesian_norm.hpp"
#include "btrans/checkpoint.hpp"
#include "btrans/diversity.hpp"
#include "btrans/errors.hpp"
#include "btrans/generate.hpp"
#include "btrans/gradcheck.hpp"
#include "btrans/lora.hpp"
#include "btrans/model.hpp"
#include "btrans/model_config.hpp"
#include "btrans/ops.hpp"
#include "btrans/optim.hpp"
#include "btrans/population.hpp"
#include "btrans/rl.hpp"
#include "btrans/rng.hpp"
#include "btrans/sft.hpp"
#include "btrans/tasks.hpp"
#include "btrans/tensor.hpp"
#include "btrans/tokenizer.hpp"
