// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with an explicit reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto shared storage. Ops in ops.hpp record a
// node on the thread's active GradTape whenever one of their inputs requires
// a gradient; GradTape::backward then replays the nodes newest-first.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "btrans/errors.hpp"

namespace btrans {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
struct Storage {
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = next_tensor_id();

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape) : Tensor(shape, std::vector<T>(shape_numel(shape), T(0))) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), storage_(std::make_shared<detail::Storage<T>>()) {
    for (auto d : shape_)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
    if (shape_numel(shape_) != data.size())
      throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                           std::to_string(data.size()) + " values");
    storage_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const noexcept { return storage_ != nullptr; }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return storage_ ? storage_->data.size() : 0; }
  std::uint64_t id() const noexcept { return storage_ ? storage_->id : 0; }

  std::span<const T> data() const noexcept { return storage_->data; }
  /// Mutable access is for constructing values and optimizer steps only;
  /// mutating a tensor already recorded on a live tape is undefined.
  std::span<T> mutable_data() noexcept { return storage_->data; }
  const T* ptr() const noexcept { return storage_->data.data(); }
  T* mutable_ptr() noexcept { return storage_->data.data(); }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return storage_->data[0];
  }

  bool requires_grad() const noexcept { return storage_ && storage_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    storage_->requires_grad = on;
    return *this;
  }

  bool has_grad() const noexcept { return storage_ && !storage_->grad.empty(); }

  /// Accumulated gradient. Leaves never reached by backward read as zeros.
  std::span<T> grad() const { return storage_->ensure_grad(); }

  void zero_grad() {
    if (!storage_->grad.empty()) std::fill(storage_->grad.begin(), storage_->grad.end(), T(0));
  }

  /// Same storage (data and gradient), different shape.
  Tensor reshape(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  /// Fresh storage with a copy of the values and no gradient linkage.
  Tensor detach() const {
    return Tensor(shape_, std::vector<T>(storage_->data.begin(), storage_->data.end()));
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    std::transform(storage_->data.begin(), storage_->data.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    Tensor<U> t(shape_, std::move(out));
    t.set_requires_grad(requires_grad());
    return t;
  }

  const std::shared_ptr<detail::Storage<T>>& storage() const noexcept { return storage_; }

 private:
  Shape shape_;
  std::shared_ptr<detail::Storage<T>> storage_;
};

/// Ordered record of differentiable operations. Node order is creation order,
/// which is a valid topological order because every input exists before the
/// op that consumes it.
template <typename T>
class GradTape {
 public:
  struct Node {
    const char* op;
    std::vector<std::uint64_t> inputs;
    std::uint64_t output;
    std::shared_ptr<detail::Storage<T>> out_storage;
    std::function<void(std::span<const T>)> backward;
  };

  void record(const char* op, std::vector<std::uint64_t> inputs, const Tensor<T>& out,
              std::function<void(std::span<const T>)> backward) {
    nodes_.push_back(Node{op, std::move(inputs), out.id(), out.storage(), std::move(backward)});
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every traced input. Nodes whose
  /// output never received a gradient are skipped, so their inputs see zero.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    const bool on_tape = std::any_of(nodes_.begin(), nodes_.end(),
                                     [&](const Node& n) { return n.output == loss.id(); });
    if (!on_tape && !loss.requires_grad())
      throw ContractError("backward: loss is not on the tape");
    loss.storage()->ensure_grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out_storage->grad.empty()) continue;
      it->backward(it->out_storage->grad);
    }
    ++backward_passes_;
  }

  std::span<const Node> nodes() const noexcept { return nodes_; }
  std::size_t backward_passes() const noexcept { return backward_passes_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
  std::size_t backward_passes_ = 0;
};

template <typename T>
GradTape<T>*& active_tape() {
  thread_local GradTape<T>* tape = nullptr;
  return tape;
}

/// Installs a tape for the current thread for the lifetime of the scope.
template <typename T>
class TapeScope {
 public:
  TapeScope() : previous_(active_tape<T>()) { active_tape<T>() = &tape_; }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  GradTape<T>& tape() noexcept { return tape_; }
  void backward(const Tensor<T>& loss) { tape_.backward(loss); }

 private:
  GradTape<T> tape_;
  GradTape<T>* previous_;
};

/// Suspends recording on this thread (e.g. during sampling inside a traced scope).
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradScope() { active_tape<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape<T>* previous_;
};

}  // namespace btrans
