#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "chg/errors.hpp"

namespace chg {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

template <typename T>
class Tape;

// Dense row-major tensor with an optional gradient buffer.
//
// A Tensor is a cheap handle; copies share storage. Values produced by an op
// are never written again, so handles can be shared read-only across threads.
// Leaves (parameters, gate logits) are the only tensors whose data is mutated,
// and only by optimizers between tape rebuilds.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor from(Shape shape, std::vector<T> data);
  static Tensor scalar(T value) { return from({1}, {value}); }
  // Leaf that accumulates gradient during backward.
  static Tensor parameter(Shape shape, std::vector<T> data);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const { return impl_->shape.at(0); }
  std::size_t cols() const { return impl_->shape.size() > 1 ? impl_->shape[1] : 1; }

  std::span<const T> data() const { return impl_->data; }
  // Only for leaves: initialization and optimizer updates.
  std::span<T> mutable_data() { return impl_->data; }

  T item() const;
  T at(std::size_t i, std::size_t j) const { return impl_->data[i * cols() + j]; }

  bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
  bool frozen() const noexcept { return impl_ && impl_->frozen; }
  bool has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }

  void set_requires_grad(bool on);
  // Frozen tensors never accumulate gradient, even if asked to later.
  void freeze();
  void zero_grad();

  std::int64_t tape_id() const noexcept { return impl_ ? impl_->tape_id : -1; }

  // Op-author interface. Gradient buffer of an op input or output; empty when
  // the tensor does not require gradient.
  std::span<T> grad_buffer() const { return impl_->grad; }

  Tensor deep_copy() const;

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool frozen = false;
    std::int64_t tape_id = -1;
    const void* tape = nullptr;
    std::uint64_t tape_generation = 0;
  };
  std::shared_ptr<Impl> impl_;

  friend class Tape<T>;
};

// Define-by-run reverse-mode tape. Ops append a node whenever any input
// requires gradient; backward() replays the nodes once in reverse.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `out` as produced by a new node. Allocates out's gradient.
  void record(Tensor<T>& out, const char* op, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and runs every node in reverse order. The tape
  // is consumed; a second call without a new forward throws StaleTapeError.
  void backward(const Tensor<T>& loss);

  // Drops all nodes, releasing intermediates they captured.
  void clear();

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }
  const char* op_name(std::size_t i) const { return nodes_.at(i).op; }

 private:
  struct Node {
    const char* op;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::uint64_t generation_ = 1;
};

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// ---- differentiable ops ---------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> silu(Tape<T>& tape, const Tensor<T>& x);

// Elementwise clip to [lo, hi]; gradient passes only inside the closed range.
template <typename T>
Tensor<T> clamp(Tape<T>& tape, const Tensor<T>& x, T lo, T hi);

// min(x, ceiling) for a scalar x; zero gradient once the ceiling is hit.
template <typename T>
Tensor<T> min_scalar(Tape<T>& tape, const Tensor<T>& x, T ceiling);

// Rows of `table` selected by `ids`: out[i] = table[ids[i]].
template <typename T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const int> ids);

// Row-wise causal softmax of a square score matrix times `scale`. Entries
// above the diagonal are exactly zero.
template <typename T>
Tensor<T> softmax_causal(Tape<T>& tape, const Tensor<T>& scores, T scale);

// Per row: x / sqrt(mean(x^2) + eps) * weight.
template <typename T>
Tensor<T> rmsnorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, T eps);

// Mean over mask-selected rows of -log softmax(logits[row])[target[row]].
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> targets,
                        std::span<const std::uint8_t> mask);

// Row-wise log-softmax, no tape. Used by evaluation code.
template <typename T>
std::vector<T> log_softmax_rows(const Tensor<T>& logits);

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& x) {
  std::vector<To> out(x.numel());
  auto src = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(src[i]);
  return Tensor<To>::from(x.shape(), std::move(out));
}

// Softmax over the first `n_valid` entries of a row, leaving the rest 0.
// Shared by softmax_causal and the fused attention kernel.
template <typename T>
void causal_softmax_row(const T* scores, T scale, std::size_t n_valid, std::size_t n_total, T* out);

}  // namespace chg
