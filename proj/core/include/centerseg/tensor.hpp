#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage and gradient.
// Every differentiable operation whose inputs track gradients appends one
// entry to the calling thread's Tape<T>; Tensor::backward() replays that tape
// in reverse and clears it. Use NoGradGuard<T> for inference so nothing is
// recorded.
//
// Both float and double instantiations are provided. Training runs in float;
// gradient checks run in double.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace centerseg {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  bool leaf = true;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

}  // namespace detail

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  // The tape of the calling thread.
  static Tape& local();

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return entries_.size(); }

  // Appends an operation. `fn` reads output->grad and accumulates into the
  // gradients of those inputs that require grad. The entry keeps the output
  // and inputs alive until the tape is cleared.
  void record(detail::NodePtr<T> output, std::vector<detail::NodePtr<T>> inputs,
              BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1, visits every entry once in reverse order and
  // clears the tape. Leaf gradients accumulate across calls.
  void backward(const Tensor<T>& loss);

  void clear() noexcept { entries_.clear(); }

 private:
  template <typename U>
  friend class NoGradGuard;

  struct Entry {
    detail::NodePtr<T> output;
    std::vector<detail::NodePtr<T>> inputs;
    BackwardFn fn;
  };

  std::vector<Entry> entries_;
  bool recording_ = true;
};

// Disables recording on the calling thread's tape for its lifetime.
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape<T>::local().recording_) {
    Tape<T>::local().recording_ = false;
  }
  ~NoGradGuard() { Tape<T>::local().recording_ = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  // Null handle; defined() is false.
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data().size(); }

  std::span<const T> data() const;
  // In-place access for optimizers and buffers. Mutating a tensor that is an
  // input of a recorded operation before backward() invalidates gradients.
  std::span<T> mutable_data();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  void zero_grad();

  T item() const;
  T at(std::initializer_list<std::size_t> index) const;
  std::vector<T> to_vector() const;

  // Deep copy without gradient history.
  Tensor clone() const;

  template <typename U>
  Tensor<U> cast() const;

  void backward() const { Tape<T>::local().backward(*this); }

  const detail::NodePtr<T>& node() const { return node_; }
  static Tensor from_node(detail::NodePtr<T> node);

 private:
  detail::NodePtr<T> node_;
};

// ---------------------------------------------------------------------------
// Elementwise. Binary operations broadcast numpy-style, aligned from the
// trailing dimension; size-1 and missing leading dimensions expand.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
// Throws DomainError when any divisor is zero.
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
// Gradient goes to `a` on ties.
template <typename T> Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> add(const Tensor<T>& a, T b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, T b);
// b - a
template <typename T> Tensor<T> rsub(const Tensor<T>& a, T b);

template <typename T> Tensor<T> neg(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
// Throws DomainError for non-positive entries.
template <typename T> Tensor<T> log(const Tensor<T>& x);
// Throws DomainError for zero entries.
template <typename T> Tensor<T> reciprocal(const Tensor<T>& x);
// Throws DomainError for negative entries.
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);

// Stop-gradient: same values, no history.
template <typename T> Tensor<T> detach(const Tensor<T>& x);

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);
// Swaps the last two dimensions.
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> index_select(const Tensor<T>& x, std::size_t axis, const std::vector<std::size_t>& indices);

// ---------------------------------------------------------------------------
// Linear algebra.

// [..., M, K] x [..., K, N] -> [..., M, N]. Leading dimensions must match, or
// `b` may be rank 2 and is then shared across the batch.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Squared Euclidean distances between the rows of a [M, C] and b [N, C].
template <typename T> Tensor<T> squared_distances(const Tensor<T>& a, const Tensor<T>& b);

// Cross-correlation of x [C, H, W] with kernels [O, C, k, k] (k odd) and an
// optional bias [O].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding);

// ---------------------------------------------------------------------------
// Reductions. Axis reductions drop the axis unless keepdim is set. min/max
// route the gradient to the first attaining index.

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x, std::size_t axis, bool keepdim = false);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x, std::size_t axis, bool keepdim = false);
template <typename T> Tensor<T> max(const Tensor<T>& x, std::size_t axis, bool keepdim = false);
template <typename T> Tensor<T> min(const Tensor<T>& x, std::size_t axis, bool keepdim = false);
template <typename T> Tensor<T> max(const Tensor<T>& x);
template <typename T> Tensor<T> min(const Tensor<T>& x);
// sqrt of the sum of squares; zero gradient at the origin.
template <typename T> Tensor<T> frobenius_norm(const Tensor<T>& x);

// Index of the first maximum along `axis`, laid out in the reduced shape.
template <typename T> std::vector<std::size_t> argmax(const Tensor<T>& x, std::size_t axis);
template <typename T> std::size_t argmax(const Tensor<T>& x);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);

// ---------------------------------------------------------------------------
// Operator sugar.

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& x) { return neg(x); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T b) { return add(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T b) { return mul(a, b); }
template <typename T> Tensor<T> operator*(T a, const Tensor<T>& b) { return mul(b, a); }
template <typename T> Tensor<T> operator-(T a, const Tensor<T>& b) { return rsub(b, a); }

}  // namespace centerseg
