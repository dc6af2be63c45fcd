#include "centerseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

#include "centerseg/error.hpp"

namespace centerseg {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Tape<T>& Tape<T>::local() {
  thread_local Tape<T> tape;
  return tape;
}

template <typename T>
void Tape<T>::record(detail::NodePtr<T> output,
                     std::vector<detail::NodePtr<T>> inputs, BackwardFn fn) {
  entries_.push_back(Entry{std::move(output), std::move(inputs), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not depend on any tracked tensor");
  }
  // Intermediate gradients start from zero; leaf gradients accumulate.
  for (auto& entry : entries_) entry.output->grad.assign(entry.output->data.size(), T(0));
  for (auto& entry : entries_) {
    for (auto& input : entry.inputs) {
      if (input->requires_grad) input->ensure_grad();
    }
  }
  auto& root = *loss.node();
  root.ensure_grad();
  root.grad[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
  entries_.clear();
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("Tensor: zero-sized dimension in " + to_string(shape));
  }
  node_->data.assign(element_count(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("Tensor: zero-sized dimension in " + to_string(shape));
  }
  if (element_count(shape) != data.size()) {
    throw DimensionError("Tensor: shape " + to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::from_node(detail::NodePtr<T> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

namespace {

template <typename T>
const detail::Node<T>& checked(const detail::NodePtr<T>& node) {
  if (!node) throw ContractError("operation on an undefined tensor");
  return *node;
}

}  // namespace

template <typename T>
const Shape& Tensor<T>::shape() const {
  return checked(node_).shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape()));
  }
  return shape()[axis];
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return checked(node_).data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  checked(node_);
  return node_->data;
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return checked(node_).requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool value) {
  checked(node_);
  node_->requires_grad = value;
  return *this;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return checked(node_).leaf;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  const auto& n = checked(node_);
  return n.grad.size() == n.data.size();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw ContractError("grad(): no gradient has been computed");
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  checked(node_);
  node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ContractError("item(): tensor of shape " + to_string(shape()) + " is not a scalar");
  }
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("at(): index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

template <typename T>
std::vector<T> Tensor<T>::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape(), to_vector());
}

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
  auto d = data();
  std::vector<U> out(d.size());
  std::transform(d.begin(), d.end(), out.begin(), [](T v) { return static_cast<U>(v); });
  return Tensor<U>(shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Operation plumbing

namespace {

using detail::Node;
using detail::NodePtr;

template <typename T>
const NodePtr<T>& node_of(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  return t.node();
}

// Wraps computed values in a tensor and records the backward closure when any
// input tracks gradients. `backward` receives the output node.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<NodePtr<T>> inputs,
                      Backward&& backward) {
  auto out = std::make_shared<Node<T>>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  auto& tape = Tape<T>::local();
  const bool track =
      tape.recording() &&
      std::any_of(inputs.begin(), inputs.end(), [](const auto& n) { return n->requires_grad; });
  if (track) {
    out->requires_grad = true;
    out->leaf = false;
    Node<T>* o = out.get();
    tape.record(out, std::move(inputs),
                [o, fn = std::forward<Backward>(backward)]() { fn(*o); });
  }
  return Tensor<T>::from_node(std::move(out));
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

struct Broadcast {
  enum class Kind { kSame, kScalarA, kScalarB, kGeneral };
  Kind kind = Kind::kSame;
  Shape out;
  std::vector<std::size_t> a_stride;
  std::vector<std::size_t> b_stride;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast plan;
  const std::size_t na = element_count(a);
  const std::size_t nb = element_count(b);
  if (a == b) {
    plan.out = a;
    return plan;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  plan.out.assign(rank, 1);
  plan.a_stride.assign(rank, 0);
  plan.b_stride.assign(rank, 0);
  const auto sa = strides_of(a);
  const auto sb = strides_of(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t out_axis = rank - 1 - i;
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                           to_string(b));
    }
    plan.out[out_axis] = std::max(da, db);
    if (i < a.size() && da != 1) plan.a_stride[out_axis] = sa[a.size() - 1 - i];
    if (i < b.size() && db != 1) plan.b_stride[out_axis] = sb[b.size() - 1 - i];
  }
  const std::size_t n = element_count(plan.out);
  if (nb == 1 && na == n) {
    plan.kind = Broadcast::Kind::kScalarB;
  } else if (na == 1 && nb == n) {
    plan.kind = Broadcast::Kind::kScalarA;
  } else {
    plan.kind = Broadcast::Kind::kGeneral;
  }
  return plan;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& plan, F&& f) {
  const std::size_t n = element_count(plan.out);
  switch (plan.kind) {
    case Broadcast::Kind::kSame:
      for (std::size_t o = 0; o < n; ++o) f(o, o, o);
      return;
    case Broadcast::Kind::kScalarB:
      for (std::size_t o = 0; o < n; ++o) f(o, o, std::size_t{0});
      return;
    case Broadcast::Kind::kScalarA:
      for (std::size_t o = 0; o < n; ++o) f(o, std::size_t{0}, o);
      return;
    case Broadcast::Kind::kGeneral:
      break;
  }
  const std::size_t rank = plan.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += plan.a_stride[d];
      ib += plan.b_stride[d];
      if (idx[d] < plan.out[d]) break;
      ia -= plan.a_stride[d] * plan.out[d];
      ib -= plan.b_stride[d] * plan.out[d];
      idx[d] = 0;
    }
  }
}

// fwd(a, b) -> out; grad_a(a, b, out, g) and grad_b(...) give the
// contributions routed to each input.
template <typename T, typename Fwd, typename GradA, typename GradB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* op, Fwd fwd,
                    GradA grad_a, GradB grad_b) {
  const auto& na = node_of(a, op);
  const auto& nb = node_of(b, op);
  Broadcast plan = plan_broadcast(na->shape, nb->shape, op);
  std::vector<T> out(element_count(plan.out));
  const T* pa = na->data.data();
  const T* pb = nb->data.data();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = fwd(pa[ia], pb[ib]);
  });
  Shape shape = plan.out;
  Node<T>* ra = na.get();
  Node<T>* rb = nb.get();
  return make_result<T>(std::move(shape), std::move(out), {na, nb},
                        [ra, rb, plan = std::move(plan), grad_a, grad_b](const Node<T>& o) {
                          const bool ga = ra->requires_grad;
                          const bool gb = rb->requires_grad;
                          for_each_broadcast(plan, [&](std::size_t i, std::size_t ia,
                                                       std::size_t ib) {
                            const T g = o.grad[i];
                            if (ga) ra->grad[ia] += grad_a(ra->data[ia], rb->data[ib], o.data[i], g);
                            if (gb) rb->grad[ib] += grad_b(ra->data[ia], rb->data[ib], o.data[i], g);
                          });
                        });
}

// grad(x, y, g) -> contribution to x.
template <typename T, typename Fwd, typename Grad>
Tensor<T> unary_op(const Tensor<T>& x, const char* op, Fwd fwd, Grad grad) {
  const auto& nx = node_of(x, op);
  std::vector<T> out(nx->data.size());
  std::transform(nx->data.begin(), nx->data.end(), out.begin(), fwd);
  Node<T>* rx = nx.get();
  return make_result<T>(nx->shape, std::move(out), {nx}, [rx, grad](const Node<T>& o) {
    for (std::size_t i = 0; i < o.data.size(); ++i) {
      rx->grad[i] += grad(rx->data[i], o.data[i], o.grad[i]);
    }
  });
}

// Views a shape as (outer, axis length, inner) around `axis`.
struct AxisView {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + to_string(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T, T g) { return g; },
      [](T, T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T, T g) { return g; },
      [](T, T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T, T g) { return g * y; },
      [](T x, T, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  for (T v : node_of(b, "div")->data) {
    if (v == T(0)) throw DomainError("div: division by zero");
  }
  return binary_op(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T, T g) { return g / y; },
      [](T, T y, T out, T g) { return -g * out / y; });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "maximum", [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y, T, T g) { return x >= y ? g : T(0); },
      [](T x, T y, T, T g) { return x >= y ? T(0) : g; });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T b) {
  return unary_op(a, "add", [b](T x) { return x + b; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, T b) {
  return unary_op(a, "mul", [b](T x) { return x * b; }, [b](T, T, T g) { return g * b; });
}

template <typename T>
Tensor<T> rsub(const Tensor<T>& a, T b) {
  return unary_op(a, "rsub", [b](T x) { return b - x; }, [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return unary_op(x, "neg", [](T v) { return -v; }, [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T, T g) { return v > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_op(x, "exp", [](T v) { return std::exp(v); }, [](T, T y, T g) { return g * y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : node_of(x, "log")->data) {
    if (!(v > T(0))) throw DomainError("log: non-positive argument");
  }
  return unary_op(x, "log", [](T v) { return std::log(v); }, [](T v, T, T g) { return g / v; });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  for (T v : node_of(x, "reciprocal")->data) {
    if (v == T(0)) throw DomainError("reciprocal: zero argument");
  }
  return unary_op(
      x, "reciprocal", [](T v) { return T(1) / v; }, [](T, T y, T g) { return -g * y * y; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  for (T v : node_of(x, "sqrt")->data) {
    if (v < T(0)) throw DomainError("sqrt: negative argument");
  }
  return unary_op(
      x, "sqrt", [](T v) { return std::sqrt(v); },
      [](T, T y, T g) { return y > T(0) ? g / (T(2) * y) : T(0); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary_op(x, "square", [](T v) { return v * v; }, [](T v, T, T g) { return T(2) * v * g; });
}

template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  const auto& nx = node_of(x, "detach");
  return Tensor<T>(nx->shape, nx->data);
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  const auto& nx = node_of(x, "reshape");
  if (element_count(shape) != nx->data.size()) {
    throw DimensionError("reshape: cannot view " + to_string(nx->shape) + " as " +
                         to_string(shape));
  }
  Node<T>* rx = nx.get();
  return make_result<T>(std::move(shape), nx->data, {nx}, [rx](const Node<T>& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) rx->grad[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const auto& nx = node_of(x, "permute");
  const Shape& in = nx->shape;
  const std::size_t rank = in.size();
  std::vector<bool> seen(rank, false);
  if (order.size() != rank) throw DimensionError("permute: order rank mismatch");
  for (std::size_t a : order) {
    if (a >= rank || seen[a]) throw DimensionError("permute: invalid axis order");
    seen[a] = true;
  }
  const auto in_strides = strides_of(in);
  Shape out_shape(rank);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[order[i]];
    src_stride[i] = in_strides[order[i]];
  }
  // Source offset for each output element.
  const std::size_t n = nx->data.size();
  std::vector<std::size_t> source(n);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < n; ++o) {
      source[o] = off;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        off += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        off -= src_stride[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = nx->data[source[o]];
  Node<T>* rx = nx.get();
  return make_result<T>(std::move(out_shape), std::move(out), {nx},
                        [rx, source = std::move(source)](const Node<T>& o) {
                          for (std::size_t i = 0; i < source.size(); ++i) {
                            rx->grad[source[i]] += o.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  const std::size_t rank = x.rank();
  if (rank < 2) throw DimensionError("transpose: rank must be at least 2");
  std::vector<std::size_t> order(rank);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[rank - 1], order[rank - 2]);
  return permute(x, order);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = node_of(parts[0], "concat")->shape;
  const AxisView base = axis_view(first, axis, "concat");
  std::vector<NodePtr<T>> inputs;
  std::vector<std::size_t> lengths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& np = node_of(p, "concat");
    if (np->shape.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && np->shape[d] != first[d]) {
        throw DimensionError("concat: shape " + to_string(np->shape) + " incompatible with " +
                             to_string(first));
      }
    }
    inputs.push_back(np);
    lengths.push_back(np->shape[axis]);
    total += np->shape[axis];
  }
  Shape shape = first;
  shape[axis] = total;
  std::vector<T> out(element_count(shape));
  const std::size_t inner = base.inner;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t block = lengths[i] * inner;
    for (std::size_t o = 0; o < base.outer; ++o) {
      std::copy_n(inputs[i]->data.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + offset));
    }
    offset += block;
  }
  std::vector<Node<T>*> raw;
  for (auto& n : inputs) raw.push_back(n.get());
  return make_result<T>(std::move(shape), std::move(out), inputs,
                        [raw, lengths, total, inner, outer = base.outer](const Node<T>& o) {
                          std::size_t offset = 0;
                          for (std::size_t i = 0; i < raw.size(); ++i) {
                            const std::size_t block = lengths[i] * inner;
                            if (raw[i]->requires_grad) {
                              for (std::size_t b = 0; b < outer; ++b) {
                                for (std::size_t j = 0; j < block; ++j) {
                                  raw[i]->grad[b * block + j] +=
                                      o.grad[b * total * inner + offset + j];
                                }
                              }
                            }
                            offset += block;
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto& nx = node_of(x, "slice");
  const AxisView v = axis_view(nx->shape, axis, "slice");
  if (length == 0 || start + length > v.len) throw DimensionError("slice: range out of bounds");
  std::vector<std::size_t> indices(length);
  std::iota(indices.begin(), indices.end(), start);
  return index_select(x, axis, indices);
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, std::size_t axis,
                       const std::vector<std::size_t>& indices) {
  const auto& nx = node_of(x, "index_select");
  const AxisView v = axis_view(nx->shape, axis, "index_select");
  if (indices.empty()) throw DimensionError("index_select: empty index list");
  for (std::size_t i : indices) {
    if (i >= v.len) throw DimensionError("index_select: index out of range");
  }
  Shape shape = nx->shape;
  shape[axis] = indices.size();
  const std::size_t count = indices.size();
  std::vector<T> out(v.outer * count * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t j = 0; j < count; ++j) {
      std::copy_n(nx->data.begin() + static_cast<std::ptrdiff_t>((o * v.len + indices[j]) * v.inner),
                  v.inner, out.begin() + static_cast<std::ptrdiff_t>((o * count + j) * v.inner));
    }
  }
  Node<T>* rx = nx.get();
  return make_result<T>(std::move(shape), std::move(out), {nx},
                        [rx, v, indices](const Node<T>& o) {
                          const std::size_t count = indices.size();
                          for (std::size_t b = 0; b < v.outer; ++b) {
                            for (std::size_t j = 0; j < count; ++j) {
                              T* dst = rx->grad.data() + (b * v.len + indices[j]) * v.inner;
                              const T* src = o.grad.data() + (b * count + j) * v.inner;
                              for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& na = node_of(a, "matmul");
  const auto& nb = node_of(b, "matmul");
  const Shape& sa = na->shape;
  const Shape& sb = nb->shape;
  if (sa.size() < 2 || sb.size() < 2) throw DimensionError("matmul: operands must be rank >= 2");
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  const std::size_t kb = sb[sb.size() - 2];
  const std::size_t n = sb[sb.size() - 1];
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ in " + to_string(sa) + " x " +
                         to_string(sb));
  }
  const bool shared_b = sb.size() == 2;
  if (!shared_b && !std::equal(sa.begin(), sa.end() - 2, sb.begin(), sb.end() - 2)) {
    throw DimensionError("matmul: batch dimensions differ in " + to_string(sa) + " x " +
                         to_string(sb));
  }
  const std::size_t batch = element_count(Shape(sa.begin(), sa.end() - 2));
  Shape shape(sa.begin(), sa.end() - 2);
  shape.push_back(m);
  shape.push_back(n);
  std::vector<T> out(batch * m * n, T(0));
  for (std::size_t t = 0; t < batch; ++t) {
    gemm_nn(m, n, k, na->data.data() + t * m * k, nb->data.data() + (shared_b ? 0 : t * k * n),
            out.data() + t * m * n);
  }
  Node<T>* ra = na.get();
  Node<T>* rb = nb.get();
  return make_result<T>(std::move(shape), std::move(out), {na, nb},
                        [ra, rb, batch, m, n, k, shared_b](const Node<T>& o) {
                          for (std::size_t t = 0; t < batch; ++t) {
                            const T* g = o.grad.data() + t * m * n;
                            const std::size_t boff = shared_b ? 0 : t * k * n;
                            if (ra->requires_grad) {
                              gemm_nt(m, k, n, g, rb->data.data() + boff,
                                      ra->grad.data() + t * m * k);
                            }
                            if (rb->requires_grad) {
                              gemm_tn(k, n, m, ra->data.data() + t * m * k, g,
                                      rb->grad.data() + boff);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> squared_distances(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& na = node_of(a, "squared_distances");
  const auto& nb = node_of(b, "squared_distances");
  if (na->shape.size() != 2 || nb->shape.size() != 2 || na->shape[1] != nb->shape[1]) {
    throw DimensionError("squared_distances: expected [M, C] and [N, C], got " +
                         to_string(na->shape) + " and " + to_string(nb->shape));
  }
  const std::size_t m = na->shape[0];
  const std::size_t n = nb->shape[0];
  const std::size_t c = na->shape[1];
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = na->data.data() + i * c;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = nb->data.data() + j * c;
      T acc = T(0);
      for (std::size_t p = 0; p < c; ++p) {
        const T d = ai[p] - bj[p];
        acc += d * d;
      }
      out[i * n + j] = acc;
    }
  }
  Node<T>* ra = na.get();
  Node<T>* rb = nb.get();
  return make_result<T>(Shape{m, n}, std::move(out), {na, nb},
                        [ra, rb, m, n, c](const Node<T>& o) {
                          for (std::size_t i = 0; i < m; ++i) {
                            const T* ai = ra->data.data() + i * c;
                            for (std::size_t j = 0; j < n; ++j) {
                              const T g = T(2) * o.grad[i * n + j];
                              if (g == T(0)) continue;
                              const T* bj = rb->data.data() + j * c;
                              for (std::size_t p = 0; p < c; ++p) {
                                const T t = g * (ai[p] - bj[p]);
                                if (ra->requires_grad) ra->grad[i * c + p] += t;
                                if (rb->requires_grad) rb->grad[j * c + p] -= t;
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  const auto& nx = node_of(x, "conv2d");
  const auto& nw = node_of(kernels, "conv2d");
  const Shape& sx = nx->shape;
  const Shape& sw = nw->shape;
  if (sx.size() != 3) throw DimensionError("conv2d: input must be [C, H, W]");
  if (sw.size() != 4 || sw[2] != sw[3]) throw DimensionError("conv2d: kernels must be [O, C, k, k]");
  if (sw[1] != sx[0]) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(sw[1]) +
                         " channels, input has " + std::to_string(sx[0]));
  }
  if (sw[2] % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t channels = sx[0];
  const std::size_t height = sx[1];
  const std::size_t width = sx[2];
  const std::size_t outc = sw[0];
  const std::size_t ks = sw[2];
  if (height + 2 * padding < ks || width + 2 * padding < ks) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  const std::size_t oh = (height + 2 * padding - ks) / stride + 1;
  const std::size_t ow = (width + 2 * padding - ks) / stride + 1;
  const std::size_t patch = channels * ks * ks;
  const std::size_t pixels = oh * ow;

  NodePtr<T> nbias;
  if (bias.defined()) {
    nbias = bias.node();
    if (nbias->shape != Shape{outc}) throw DimensionError("conv2d: bias must be [O]");
  }

  // im2col: cols[(c, ky, kx), (y, x)]
  std::vector<T> cols(patch * pixels, T(0));
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < ks; ++ky) {
      for (std::size_t kx = 0; kx < ks; ++kx) {
        T* row = cols.data() + ((c * ks + ky) * ks + kx) * pixels;
        for (std::size_t y = 0; y < oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) -
                                    static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * stride + kx) -
                                      static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
            row[y * ow + xo] = nx->data[(c * height + static_cast<std::size_t>(iy)) * width +
                                        static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }

  std::vector<T> out(outc * pixels, T(0));
  if (nbias) {
    for (std::size_t o = 0; o < outc; ++o) {
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(o * pixels), pixels, nbias->data[o]);
    }
  }
  gemm_nn(outc, pixels, patch, nw->data.data(), cols.data(), out.data());

  std::vector<NodePtr<T>> inputs{nx, nw};
  if (nbias) inputs.push_back(nbias);
  Node<T>* rx = nx.get();
  Node<T>* rw = nw.get();
  Node<T>* rbias = nbias.get();
  return make_result<T>(
      Shape{outc, oh, ow}, std::move(out), std::move(inputs),
      [=, cols = std::move(cols)](const Node<T>& o) {
        const T* g = o.grad.data();
        if (rw->requires_grad) gemm_nt(outc, patch, pixels, g, cols.data(), rw->grad.data());
        if (rbias && rbias->requires_grad) {
          for (std::size_t oc = 0; oc < outc; ++oc) {
            T acc = T(0);
            for (std::size_t p = 0; p < pixels; ++p) acc += g[oc * pixels + p];
            rbias->grad[oc] += acc;
          }
        }
        if (!rx->requires_grad) return;
        std::vector<T> dcols(patch * pixels, T(0));
        gemm_tn(patch, pixels, outc, rw->data.data(), g, dcols.data());
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t ky = 0; ky < ks; ++ky) {
            for (std::size_t kx = 0; kx < ks; ++kx) {
              const T* row = dcols.data() + ((c * ks + ky) * ks + kx) * pixels;
              for (std::size_t y = 0; y < oh; ++y) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) -
                                          static_cast<std::ptrdiff_t>(padding);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
                for (std::size_t xo = 0; xo < ow; ++xo) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * stride + kx) -
                                            static_cast<std::ptrdiff_t>(padding);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
                  rx->grad[(c * height + static_cast<std::size_t>(iy)) * width +
                           static_cast<std::size_t>(ix)] += row[y * ow + xo];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto& nx = node_of(x, "sum");
  T acc = T(0);
  for (T v : nx->data) acc += v;
  Node<T>* rx = nx.get();
  return make_result<T>(Shape{}, {acc}, {nx}, [rx](const Node<T>& o) {
    for (T& g : rx->grad) g += o.grad[0];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis, bool keepdim) {
  const auto& nx = node_of(x, "sum");
  const AxisView v = axis_view(nx->shape, axis, "sum");
  std::vector<T> out(v.outer * v.inner, T(0));
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t l = 0; l < v.len; ++l) {
      const T* src = nx->data.data() + (o * v.len + l) * v.inner;
      T* dst = out.data() + o * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
    }
  }
  Node<T>* rx = nx.get();
  return make_result<T>(reduced_shape(nx->shape, axis, keepdim), std::move(out), {nx},
                        [rx, v](const Node<T>& o) {
                          for (std::size_t b = 0; b < v.outer; ++b) {
                            for (std::size_t l = 0; l < v.len; ++l) {
                              T* dst = rx->grad.data() + (b * v.len + l) * v.inner;
                              const T* g = o.grad.data() + b * v.inner;
                              for (std::size_t i = 0; i < v.inner; ++i) dst[i] += g[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return mul(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis, bool keepdim) {
  const std::size_t len = x.dim(axis);
  return mul(sum(x, axis, keepdim), T(1) / static_cast<T>(len));
}

namespace {

template <typename T, typename Better>
Tensor<T> extremum(const Tensor<T>& x, std::size_t axis, bool keepdim, const char* op,
                   Better better) {
  const auto& nx = node_of(x, op);
  const AxisView v = axis_view(nx->shape, axis, op);
  std::vector<T> out(v.outer * v.inner);
  std::vector<std::size_t> where(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      std::size_t best = 0;
      T best_value = nx->data[o * v.len * v.inner + i];
      for (std::size_t l = 1; l < v.len; ++l) {
        const T value = nx->data[(o * v.len + l) * v.inner + i];
        if (better(value, best_value)) {
          best = l;
          best_value = value;
        }
      }
      out[o * v.inner + i] = best_value;
      where[o * v.inner + i] = (o * v.len + best) * v.inner + i;
    }
  }
  Node<T>* rx = nx.get();
  return make_result<T>(reduced_shape(nx->shape, axis, keepdim), std::move(out), {nx},
                        [rx, where = std::move(where)](const Node<T>& o) {
                          for (std::size_t j = 0; j < where.size(); ++j) rx->grad[where[j]] += o.grad[j];
                        });
}

template <typename T, typename Better>
Tensor<T> extremum_all(const Tensor<T>& x, const char* op, Better better) {
  const auto& nx = node_of(x, op);
  std::size_t best = 0;
  for (std::size_t i = 1; i < nx->data.size(); ++i) {
    if (better(nx->data[i], nx->data[best])) best = i;
  }
  Node<T>* rx = nx.get();
  return make_result<T>(Shape{}, {nx->data[best]}, {nx},
                        [rx, best](const Node<T>& o) { rx->grad[best] += o.grad[0]; });
}

}  // namespace

template <typename T>
Tensor<T> max(const Tensor<T>& x, std::size_t axis, bool keepdim) {
  return extremum(x, axis, keepdim, "max", [](T a, T b) { return a > b; });
}

template <typename T>
Tensor<T> min(const Tensor<T>& x, std::size_t axis, bool keepdim) {
  return extremum(x, axis, keepdim, "min", [](T a, T b) { return a < b; });
}

template <typename T>
Tensor<T> max(const Tensor<T>& x) {
  return extremum_all(x, "max", [](T a, T b) { return a > b; });
}

template <typename T>
Tensor<T> min(const Tensor<T>& x) {
  return extremum_all(x, "min", [](T a, T b) { return a < b; });
}

template <typename T>
Tensor<T> frobenius_norm(const Tensor<T>& x) {
  const auto& nx = node_of(x, "frobenius_norm");
  T acc = T(0);
  for (T v : nx->data) acc += v * v;
  const T norm = std::sqrt(acc);
  Node<T>* rx = nx.get();
  return make_result<T>(Shape{}, {norm}, {nx}, [rx](const Node<T>& o) {
    const T n = o.data[0];
    if (n == T(0)) return;
    const T scale = o.grad[0] / n;
    for (std::size_t i = 0; i < rx->data.size(); ++i) rx->grad[i] += scale * rx->data[i];
  });
}

template <typename T>
std::vector<std::size_t> argmax(const Tensor<T>& x, std::size_t axis) {
  const auto& nx = node_of(x, "argmax");
  const AxisView v = axis_view(nx->shape, axis, "argmax");
  std::vector<std::size_t> out(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      std::size_t best = 0;
      for (std::size_t l = 1; l < v.len; ++l) {
        if (nx->data[(o * v.len + l) * v.inner + i] > nx->data[(o * v.len + best) * v.inner + i]) {
          best = l;
        }
      }
      out[o * v.inner + i] = best;
    }
  }
  return out;
}

template <typename T>
std::size_t argmax(const Tensor<T>& x) {
  const auto& d = node_of(x, "argmax")->data;
  return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto& nx = node_of(x, "softmax");
  const AxisView v = axis_view(nx->shape, axis, "softmax");
  std::vector<T> out(nx->data.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.len * v.inner + i;
      T top = nx->data[base];
      for (std::size_t l = 1; l < v.len; ++l) top = std::max(top, nx->data[base + l * v.inner]);
      T total = T(0);
      for (std::size_t l = 0; l < v.len; ++l) {
        const T e = std::exp(nx->data[base + l * v.inner] - top);
        out[base + l * v.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < v.len; ++l) out[base + l * v.inner] /= total;
    }
  }
  Node<T>* rx = nx.get();
  return make_result<T>(nx->shape, std::move(out), {nx}, [rx, v](const Node<T>& o) {
    for (std::size_t b = 0; b < v.outer; ++b) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = b * v.len * v.inner + i;
        T dot = T(0);
        for (std::size_t l = 0; l < v.len; ++l) {
          dot += o.grad[base + l * v.inner] * o.data[base + l * v.inner];
        }
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t j = base + l * v.inner;
          rx->grad[j] += o.data[j] * (o.grad[j] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const auto& nx = node_of(x, "log_softmax");
  const AxisView v = axis_view(nx->shape, axis, "log_softmax");
  std::vector<T> out(nx->data.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.len * v.inner + i;
      T top = nx->data[base];
      for (std::size_t l = 1; l < v.len; ++l) top = std::max(top, nx->data[base + l * v.inner]);
      T total = T(0);
      for (std::size_t l = 0; l < v.len; ++l) total += std::exp(nx->data[base + l * v.inner] - top);
      const T lse = top + std::log(total);
      for (std::size_t l = 0; l < v.len; ++l) {
        out[base + l * v.inner] = nx->data[base + l * v.inner] - lse;
      }
    }
  }
  Node<T>* rx = nx.get();
  return make_result<T>(nx->shape, std::move(out), {nx}, [rx, v](const Node<T>& o) {
    for (std::size_t b = 0; b < v.outer; ++b) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = b * v.len * v.inner + i;
        T total = T(0);
        for (std::size_t l = 0; l < v.len; ++l) total += o.grad[base + l * v.inner];
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t j = base + l * v.inner;
          rx->grad[j] += o.grad[j] - std::exp(o.data[j]) * total;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define CENTERSEG_INSTANTIATE_TENSOR(T)                                                        \
  template class Tape<T>;                                                                      \
  template class Tensor<T>;                                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> maximum(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> add(const Tensor<T>&, T);                                                 \
  template Tensor<T> mul(const Tensor<T>&, T);                                                 \
  template Tensor<T> rsub(const Tensor<T>&, T);                                                \
  template Tensor<T> neg(const Tensor<T>&);                                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> exp(const Tensor<T>&);                                                    \
  template Tensor<T> log(const Tensor<T>&);                                                    \
  template Tensor<T> reciprocal(const Tensor<T>&);                                             \
  template Tensor<T> sqrt(const Tensor<T>&);                                                   \
  template Tensor<T> square(const Tensor<T>&);                                                 \
  template Tensor<T> detach(const Tensor<T>&);                                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);               \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                       \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);           \
  template Tensor<T> index_select(const Tensor<T>&, std::size_t,                               \
                                  const std::vector<std::size_t>&);                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> squared_distances(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                            std::size_t);                                                      \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> sum(const Tensor<T>&, std::size_t, bool);                                 \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&, std::size_t, bool);                                \
  template Tensor<T> max(const Tensor<T>&, std::size_t, bool);                                 \
  template Tensor<T> min(const Tensor<T>&, std::size_t, bool);                                 \
  template Tensor<T> max(const Tensor<T>&);                                                    \
  template Tensor<T> min(const Tensor<T>&);                                                    \
  template Tensor<T> frobenius_norm(const Tensor<T>&);                                         \
  template std::vector<std::size_t> argmax(const Tensor<T>&, std::size_t);                     \
  template std::size_t argmax(const Tensor<T>&);                                               \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);

CENTERSEG_INSTANTIATE_TENSOR(float)
CENTERSEG_INSTANTIATE_TENSOR(double)

template Tensor<double> Tensor<float>::cast<double>() const;
template Tensor<float> Tensor<double>::cast<float>() const;
template Tensor<float> Tensor<float>::cast<float>() const;
template Tensor<double> Tensor<double>::cast<double>() const;

}  // namespace centerseg
