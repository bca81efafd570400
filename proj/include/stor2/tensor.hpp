#pragma once

// Dense tensors with define-by-run reverse-mode differentiation.
//
// A Tape records every operation of one forward pass. Values live in tape
// nodes; learnable state lives in Parameter objects that outlive tapes and
// receive accumulated gradients when Tape::backward runs. Matrix kernels are
// delegated to Eigen.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stor2/errors.hpp"

namespace stor2 {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Learnable tensor that persists across tapes.
template <class T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;

  Parameter() = default;
  Parameter(std::string n, Shape s)
      : name(std::move(n)), shape(std::move(s)), value(numel(shape), T(0)),
        grad(numel(shape), T(0)) {}

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <class T>
class Tape;

/// Handle to a node recorded on a tape. Cheap to copy.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool defined() const { return tape_ != nullptr; }

  const Shape& shape() const { return tape_->shape_of(id_); }
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const { return tape_->value_of(id_).size(); }
  std::span<const T> value() const { return tape_->value_of(id_); }
  std::vector<T> values() const {
    auto v = value();
    return {v.begin(), v.end()};
  }
  T item() const {
    if (size() != 1) throw ArgumentError("item() on non-scalar " + to_string(shape()));
    return value()[0];
  }
  /// Gradient after backward; zeros when the node was never reached.
  std::vector<T> grad() const { return tape_->grad_copy(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Shape shape, std::vector<T> values) {
    check_size(shape, values);
    return push(std::move(shape), std::move(values), false, {});
  }

  Var<T> zeros(Shape shape) {
    auto n = numel(shape);
    return push(std::move(shape), std::vector<T>(n, T(0)), false, {});
  }

  /// Leaf whose gradient is kept on the tape (inputs under gradient checks).
  Var<T> variable(Shape shape, std::vector<T> values) {
    check_size(shape, values);
    return push(std::move(shape), std::move(values), true, {});
  }

  /// Binds a parameter; its value is referenced, not copied.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {this, it->second};
    Node n;
    n.shape = p.shape;
    n.count = p.value.size();
    n.param = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    param_ids_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  /// Records an op output. `fn` runs during backward only when some input
  /// requires a gradient.
  Var<T> record(Shape shape, std::vector<T> values, std::initializer_list<Var<T>> inputs,
                BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    return push(std::move(shape), std::move(values), needs, needs ? std::move(fn) : BackwardFn{});
  }

  Var<T> record(Shape shape, std::vector<T> values, const std::vector<Var<T>>& inputs,
                BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    return push(std::move(shape), std::move(values), needs, needs ? std::move(fn) : BackwardFn{});
  }

  /// Populates gradients of everything upstream of a scalar root. Parameter
  /// gradients accumulate across calls; node gradients are recomputed.
  void backward(Var<T> root) {
    if (root.tape() != this) throw ArgumentError("backward: root belongs to another tape");
    if (nodes_[root.id()].count != 1)
      throw ArgumentError("backward: root must be scalar, got " +
                          to_string(nodes_[root.id()].shape));
    for (auto& n : nodes_)
      if (!n.param) n.grad.clear();
    if (!nodes_[root.id()].requires_grad) return;
    grad_of(root.id())[0] += T(1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  void clear() {
    nodes_.clear();
    param_ids_.clear();
  }

  std::size_t size() const { return nodes_.size(); }

  const Shape& shape_of(std::size_t id) const { return nodes_[id].shape; }
  std::span<const T> value_of(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.param) return {n.param->value.data(), n.count};
    return {n.storage.data(), n.count};
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Upstream gradient of an op output (always materialized when its
  /// backward rule runs).
  std::span<const T> upstream(std::size_t id) const {
    const Node& n = nodes_[id];
    return {n.grad.data(), n.grad.size()};
  }

  /// Mutable gradient buffer of an input, materialized on first touch.
  /// Parameter nodes write straight into Parameter::grad.
  std::span<T> grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.param) return {n.param->grad.data(), n.param->grad.size()};
    if (n.grad.empty()) n.grad.assign(n.count, T(0));
    return {n.grad.data(), n.grad.size()};
  }

  std::vector<T> grad_copy(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.param) return n.param->grad;
    if (n.grad.empty()) return std::vector<T>(n.count, T(0));
    return n.grad;
  }

 private:
  struct Node {
    Shape shape;
    std::vector<T> storage;
    std::size_t count = 0;
    std::vector<T> grad;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  static void check_size(const Shape& shape, const std::vector<T>& values) {
    if (numel(shape) != values.size())
      throw DimensionError("tensor of shape " + to_string(shape) + " given " +
                           std::to_string(values.size()) + " values");
  }

  Var<T> push(Shape shape, std::vector<T> values, bool requires_grad, BackwardFn fn) {
    Node n;
    n.shape = std::move(shape);
    n.storage = std::move(values);
    n.count = n.storage.size();
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_ids_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

template <class T>
void same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape() != b.tape()) throw ArgumentError(std::string(op) + ": operands on different tapes");
}

template <class T, class F, class G>
Var<T> unary(const Var<T>& a, F forward, G derivative) {
  auto in = a.value();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  auto ai = a.id();
  return a.tape()->record(a.shape(), std::move(out), {a}, [ai, derivative](Tape<T>& tp, std::size_t self) {
    if (!tp.requires_grad(ai)) return;
    auto up = tp.upstream(self);
    auto x = tp.value_of(ai);
    auto y = tp.value_of(self);
    auto g = tp.grad_of(ai);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i] * derivative(x[i], y[i]);
  });
}

}  // namespace detail

/// C = A·B for rank-2 operands.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw DimensionError("matmul: cannot multiply " + to_string(sa) + " by " + to_string(sb));
  const auto m = static_cast<Eigen::Index>(sa[0]);
  const auto k = static_cast<Eigen::Index>(sa[1]);
  const auto n = static_cast<Eigen::Index>(sb[1]);
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::MutMap<T>(out.data(), m, n).noalias() =
      detail::ConstMap<T>(a.value().data(), m, k) * detail::ConstMap<T>(b.value().data(), k, n);
  auto ai = a.id();
  auto bi = b.id();
  return a.tape()->record({sa[0], sb[1]}, std::move(out), {a, b},
                          [ai, bi, m, k, n](Tape<T>& tp, std::size_t self) {
                            detail::ConstMap<T> dc(tp.upstream(self).data(), m, n);
                            if (tp.requires_grad(ai)) {
                              detail::MutMap<T> da(tp.grad_of(ai).data(), m, k);
                              da.noalias() += dc * detail::ConstMap<T>(tp.value_of(bi).data(), k, n).transpose();
                            }
                            if (tp.requires_grad(bi)) {
                              detail::MutMap<T> db(tp.grad_of(bi).data(), k, n);
                              db.noalias() += detail::ConstMap<T>(tp.value_of(ai).data(), m, k).transpose() * dc;
                            }
                          });
}

/// a + b with equal shapes, or b broadcast along a's leading axis (bias add).
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "add");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool broadcast = false;
  if (sa != sb) {
    broadcast = !sa.empty() && sb.size() + 1 == sa.size() && std::equal(sb.begin(), sb.end(), sa.begin() + 1);
    if (!broadcast) throw DimensionError("add: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
  }
  auto av = a.value();
  auto bv = b.value();
  const std::size_t inner = bv.size();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % inner];
  auto ai = a.id();
  auto bi = b.id();
  return a.tape()->record(sa, std::move(out), {a, b}, [ai, bi, inner](Tape<T>& tp, std::size_t self) {
    auto up = tp.upstream(self);
    if (tp.requires_grad(ai)) {
      auto g = tp.grad_of(ai);
      for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
    }
    if (tp.requires_grad(bi)) {
      auto g = tp.grad_of(bi);
      for (std::size_t i = 0; i < up.size(); ++i) g[i % inner] += up[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "sub");
  if (a.shape() != b.shape())
    throw DimensionError("sub: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  auto av = a.value();
  auto bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  auto ai = a.id();
  auto bi = b.id();
  return a.tape()->record(a.shape(), std::move(out), {a, b}, [ai, bi](Tape<T>& tp, std::size_t self) {
    auto up = tp.upstream(self);
    if (tp.requires_grad(ai)) {
      auto g = tp.grad_of(ai);
      for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
    }
    if (tp.requires_grad(bi)) {
      auto g = tp.grad_of(bi);
      for (std::size_t i = 0; i < up.size(); ++i) g[i] -= up[i];
    }
  });
}

/// Elementwise (Hadamard) product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "mul");
  if (a.shape() != b.shape())
    throw DimensionError("mul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  auto av = a.value();
  auto bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  auto ai = a.id();
  auto bi = b.id();
  return a.tape()->record(a.shape(), std::move(out), {a, b}, [ai, bi](Tape<T>& tp, std::size_t self) {
    auto up = tp.upstream(self);
    if (tp.requires_grad(ai)) {
      auto g = tp.grad_of(ai);
      auto bv = tp.value_of(bi);
      for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * bv[i];
    }
    if (tp.requires_grad(bi)) {
      auto g = tp.grad_of(bi);
      auto av = tp.value_of(ai);
      for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x > T(0) ? x : T(0); },
                       [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T s) { return s * (T(1) - s); });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T t) { return T(1) - t * t; });
}

enum class Elementwise { add, relu, sigmoid, tanh };

/// Dispatcher over the elementwise family; `b` is required for add only.
template <class T>
Var<T> elementwise(Elementwise op, const Var<T>& a, const Var<T>* b = nullptr) {
  switch (op) {
    case Elementwise::add:
      if (!b) throw ArgumentError("elementwise add needs two operands");
      return add(a, *b);
    case Elementwise::relu: return relu(a);
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::tanh: return tanh(a);
  }
  throw ArgumentError("elementwise: unknown op");
}

/// Same values, new shape.
template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw DimensionError("reshape: " + to_string(a.shape()) + " to " + to_string(shape));
  auto v = a.value();
  auto ai = a.id();
  return a.tape()->record(std::move(shape), std::vector<T>(v.begin(), v.end()), {a},
                          [ai](Tape<T>& tp, std::size_t self) {
                            auto up = tp.upstream(self);
                            auto g = tp.grad_of(ai);
                            for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                          });
}

/// Joins parts along `axis`; every other extent must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat: empty list");
  const Shape& first = parts.front().shape();
  if (axis >= first.size())
    throw ArgumentError("concat: axis " + std::to_string(axis) + " out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    detail::same_tape(parts.front(), p, "concat");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d)
      if (d != axis && s[d] != first[d]) ok = false;
    if (!ok) throw DimensionError("concat: " + to_string(s) + " does not match " + to_string(first));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  std::vector<std::size_t> blocks;
  std::vector<std::size_t> ids;
  std::size_t row = 0;
  for (const auto& p : parts) {
    blocks.push_back(p.shape()[axis] * inner);
    ids.push_back(p.id());
    row += blocks.back();
  }
  std::vector<T> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + o * blocks[k], blocks[k], out.begin() + o * row + offset);
    offset += blocks[k];
  }
  return parts.front().tape()->record(
      std::move(out_shape), std::move(out), parts,
      [ids, blocks, outer, row](Tape<T>& tp, std::size_t self) {
        auto up = tp.upstream(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (tp.requires_grad(ids[k])) {
            auto g = tp.grad_of(ids[k]);
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t j = 0; j < blocks[k]; ++j) g[o * blocks[k] + j] += up[o * row + offset + j];
          }
          offset += blocks[k];
        }
      });
}

/// Reduces one axis by summation. Reducing the only axis yields a scalar.
template <class T>
Var<T> sum_axis(const Var<T>& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size())
    throw ArgumentError("sum_axis: axis " + std::to_string(axis) + " out of range for " + to_string(s));
  std::size_t outer = 1, inner = 1;
  const std::size_t len = s[axis];
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape out_shape;
  for (std::size_t d = 0; d < s.size(); ++d)
    if (d != axis) out_shape.push_back(s[d]);
  auto v = a.value();
  std::vector<T> out(outer * inner, T(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * len + l) * inner + i];
  auto ai = a.id();
  return a.tape()->record(std::move(out_shape), std::move(out), {a},
                          [ai, outer, len, inner](Tape<T>& tp, std::size_t self) {
                            auto up = tp.upstream(self);
                            auto g = tp.grad_of(ai);
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t l = 0; l < len; ++l)
                                for (std::size_t i = 0; i < inner; ++i)
                                  g[(o * len + l) * inner + i] += up[o * inner + i];
                          });
}

/// Sum of every element, as a scalar.
template <class T>
Var<T> sum(const Var<T>& a) {
  return sum_axis(reshape(a, {a.size()}), 0);
}

/// Row `index` of a [C x d] table as a [d] vector.
template <class T>
Var<T> embedding_lookup(const Var<T>& table, std::size_t index) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw DimensionError("embedding_lookup: table must be rank 2, got " + to_string(s));
  if (index >= s[0])
    throw RangeError("embedding_lookup: index " + std::to_string(index) + " >= " + std::to_string(s[0]));
  const std::size_t d = s[1];
  auto v = table.value();
  auto ti = table.id();
  return table.tape()->record({d}, std::vector<T>(v.begin() + index * d, v.begin() + (index + 1) * d), {table},
                              [ti, index, d](Tape<T>& tp, std::size_t self) {
                                auto up = tp.upstream(self);
                                auto g = tp.grad_of(ti);
                                for (std::size_t j = 0; j < d; ++j) g[index * d + j] += up[j];
                              });
}

/// Batched lookup: rows `indices` of a [C x d] table stacked into [R x d].
template <class T>
Var<T> gather_rows(const Var<T>& table, std::vector<std::size_t> indices) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw DimensionError("gather_rows: table must be rank 2, got " + to_string(s));
  const std::size_t d = s[1];
  auto v = table.value();
  std::vector<T> out(indices.size() * d);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= s[0])
      throw RangeError("gather_rows: index " + std::to_string(indices[r]) + " >= " + std::to_string(s[0]));
    std::copy_n(v.begin() + indices[r] * d, d, out.begin() + r * d);
  }
  auto ti = table.id();
  const std::size_t rows = indices.size();
  return table.tape()->record({rows, d}, std::move(out), {table},
                              [ti, d, idx = std::move(indices)](Tape<T>& tp, std::size_t self) {
                                auto up = tp.upstream(self);
                                auto g = tp.grad_of(ti);
                                for (std::size_t r = 0; r < idx.size(); ++r)
                                  for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += up[r * d + j];
                              });
}

/// Scatter-add of the rows of x [R x d] into `segments` output rows.
/// A negative segment id drops the row.
template <class T>
Var<T> segment_sum(const Var<T>& x, std::vector<std::ptrdiff_t> segment_ids, std::size_t segments) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw DimensionError("segment_sum: input must be rank 2, got " + to_string(s));
  if (segment_ids.size() != s[0])
    throw DimensionError("segment_sum: " + std::to_string(segment_ids.size()) + " ids for " + to_string(s));
  const std::size_t d = s[1];
  auto v = x.value();
  std::vector<T> out(segments * d, T(0));
  for (std::size_t r = 0; r < segment_ids.size(); ++r) {
    const auto seg = segment_ids[r];
    if (seg < 0) continue;
    if (static_cast<std::size_t>(seg) >= segments)
      throw RangeError("segment_sum: segment " + std::to_string(seg) + " >= " + std::to_string(segments));
    for (std::size_t j = 0; j < d; ++j) out[static_cast<std::size_t>(seg) * d + j] += v[r * d + j];
  }
  auto xi = x.id();
  return x.tape()->record({segments, d}, std::move(out), {x},
                          [xi, d, ids = std::move(segment_ids)](Tape<T>& tp, std::size_t self) {
                            auto up = tp.upstream(self);
                            auto g = tp.grad_of(xi);
                            for (std::size_t r = 0; r < ids.size(); ++r) {
                              if (ids[r] < 0) continue;
                              const auto seg = static_cast<std::size_t>(ids[r]);
                              for (std::size_t j = 0; j < d; ++j) g[r * d + j] += up[seg * d + j];
                            }
                          });
}

/// Rows [first, first + count) of a rank-2 tensor.
template <class T>
Var<T> slice_rows(const Var<T>& a, std::size_t first, std::size_t count) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw DimensionError("slice_rows: input must be rank 2, got " + to_string(s));
  if (first + count > s[0])
    throw RangeError("slice_rows: rows [" + std::to_string(first) + ", " + std::to_string(first + count) +
                     ") outside " + to_string(s));
  const std::size_t n = s[1];
  auto v = a.value();
  auto ai = a.id();
  return a.tape()->record({count, n}, std::vector<T>(v.begin() + first * n, v.begin() + (first + count) * n), {a},
                          [ai, first, n](Tape<T>& tp, std::size_t self) {
                            auto up = tp.upstream(self);
                            auto g = tp.grad_of(ai);
                            for (std::size_t i = 0; i < up.size(); ++i) g[first * n + i] += up[i];
                          });
}

/// Numerically stable softmax of one row.
template <class T>
std::vector<T> softmax(std::span<const T> logits) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : logits) mx = std::max(mx, v);
  std::vector<T> p(logits.size());
  T z = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

enum class Reduction { mean, sum };

/// Cross-entropy of softmax(logits) against integer targets. `logits` is
/// [K] (one target) or [B x K] (one target per row).
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::size_t> targets,
                             Reduction reduction = Reduction::mean) {
  const Shape& s = logits.shape();
  if (s.empty() || s.size() > 2) throw DimensionError("softmax_cross_entropy: logits " + to_string(s));
  const std::size_t rows = s.size() == 1 ? 1 : s[0];
  const std::size_t k = s.back();
  if (targets.size() != rows)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " + to_string(s));
  auto v = logits.value();
  for (T x : v)
    if (!std::isfinite(x)) throw NumericError("softmax_cross_entropy: non-finite logit");
  const T weight = reduction == Reduction::mean ? T(1) / static_cast<T>(rows) : T(1);
  std::vector<T> probs(v.size());
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= k)
      throw RangeError("softmax_cross_entropy: target " + std::to_string(targets[r]) + " >= " + std::to_string(k));
    auto row = v.subspan(r * k, k);
    T mx = *std::max_element(row.begin(), row.end());
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const T lse = mx + std::log(z);
    loss += weight * (lse - row[targets[r]]);
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - lse);
  }
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  auto li = logits.id();
  return logits.tape()->record({}, {loss}, {logits},
                               [li, k, weight, probs = std::move(probs), tg = std::move(tg)](Tape<T>& tp, std::size_t self) {
                                 const T up = tp.upstream(self)[0] * weight;
                                 auto g = tp.grad_of(li);
                                 for (std::size_t r = 0; r < tg.size(); ++r)
                                   for (std::size_t j = 0; j < k; ++j)
                                     g[r * k + j] += up * (probs[r * k + j] - (j == tg[r] ? T(1) : T(0)));
                               });
}

template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::size_t target) {
  const std::size_t t[1] = {target};
  return softmax_cross_entropy(logits, std::span<const std::size_t>(t, 1), Reduction::sum);
}

}  // namespace stor2
