#pragma once

#include "cyb/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace cyb {

template <typename Scalar>
class BasicTape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
struct BasicVar {
  BasicTape<Scalar>* tape = nullptr;
  Index id = -1;

  const BasicTensor<Scalar>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  Index numel() const { return value().numel(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Append-only record of primitive ops for reverse-mode differentiation.
///
/// Nodes are stored in creation order, so every input precedes its output and
/// a single reverse sweep is a valid topological traversal. Ops whose inputs
/// all have `requires_grad == false` are recorded without a backward rule.
template <typename Scalar>
class BasicTape {
 public:
  using TensorT = BasicTensor<Scalar>;
  using Var = BasicVar<Scalar>;
  using BackwardFn = std::function<void(BasicTape&, const TensorT& out_grad)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;
  BasicTape(BasicTape&&) noexcept = default;
  BasicTape& operator=(BasicTape&&) noexcept = default;

  Var leaf(TensorT value, bool requires_grad = true) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    n.op = "leaf";
    return push(std::move(n));
  }

  /// Leaf that refers to caller-owned storage; `value` must outlive the tape.
  Var leaf_ref(const TensorT& value, bool requires_grad = true) {
    Node n;
    n.external = &value;
    n.requires_grad = requires_grad;
    n.op = "leaf";
    return push(std::move(n));
  }

  Var constant(TensorT value) { return leaf(std::move(value), false); }

  /// Records an op output. `fn` runs during backward only if some input needs a gradient.
  Var record(std::string op, TensorT value, std::initializer_list<Var> inputs, BackwardFn fn) {
    Node n;
    n.owned = std::move(value);
    n.op = std::move(op);
    for (const Var& v : inputs) {
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_.at(static_cast<std::size_t>(v.id)).requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  Var record(std::string op, TensorT value, const std::vector<Var>& inputs, BackwardFn fn) {
    Node n;
    n.owned = std::move(value);
    n.op = std::move(op);
    for (const Var& v : inputs) {
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_.at(static_cast<std::size_t>(v.id)).requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const TensorT& value(Var v) const { return node(v.id).get(); }
  const TensorT& value(Index id) const { return node(id).get(); }
  bool requires_grad(Var v) const { return node(v.id).requires_grad; }
  bool requires_grad(Index id) const { return node(id).requires_grad; }
  const std::string& op_name(Var v) const { return node(v.id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward target w.r.t. `v`; zeros if `v` was not reached.
  TensorT grad(Var v) const {
    const Node& n = node(v.id);
    if (n.has_grad) return n.grad;
    return TensorT::zeros(n.get().shape());
  }

  /// Mutable gradient accumulator for node `id`, zero-initialised on first use.
  TensorT& grad_buffer(Index id) {
    Node& n = node(id);
    if (!n.has_grad) {
      n.grad = TensorT::zeros(n.get().shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient buffer for node `id`. When `fresh` comes back true the storage is
  /// uninitialised and the caller must assign rather than accumulate.
  TensorT& grad_slot(Index id, bool& fresh) {
    Node& n = node(id);
    fresh = !n.has_grad;
    if (fresh) {
      n.grad = TensorT::uninitialized(n.get().shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Adds `g` (same element count as node `id`) into its gradient, allocating
  /// on first use without a separate zero fill.
  template <typename Expr>
  void accumulate(Index id, const Expr& g) {
    Node& n = node(id);
    if (!n.has_grad) {
      n.grad = TensorT(n.get().shape(), typename TensorT::Vector(g));
      n.has_grad = true;
    } else {
      n.grad.data() += g;
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) {
      n.grad = TensorT();
      n.has_grad = false;
    }
  }

  /// Reverse sweep from a single-element `loss`, seeded with d(loss)/d(loss) = 1.
  void backward(Var loss) {
    if (nodes_.empty()) return;
    if (value(loss).numel() != 1) {
      throw DimensionError("backward needs a single-element loss, got shape " +
                           shape_str(value(loss).shape()));
    }
    zero_grad();
    grad_buffer(loss.id).data().setOnes();
    for (Index i = loss.id; i >= 0; --i) {
      Node& n = node(i);
      if (!n.has_grad || !n.backward) continue;
      // The rule may append to other nodes' grads but never to its own.
      n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    TensorT owned;
    const TensorT* external = nullptr;
    TensorT grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<Index> inputs;
    BackwardFn backward;
    std::string op;

    const TensorT& get() const { return external ? *external : owned; }
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<Index>(nodes_.size()) - 1};
  }
  Node& node(Index id) { return nodes_.at(static_cast<std::size_t>(id)); }
  const Node& node(Index id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  // A deque keeps value() references valid while later ops are appended.
  std::deque<Node> nodes_;
};

using Tape = BasicTape<double>;
using Var = BasicVar<double>;

// ---------------------------------------------------------------------------
// Primitive ops. Each returns a new Var on the operands' tape.

namespace detail {

inline Shape strip_leading_ones(Shape s) {
  std::size_t k = 0;
  while (k + 1 < s.size() && s[k] == 1) ++k;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(k), s.end());
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

/// Result shape of a trailing-dimension broadcast, or throws.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a == b) return a;
  const Index na = shape_numel(a), nb = shape_numel(b);
  if (nb == 1 && na >= 1) return a;
  if (na == 1) return b;
  if (na >= nb && is_suffix(strip_leading_ones(b), a)) return a;
  if (nb > na && is_suffix(strip_leading_ones(a), b)) return b;
  throw DimensionError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b) +
                       " (only trailing-dimension alignment is supported)");
}

/// Layout helper for reductions along one axis: outer x len x inner.
struct AxisLayout {
  Index outer = 1, len = 1, inner = 1;
};

inline AxisLayout axis_layout(const Shape& shape, Index axis) {
  const Index nd = static_cast<Index>(shape.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  AxisLayout l;
  for (Index i = 0; i < axis; ++i) l.outer *= shape[static_cast<std::size_t>(i)];
  l.len = shape[static_cast<std::size_t>(axis)];
  for (Index i = axis + 1; i < nd; ++i) l.inner *= shape[static_cast<std::size_t>(i)];
  return l;
}

inline Index normalize_axis(const Shape& shape, Index axis) {
  return axis < 0 ? axis + static_cast<Index>(shape.size()) : axis;
}

inline constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC = 0.044715;

template <typename Scalar>
Scalar gelu_value(Scalar x) {
  const Scalar k = Scalar(kGeluK), c = Scalar(kGeluC);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(k * (x + c * x * x * x)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar k = Scalar(kGeluK), c = Scalar(kGeluC);
  const Scalar t = std::tanh(k * (x + c * x * x * x));
  const Scalar du = k * (Scalar(1) + Scalar(3) * c * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * du;
}

/// tanh(k (x + c x^3)) through exp, which Eigen vectorises.
template <typename ArrayExpr>
auto gelu_tanh(const ArrayExpr& x) {
  using Scalar = typename ArrayExpr::Scalar;
  const auto u = (Scalar(kGeluK) * (x + Scalar(kGeluC) * x.cube())).eval();
  // 1 - 2 / (exp(2u) + 1); saturates cleanly at +-1 when exp over/underflows.
  return (Scalar(1) - Scalar(2) / ((Scalar(2) * u).exp() + Scalar(1))).eval();
}

template <typename Scalar>
using RowMap = Eigen::Map<typename BasicTensor<Scalar>::RowMatrix>;
template <typename Scalar>
using ConstRowMap = Eigen::Map<const typename BasicTensor<Scalar>::RowMatrix>;

/// Views a flat buffer of `n` values as rows of a broadcast operand of `k` values.
template <typename Scalar>
ConstRowMap<Scalar> tiles(const Scalar* p, Index n, Index k) {
  return ConstRowMap<Scalar>(p, n / k, k);
}
template <typename Scalar>
RowMap<Scalar> tiles_mut(Scalar* p, Index n, Index k) {
  return RowMap<Scalar>(p, n / k, k);
}

}  // namespace detail

template <typename Scalar>
BasicVar<Scalar> matmul(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  }
  auto out = BasicTensor<Scalar>::uninitialized({av.dim(0), bv.dim(1)});
  out.matrix().noalias() = av.matrix() * bv.matrix();
  const Index ia = a.id, ib = b.id;
  return a.tape->record("matmul", std::move(out), {a, b},
                        [ia, ib](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
                          bool fresh = false;
                          if (t.requires_grad(ia)) {
                            auto acc = t.grad_slot(ia, fresh).matrix();
                            const auto prod = g.matrix() * t.value(ib).matrix().transpose();
                            if (fresh) acc.noalias() = prod;
                            else acc.noalias() += prod;
                          }
                          if (t.requires_grad(ib)) {
                            auto acc = t.grad_slot(ib, fresh).matrix();
                            const auto prod = t.value(ia).matrix().transpose() * g.matrix();
                            if (fresh) acc.noalias() = prod;
                            else acc.noalias() += prod;
                          }
                        });
}

enum class ElementwiseOp { add, sub, mul, relu, gelu };

template <typename Scalar>
BasicVar<Scalar> elementwise(ElementwiseOp op, BasicVar<Scalar> a, BasicVar<Scalar> b) {
  if (op == ElementwiseOp::relu || op == ElementwiseOp::gelu) {
    throw std::invalid_argument("relu/gelu are unary");
  }
  const auto& av = a.value();
  const auto& bv = b.value();
  const Shape out_shape = detail::broadcast_shape(av.shape(), bv.shape());
  auto out = BasicTensor<Scalar>::uninitialized(out_shape);
  const Index n = out.numel(), na = av.numel(), nb = bv.numel();
  auto combine = [op](auto& o, const auto& x, const auto& y) {
    switch (op) {
      case ElementwiseOp::add: o = x + y; break;
      case ElementwiseOp::sub: o = x - y; break;
      default: o = x * y; break;
    }
  };
  if (n == 0) {
  } else if (na == n && nb == n) {
    auto o = out.data().array();
    combine(o, av.data().array(), bv.data().array());
  } else {
    // One side spans the result; the other repeats along its rows.
    auto o = detail::tiles_mut(out.raw(), n, na == n ? nb : na).array();
    if (na == n) {
      const auto y = bv.data().transpose().array().replicate(n / nb, 1);
      combine(o, detail::tiles(av.raw(), n, nb).array(), y);
    } else {
      const auto x = av.data().transpose().array().replicate(n / na, 1);
      combine(o, x, detail::tiles(bv.raw(), n, na).array());
    }
  }
  const Index ia = a.id, ib = b.id;
  const char* name = op == ElementwiseOp::add ? "add" : op == ElementwiseOp::sub ? "sub" : "mul";
  return a.tape->record(
      name, std::move(out), {a, b},
      [ia, ib, op, n, na, nb](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
        // d/d(operand) of the product is g times the other operand, tiled as in forward.
        auto grad_for = [&](Index self, Index nself, Index other, Index nother, Scalar sign) {
          if (!t.requires_grad(self)) return;
          if (op != ElementwiseOp::mul) {
            if (nself == n) {
              if (sign > 0) t.accumulate(self, g.data());
              else t.accumulate(self, -g.data());
            } else {
              auto& acc = t.grad_buffer(self);
              acc.data() += sign * detail::tiles(g.raw(), n, nself).colwise().sum().transpose();
            }
            return;
          }
          const auto& ov = t.value(other);
          if (nself == n && nother == n) {
            t.accumulate(self, g.data().cwiseProduct(ov.data()));
          } else if (nself == n) {
            const auto prod = (detail::tiles(g.raw(), n, nother).array().rowwise() *
                               ov.data().transpose().array())
                                  .eval();
            t.accumulate(self, Eigen::Map<const typename BasicTensor<Scalar>::Vector>(prod.data(), n));
          } else {
            auto& acc = t.grad_buffer(self);
            acc.data() += (detail::tiles(g.raw(), n, nself).array() *
                           detail::tiles(ov.raw(), n, nself).array())
                              .colwise()
                              .sum()
                              .transpose()
                              .matrix();
          }
        };
        grad_for(ia, na, ib, nb, Scalar(1));
        grad_for(ib, nb, ia, na, op == ElementwiseOp::sub ? Scalar(-1) : Scalar(1));
      });
}

template <typename Scalar>
BasicVar<Scalar> elementwise(ElementwiseOp op, BasicVar<Scalar> a) {
  if (op != ElementwiseOp::relu && op != ElementwiseOp::gelu) {
    throw std::invalid_argument("binary elementwise op needs two operands");
  }
  const auto x = a.value().data().array();
  auto out = BasicTensor<Scalar>::uninitialized(a.shape());
  const Index ia = a.id;
  if (op == ElementwiseOp::relu) {
    out.data() = x.cwiseMax(Scalar(0)).matrix();
    return a.tape->record("relu", std::move(out), {a},
                          [ia](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
                            const auto xv = t.value(ia).data().array();
                            t.accumulate(ia, (xv > Scalar(0)).select(g.data().array(), Scalar(0)).matrix());
                          });
  }
  auto th = detail::gelu_tanh(x);
  out.data() = (Scalar(0.5) * x * (Scalar(1) + th)).matrix();
  return a.tape->record(
      "gelu", std::move(out), {a},
      [ia, th = std::move(th)](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
        const auto xv = t.value(ia).data().array();
        const Scalar k = Scalar(detail::kGeluK), c = Scalar(detail::kGeluC);
        const auto du = k * (Scalar(1) + Scalar(3) * c * xv.square());
        const auto d = Scalar(0.5) * (Scalar(1) + th) + Scalar(0.5) * xv * (Scalar(1) - th.square()) * du;
        t.accumulate(ia, (g.data().array() * d).matrix());
      });
}

template <typename Scalar>
BasicVar<Scalar> add(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  return elementwise(ElementwiseOp::add, a, b);
}
template <typename Scalar>
BasicVar<Scalar> sub(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  return elementwise(ElementwiseOp::sub, a, b);
}
template <typename Scalar>
BasicVar<Scalar> mul(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  return elementwise(ElementwiseOp::mul, a, b);
}
template <typename Scalar>
BasicVar<Scalar> relu(BasicVar<Scalar> a) {
  return elementwise(ElementwiseOp::relu, a);
}
template <typename Scalar>
BasicVar<Scalar> gelu(BasicVar<Scalar> a) {
  return elementwise(ElementwiseOp::gelu, a);
}

/// Multiplies by a constant.
template <typename Scalar>
BasicVar<Scalar> scale(BasicVar<Scalar> a, Scalar s) {
  BasicTensor<Scalar> out(a.shape(), a.value().data() * s);
  const Index ia = a.id;
  return a.tape->record("scale", std::move(out), {a},
                        [ia, s](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
                          t.accumulate(ia, g.data() * s);
                        });
}

/// log(1 + exp(x)), evaluated without overflow.
template <typename Scalar>
BasicVar<Scalar> softplus(BasicVar<Scalar> a) {
  auto out = BasicTensor<Scalar>::uninitialized(a.shape());
  out.data() = a.value().data().unaryExpr([](Scalar x) {
    return x > Scalar(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  });
  const Index ia = a.id;
  return a.tape->record("softplus", std::move(out), {a},
                        [ia](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
                          const auto& x = t.value(ia).data();
                          t.accumulate(ia, g.data().cwiseProduct(x.unaryExpr(
                              [](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); })));
                        });
}

template <typename Scalar>
BasicVar<Scalar> reshape(BasicVar<Scalar> a, Shape shape) {
  BasicTensor<Scalar> out = a.value().reshaped(std::move(shape));
  const Index ia = a.id;
  return a.tape->record("reshape", std::move(out), {a},
                        [ia](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
                          t.accumulate(ia, g.data());
                        });
}

template <typename Scalar>
BasicVar<Scalar> transpose(BasicVar<Scalar> a) {
  const auto& av = a.value();
  if (av.ndim() != 2) throw DimensionError("transpose needs a matrix, got " + shape_str(av.shape()));
  auto out = BasicTensor<Scalar>::uninitialized({av.dim(1), av.dim(0)});
  out.matrix() = av.matrix().transpose();
  const Index ia = a.id;
  return a.tape->record("transpose", std::move(out), {a},
                        [ia](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
                          t.grad_buffer(ia).matrix() += g.matrix().transpose();
                        });
}

/// Columns [begin, begin + count) of a matrix.
template <typename Scalar>
BasicVar<Scalar> slice_cols(BasicVar<Scalar> a, Index begin, Index count) {
  const auto& av = a.value();
  if (av.ndim() != 2 || begin < 0 || count < 1 || begin + count > av.dim(1)) {
    throw DimensionError("column slice [" + std::to_string(begin) + ", +" +
                         std::to_string(count) + ") invalid for " + shape_str(av.shape()));
  }
  auto out = BasicTensor<Scalar>::uninitialized({av.dim(0), count});
  out.matrix() = av.matrix().middleCols(begin, count);
  const Index ia = a.id;
  return a.tape->record("slice_cols", std::move(out), {a},
                        [ia, begin, count](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
                          t.grad_buffer(ia).matrix().middleCols(begin, count) += g.matrix();
                        });
}

/// Horizontal concatenation of matrices with equal row counts.
template <typename Scalar>
BasicVar<Scalar> concat_cols(const std::vector<BasicVar<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols needs at least one operand");
  const Index rows = parts.front().value().dim(0);
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.value().ndim() != 2 || p.value().dim(0) != rows) {
      throw DimensionError("concat_cols row mismatch: " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    }
    cols += p.value().dim(1);
  }
  auto out = BasicTensor<Scalar>::uninitialized({rows, cols});
  std::vector<Index> ids, offsets;
  Index c = 0;
  for (const auto& p : parts) {
    out.matrix().middleCols(c, p.value().dim(1)) = p.value().matrix();
    ids.push_back(p.id);
    offsets.push_back(c);
    c += p.value().dim(1);
  }
  return parts.front().tape->record(
      "concat_cols", std::move(out), parts,
      [ids, offsets](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          auto& acc = t.grad_buffer(ids[k]);
          acc.matrix() += g.matrix().middleCols(offsets[k], acc.dim(1));
        }
      });
}

/// Row `row` of a matrix as a 1-D tensor (embedding lookup).
template <typename Scalar>
BasicVar<Scalar> take_row(BasicVar<Scalar> table, Index row) {
  const auto& tv = table.value();
  if (tv.ndim() != 2 || row < 0 || row >= tv.dim(0)) {
    throw DimensionError("row " + std::to_string(row) + " out of range for " +
                         shape_str(tv.shape()));
  }
  auto out = BasicTensor<Scalar>::uninitialized({tv.dim(1)});
  out.data() = tv.matrix().row(row).transpose();
  const Index ia = table.id;
  return table.tape->record("take_row", std::move(out), {table},
                            [ia, row](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
                              t.grad_buffer(ia).matrix().row(row) += g.data().transpose();
                            });
}

/// Sets entries above the diagonal of a square matrix to -inf.
template <typename Scalar>
BasicVar<Scalar> causal_mask(BasicVar<Scalar> scores) {
  const auto& sv = scores.value();
  if (sv.ndim() != 2 || sv.dim(0) != sv.dim(1)) {
    throw DimensionError("causal mask needs a square matrix, got " + shape_str(sv.shape()));
  }
  BasicTensor<Scalar> out = sv;
  const Index n = sv.dim(0);
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) out.at({i, j}) = -std::numeric_limits<Scalar>::infinity();
  }
  const Index ia = scores.id;
  return scores.tape->record("causal_mask", std::move(out), {scores},
                             [ia, n](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
                               auto& acc = t.grad_buffer(ia);
                               for (Index i = 0; i < n; ++i) {
                                 for (Index j = 0; j <= i; ++j) acc.at({i, j}) += g.at({i, j});
                               }
                             });
}

/// Softmax along `axis` with max subtraction.
template <typename Scalar>
BasicVar<Scalar> softmax(BasicVar<Scalar> x, Index axis) {
  const auto& xv = x.value();
  const auto l = detail::axis_layout(xv.shape(), axis);
  auto out = BasicTensor<Scalar>::uninitialized(xv.shape());
  const Scalar* in = xv.raw();
  Scalar* o = out.raw();
  for (Index a = 0; a < l.outer; ++a) {
    for (Index c = 0; c < l.inner; ++c) {
      const Index base = a * l.len * l.inner + c;
      Scalar m = -std::numeric_limits<Scalar>::infinity();
      for (Index k = 0; k < l.len; ++k) m = std::max(m, in[base + k * l.inner]);
      Scalar s = 0;
      for (Index k = 0; k < l.len; ++k) {
        const Scalar e = std::exp(in[base + k * l.inner] - m);
        o[base + k * l.inner] = e;
        s += e;
      }
      for (Index k = 0; k < l.len; ++k) o[base + k * l.inner] /= s;
    }
  }
  const Index ix = x.id, self = x.tape->size();
  return x.tape->record(
      "softmax", std::move(out), {x}, [ix, self, l](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
        const Scalar* y = t.value(self).raw();
        const Scalar* gy = g.raw();
        Scalar* acc = t.grad_buffer(ix).raw();
        for (Index a = 0; a < l.outer; ++a) {
          for (Index c = 0; c < l.inner; ++c) {
            const Index base = a * l.len * l.inner + c;
            Scalar dot = 0;
            for (Index k = 0; k < l.len; ++k) dot += y[base + k * l.inner] * gy[base + k * l.inner];
            for (Index k = 0; k < l.len; ++k) {
              const Index i = base + k * l.inner;
              acc[i] += y[i] * (gy[i] - dot);
            }
          }
        }
      });
}

/// Normalises each row over the last axis, then applies `gain` and `bias`.
/// A zero-variance row maps to `bias`.
template <typename Scalar>
BasicVar<Scalar> layernorm(BasicVar<Scalar> x, BasicVar<Scalar> gain, BasicVar<Scalar> bias,
                           Scalar eps = Scalar(1e-5)) {
  const auto& xv = x.value();
  const Index d = xv.last_dim();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layernorm over last axis " + std::to_string(d) + " got gain " +
                         shape_str(gain.shape()) + " and bias " + shape_str(bias.shape()));
  }
  if (!(eps > 0)) throw std::invalid_argument("layernorm eps must be positive");
  const Index rows = xv.numel() / d;
  using Vec = typename BasicTensor<Scalar>::Vector;
  Vec rstd(rows);
  auto xhat = BasicTensor<Scalar>::uninitialized(xv.shape());
  auto out = BasicTensor<Scalar>::uninitialized(xv.shape());
  const auto gr = gain.value().data().transpose().array();
  const auto br = bias.value().data().transpose().array();
  for (Index r = 0; r < rows; ++r) {
    const auto row = xv.matrix().row(r).array();
    const Scalar mu = row.mean();
    const Scalar var = (row - mu).square().mean();
    rstd[r] = Scalar(1) / std::sqrt(var + eps);
    xhat.matrix().row(r) = ((row - mu) * rstd[r]).matrix();
    out.matrix().row(r) = (xhat.matrix().row(r).array() * gr + br).matrix();
  }
  const Index ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->record(
      "layernorm", std::move(out), {x, gain, bias},
      [ix, ig, ib, rstd = std::move(rstd), xhat = std::move(xhat), rows](
          BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
        if (t.requires_grad(ig)) {
          t.grad_buffer(ig).data() +=
              (g.matrix().cwiseProduct(xhat.matrix())).colwise().sum().transpose();
        }
        if (t.requires_grad(ib)) t.grad_buffer(ib).data() += g.matrix().colwise().sum().transpose();
        if (t.requires_grad(ix)) {
          const auto gr = t.value(ig).data().transpose().array();
          auto& acc = t.grad_buffer(ix);
          for (Index r = 0; r < rows; ++r) {
            const auto gh = (g.matrix().row(r).array() * gr).eval();
            const auto xh = xhat.matrix().row(r).array();
            const Scalar mg = gh.mean();
            const Scalar mgx = (gh * xh).mean();
            acc.matrix().row(r) += ((gh - mg - xh * mgx) * rstd[r]).matrix();
          }
        }
      });
}

/// Arithmetic mean along `axis`; the axis is removed from the result shape.
template <typename Scalar>
BasicVar<Scalar> mean_pool(BasicVar<Scalar> x, Index axis) {
  const auto& xv = x.value();
  const auto l = detail::axis_layout(xv.shape(), axis);
  if (l.len == 0) throw DimensionError("mean_pool over zero-length axis of " + shape_str(xv.shape()));
  Shape out_shape = xv.shape();
  out_shape.erase(out_shape.begin() + detail::normalize_axis(xv.shape(), axis));
  if (out_shape.empty()) out_shape = {1};
  auto out = BasicTensor<Scalar>::uninitialized(out_shape);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(l.len);
  for (Index a = 0; a < l.outer; ++a) {
    // Contiguous (len x inner) block; averaging its rows.
    Eigen::Map<const typename BasicTensor<Scalar>::RowMatrix> block(xv.raw() + a * l.len * l.inner,
                                                                    l.len, l.inner);
    Eigen::Map<typename BasicTensor<Scalar>::RowMatrix> dst(out.raw() + a * l.inner, 1, l.inner);
    dst = block.colwise().sum() * inv;
  }
  const Index ix = x.id;
  return x.tape->record("mean_pool", std::move(out), {x},
                        [ix, l, inv](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
                          bool fresh = false;
                          auto& acc = t.grad_slot(ix, fresh);
                          for (Index a = 0; a < l.outer; ++a) {
                            Eigen::Map<typename BasicTensor<Scalar>::RowMatrix> block(
                                acc.raw() + a * l.len * l.inner, l.len, l.inner);
                            Eigen::Map<const typename BasicTensor<Scalar>::RowMatrix> ga(
                                g.raw() + a * l.inner, 1, l.inner);
                            if (fresh) block.rowwise() = ga.row(0) * inv;
                            else block.rowwise() += ga.row(0) * inv;
                          }
                        });
}

template <typename Scalar>
BasicVar<Scalar> sum_all(BasicVar<Scalar> x) {
  BasicTensor<Scalar> out = BasicTensor<Scalar>::scalar(x.value().data().sum());
  const Index ix = x.id;
  return x.tape->record("sum_all", std::move(out), {x},
                        [ix](BasicTape<Scalar>& t, const BasicTensor<Scalar>& g) {
                          t.grad_buffer(ix).data().array() += g[0];
                        });
}

template <typename Scalar>
BasicVar<Scalar> mean_all(BasicVar<Scalar> x) {
  return scale(sum_all(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

}  // namespace cyb
