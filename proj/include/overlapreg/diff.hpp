#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape owns every node created during a forward pass. Nodes are appended in
// evaluation order, so reverse index order is a valid topological order for
// the backward sweep. Var is a cheap (tape, index) handle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace overlapreg::diff {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

inline std::string shape_str(const Matrix& m) { return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")"; }

class Tape;

class Var {
public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  bool requires_grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

private:
  Tape* tape_ = nullptr;
  std::size_t id_ = std::numeric_limits<std::size_t>::max();
};

struct Node {
  Matrix value;
  Matrix grad;
  std::vector<std::size_t> parents;
  std::function<void(Tape&, std::size_t)> backward;  ///< pushes this node's grad into its parents
  bool requires_grad = false;
};

class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix v) { return push(std::move(v), {}, nullptr, false); }
  Var variable(Matrix v) { return push(std::move(v), {}, nullptr, true); }

  /// Result node; it requires grad iff some parent does.
  Var make(Matrix v, std::vector<Var> parents, std::function<void(Tape&, std::size_t)> bwd) {
    bool req = false;
    std::vector<std::size_t> ids;
    ids.reserve(parents.size());
    for (const auto& p : parents) {
      if (p.tape() != this) throw std::invalid_argument("diff: operand belongs to a different tape");
      req = req || nodes_[p.id()].requires_grad;
      ids.push_back(p.id());
    }
    return push(std::move(v), std::move(ids), req ? std::move(bwd) : nullptr, req);
  }

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds g into the gradient of node `id` if it participates in backprop.
  void accumulate(std::size_t id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) return;
    n.grad += g;
  }
  template <typename Expr>
  void accumulate_expr(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) return;
    n.grad += g;
  }
  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad && nodes_[id].grad.size() != 0; }

  /// d(root)/d(node) for every reachable requires_grad node. Each node's
  /// backward rule runs exactly once, in reverse creation order.
  void backward(const Var& root) {
    if (root.tape() != this) throw std::invalid_argument("backward: root belongs to a different tape");
    const Node& r = nodes_[root.id()];
    if (r.value.rows() != 1 || r.value.cols() != 1)
      throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(r.value));
    std::vector<char> reach(nodes_.size(), 0);
    std::vector<std::size_t> stack{root.id()};
    reach[root.id()] = 1;
    while (!stack.empty()) {
      const std::size_t id = stack.back();
      stack.pop_back();
      for (auto p : nodes_[id].parents)
        if (!reach[p] && nodes_[p].requires_grad) reach[p] = 1, stack.push_back(p);
    }
    for (std::size_t id = 0; id <= root.id(); ++id) {
      Node& n = nodes_[id];
      if (reach[id] && n.requires_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
      else n.grad.resize(0, 0);
    }
    if (!r.requires_grad) return;
    nodes_[root.id()].grad(0, 0) = 1.0;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (reach[id] && n.requires_grad && n.backward) n.backward(*this, id);
    }
    ++backward_passes_;
  }

  std::uint64_t backward_passes() const { return backward_passes_; }

private:
  Var push(Matrix v, std::vector<std::size_t> parents, std::function<void(Tape&, std::size_t)> bwd, bool req) {
    Node n;
    n.value = std::move(v);
    n.parents = std::move(parents);
    n.backward = std::move(bwd);
    n.requires_grad = req;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::uint64_t backward_passes_ = 0;
};

inline const Matrix& Var::value() const { return tape_->node(id_).value; }
inline const Matrix& Var::grad() const { return tape_->node(id_).grad; }
inline bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

namespace detail {
inline void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}
inline Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::invalid_argument("diff: uninitialized Var");
  return *a.tape();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value();
  return t.make(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.node(self).grad;
    if (tp.wants_grad(ia)) tp.accumulate_expr(ia, g * tp.node(ib).value.transpose());
    if (tp.wants_grad(ib)) tp.accumulate_expr(ib, tp.node(ia).value.transpose() * g);
  });
}

/// a (N x C) plus a 1 x C bias broadcast over rows.
inline Var add_bias(const Var& a, const Var& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols())
    throw std::invalid_argument("add_bias: shape mismatch " + shape_str(a.value()) + " vs " + shape_str(bias.value()));
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), ib = bias.id();
  Matrix out = a.value().rowwise() + bias.value().row(0);
  return t.make(std::move(out), {a, bias}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.node(self).grad;
    tp.accumulate(ia, g);
    if (tp.wants_grad(ib)) tp.accumulate_expr(ib, g.colwise().sum());
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape("add", a.value(), b.value());
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  return t.make(a.value() + b.value(), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.node(self).grad;
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape("sub", a.value(), b.value());
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  return t.make(a.value() - b.value(), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.node(self).grad;
    tp.accumulate(ia, g);
    if (tp.wants_grad(ib)) tp.accumulate_expr(ib, -g);
  });
}

inline Var hadamard(const Var& a, const Var& b) {
  detail::require_same_shape("hadamard", a.value(), b.value());
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  return t.make(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.node(self).grad;
    if (tp.wants_grad(ia)) tp.accumulate_expr(ia, g.cwiseProduct(tp.node(ib).value));
    if (tp.wants_grad(ib)) tp.accumulate_expr(ib, g.cwiseProduct(tp.node(ia).value));
  });
}

/// s * a + c, elementwise with scalar constants.
inline Var affine(const Var& a, double s, double c = 0.0) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out = (a.value().array() * s + c).matrix();
  return t.make(std::move(out), {a}, [ia, s](Tape& tp, std::size_t self) { tp.accumulate_expr(ia, tp.node(self).grad * s); });
}

inline Var scale(const Var& a, double s) { return affine(a, s, 0.0); }

/// Scales every row i of a (N x C) by m(i), m being N x 1.
inline Var pointwise_scale(const Var& a, const Var& m) {
  if (m.cols() != 1 || m.rows() != a.rows())
    throw std::invalid_argument("pointwise_scale: shape mismatch " + shape_str(a.value()) + " vs " + shape_str(m.value()));
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), im = m.id();
  Matrix out = a.value().array().colwise() * m.value().col(0).array();
  return t.make(std::move(out), {a, m}, [ia, im](Tape& tp, std::size_t self) {
    const Matrix& g = tp.node(self).grad;
    if (tp.wants_grad(ia)) tp.accumulate_expr(ia, (g.array().colwise() * tp.node(im).value.col(0).array()).matrix());
    if (tp.wants_grad(im)) tp.accumulate_expr(im, g.cwiseProduct(tp.node(ia).value).rowwise().sum());
  });
}

/// Divides every entry of a by the scalar node s (1 x 1).
inline Var divide_by_scalar(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1)
    throw std::invalid_argument("divide_by_scalar: shape mismatch " + shape_str(a.value()) + " vs " + shape_str(s.value()));
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), is = s.id();
  const double d = s.scalar();
  return t.make(a.value() / d, {a, s}, [ia, is, d](Tape& tp, std::size_t self) {
    const Matrix& g = tp.node(self).grad;
    if (tp.wants_grad(ia)) tp.accumulate_expr(ia, g / d);
    if (tp.wants_grad(is)) {
      Matrix gs(1, 1);
      gs(0, 0) = -g.cwiseProduct(tp.node(ia).value).sum() / (d * d);
      tp.accumulate(is, gs);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

inline Var relu(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out = a.value().cwiseMax(0.0);
  return t.make(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    const Matrix& g = tp.node(self).grad;
    tp.accumulate_expr(ia, (tp.node(ia).value.array() > 0.0).select(g.array(), 0.0).matrix());
  });
}

/// Values clamped to [lo, hi]; gradient passes only strictly inside.
inline Var clamp(const Var& a, double lo, double hi) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return t.make(std::move(out), {a}, [ia, lo, hi](Tape& tp, std::size_t self) {
    const auto& v = tp.node(ia).value.array();
    tp.accumulate_expr(ia, ((v > lo) && (v < hi)).select(tp.node(self).grad.array(), 0.0).matrix());
  });
}

inline Var floor_at(const Var& a, double lo) { return clamp(a, lo, std::numeric_limits<double>::infinity()); }

inline Var log(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out = a.value().array().log().matrix();
  return t.make(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    tp.accumulate_expr(ia, (tp.node(self).grad.array() / tp.node(ia).value.array()).matrix());
  });
}

/// Subgradient 0 at the kink.
inline Var abs(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out = a.value().cwiseAbs();
  return t.make(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    const auto& v = tp.node(ia).value.array();
    tp.accumulate_expr(ia, (tp.node(self).grad.array() * ((v > 0.0).cast<double>() - (v < 0.0).cast<double>())).matrix());
  });
}

inline Var square(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out = a.value().cwiseProduct(a.value());
  return t.make(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    tp.accumulate_expr(ia, (2.0 * tp.node(self).grad.array() * tp.node(ia).value.array()).matrix());
  });
}

/// Row-wise softmax with max subtraction.
inline Var softmax_rows(const Var& a) {
  Tape& t = detail::tape_of(a);
  Matrix out = (a.value().colwise() - a.value().rowwise().maxCoeff()).array().exp().matrix();
  const Eigen::VectorXd denom = out.rowwise().sum();
  out = (out.array().colwise() / denom.array()).matrix();
  const std::size_t ia = a.id();
  return t.make(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    const Matrix& y = tp.node(self).value;
    const Matrix& g = tp.node(self).grad;
    const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    tp.accumulate_expr(ia, (y.array() * (g.array().colwise() - dot.array())).matrix());
  });
}

// ---------------------------------------------------------------------------
// Reductions and structure
// ---------------------------------------------------------------------------

inline Var sum(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return t.make(std::move(out), {a}, [ia, r, c](Tape& tp, std::size_t self) {
    tp.accumulate_expr(ia, Matrix::Constant(r, c, tp.node(self).grad(0, 0)));
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Euclidean norm of all entries as a 1 x 1 node; gradient 0 at the origin.
inline Var norm2(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  const double n = a.value().norm();
  Matrix out(1, 1);
  out(0, 0) = n;
  return t.make(std::move(out), {a}, [ia, n](Tape& tp, std::size_t self) {
    if (n > 0.0) tp.accumulate_expr(ia, tp.node(ia).value * (tp.node(self).grad(0, 0) / n));
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no operands");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw std::invalid_argument("concat_cols: shape mismatch " + shape_str(parts.front().value()) + " vs " + shape_str(p.value()));
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, std::pair<Index, Index>>> spans;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.push_back({p.id(), {off, p.cols()}});
    off += p.cols();
  }
  return detail::tape_of(parts.front()).make(std::move(out), parts, [spans](Tape& tp, std::size_t self) {
    const Matrix& g = tp.node(self).grad;
    for (const auto& [id, span] : spans)
      if (tp.wants_grad(id)) tp.accumulate_expr(id, g.middleCols(span.first, span.second));
  });
}

inline Var slice_cols(const Var& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols())
    throw std::invalid_argument("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) + ") out of range for " +
                                shape_str(a.value()));
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out = a.value().middleCols(begin, count);
  return t.make(std::move(out), {a}, [ia, begin, count](Tape& tp, std::size_t self) {
    if (tp.wants_grad(ia)) tp.node(ia).grad.middleCols(begin, count) += tp.node(self).grad;
  });
}

inline Var slice_rows(const Var& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows())
    throw std::invalid_argument("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) + ") out of range for " +
                                shape_str(a.value()));
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out = a.value().middleRows(begin, count);
  return t.make(std::move(out), {a}, [ia, begin, count](Tape& tp, std::size_t self) {
    if (tp.wants_grad(ia)) tp.node(ia).grad.middleRows(begin, count) += tp.node(self).grad;
  });
}

/// Tiles a 1 x C row n times.
inline Var repeat_rows(const Var& a, Index n) {
  if (a.rows() != 1) throw std::invalid_argument("repeat_rows: expected a single row, got " + shape_str(a.value()));
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Matrix out = a.value().replicate(n, 1);
  return t.make(std::move(out), {a}, [ia](Tape& tp, std::size_t self) { tp.accumulate_expr(ia, tp.node(self).grad.colwise().sum()); });
}

/// Column-wise max over the rows selected by `rows` (all rows when empty),
/// producing 1 x C. Gradient flows to the argmax row of each column; ties go
/// to the lowest row index.
inline Var masked_maxpool(const Var& a, const std::vector<std::uint8_t>& rows = {}) {
  if (!rows.empty() && static_cast<Index>(rows.size()) != a.rows())
    throw std::invalid_argument("masked_maxpool: row mask length " + std::to_string(rows.size()) + " vs " + shape_str(a.value()));
  const Matrix& v = a.value();
  const Index c = v.cols();
  Matrix out(1, c);
  std::vector<Index> arg(static_cast<std::size_t>(c), -1);
  for (Index j = 0; j < c; ++j) {
    double best = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < v.rows(); ++i) {
      if (!rows.empty() && !rows[static_cast<std::size_t>(i)]) continue;
      if (arg[static_cast<std::size_t>(j)] < 0 || v(i, j) > best) best = v(i, j), arg[static_cast<std::size_t>(j)] = i;
    }
    if (arg[static_cast<std::size_t>(j)] < 0) throw std::invalid_argument("masked_maxpool: no rows selected");
    out(0, j) = best;
  }
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  return t.make(std::move(out), {a}, [ia, arg = std::move(arg)](Tape& tp, std::size_t self) {
    if (!tp.wants_grad(ia)) return;
    const Matrix& g = tp.node(self).grad;
    Matrix& ga = tp.node(ia).grad;
    for (std::size_t j = 0; j < arg.size(); ++j) ga(arg[j], static_cast<Index>(j)) += g(0, static_cast<Index>(j));
  });
}

/// Same value, no gradient path.
inline Var detach(const Var& a) { return detail::tape_of(a).constant(a.value()); }

}  // namespace overlapreg::diff
