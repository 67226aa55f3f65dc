#pragma once

// Dense rank-2 values plus a per-step reverse-mode tape.
//
// Every op checks its output for NaN/Inf. Inputs that do not need a gradient
// (constants, or values derived only from constants) record no backward
// closure, so an inference pass costs only the forward arithmetic.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gbnet/errors.hpp"

namespace gbnet {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

inline std::string shape_str(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

inline void require_finite(const Matrix& m, std::string_view op) {
  if (!m.allFinite()) {
    throw NumericError("non-finite value produced by " + std::string(op));
  }
}

class Tape;

// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  // (tape, d loss / d output, output value)
  using Backward = std::function<void(Tape&, const Matrix&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) {
    require_finite(value, "constant");
    return push(std::move(value), false, {}, nullptr);
  }

  // Tracked leaf. backward() adds d(loss)/d(value) into *grad_slot, which
  // must already have the value's shape. A null slot makes a constant.
  Var watch(const Matrix& value, Matrix* grad_slot) {
    require_finite(value, "parameter");
    if (grad_slot == nullptr) return push(value, false, {}, nullptr);
    if (grad_slot->rows() != value.rows() || grad_slot->cols() != value.cols()) {
      throw ShapeError("gradient slot " + shape_str(*grad_slot) + " does not match value " +
                       shape_str(value));
    }
    return push(value, true, {}, grad_slot);
  }

  // Records an op result. The closure is kept only if some input needs a gradient.
  template <typename Inputs>
  Var record(Matrix value, const Inputs& inputs, Backward back, std::string_view op) {
    require_finite(value, op);
    bool needs = false;
    for (const Var& in : inputs) needs = needs || needs_grad(in);
    return push(std::move(value), needs, needs ? std::move(back) : Backward{}, nullptr);
  }

  Var record(Matrix value, std::initializer_list<Var> inputs, Backward back, std::string_view op) {
    return record<std::initializer_list<Var>>(std::move(value), inputs, std::move(back), op);
  }

  const Matrix& value(Var v) const { return nodes_.at(v.id_).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id_).needs_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  // Adds g into the gradient of v. Called from backward closures.
  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[v.id_];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Replays the tape in reverse from a 1x1 loss, then clears it.
  void backward(Var loss) {
    if (nodes_.empty() || loss.tape_ != this || loss.id_ >= nodes_.size()) {
      throw StateError("backprop without an active tape holding the loss");
    }
    Node& root = nodes_[loss.id_];
    if (root.value.rows() != 1 || root.value.cols() != 1) {
      throw ShapeError("backprop needs a scalar loss, got " + shape_str(root.value));
    }
    if (root.needs_grad) {
      root.grad = Matrix::Ones(1, 1);
      for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.needs_grad || n.grad.size() == 0) continue;
        if (n.sink != nullptr) *n.sink += n.grad;
        if (n.back) n.back(*this, n.grad, n.value);
      }
    }
    clear();
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward back;
    Matrix* sink = nullptr;
    bool needs_grad = false;
  };

  Var push(Matrix value, bool needs, Backward back, Matrix* sink) {
    nodes_.push_back(Node{std::move(value), Matrix{}, std::move(back), sink, needs});
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const {
  if (tape_ == nullptr) throw StateError("use of an unbound tape variable");
  return tape_->value(*this);
}

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.valid()) throw StateError("use of an unbound tape variable");
  return *a.tape();
}

inline void same_shape(Var a, Var b, std::string_view op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": operand shapes " + shape_str(a.value()) + " and " +
                     shape_str(b.value()) + " differ");
  }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dims of " + shape_str(a.value()) + " and " + shape_str(b.value()) +
                     " do not match");
  }
  return detail::tape_of(a).record(
      a.value() * b.value(), {a, b},
      [a, b](Tape& tp, const Matrix& g, const Matrix&) {
        if (tp.needs_grad(a)) tp.accumulate(a, g * b.value().transpose());
        if (tp.needs_grad(b)) tp.accumulate(b, a.value().transpose() * g);
      },
      "matmul");
}

// a * b^T. Weights are stored (out x in) and node states are rows.
inline Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(a.value()) + " and " + shape_str(b.value()) +
                     "^T do not match");
  }
  return detail::tape_of(a).record(
      a.value() * b.value().transpose(), {a, b},
      [a, b](Tape& tp, const Matrix& g, const Matrix&) {
        if (tp.needs_grad(a)) tp.accumulate(a, g * b.value());
        if (tp.needs_grad(b)) tp.accumulate(b, g.transpose() * a.value());
      },
      "matmul_nt");
}

// a^T * b
inline Var matmul_tn(Var a, Var b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + shape_str(a.value()) + "^T and " + shape_str(b.value()) +
                     " do not match");
  }
  return detail::tape_of(a).record(
      a.value().transpose() * b.value(), {a, b},
      [a, b](Tape& tp, const Matrix& g, const Matrix&) {
        if (tp.needs_grad(a)) tp.accumulate(a, b.value() * g.transpose());
        if (tp.needs_grad(b)) tp.accumulate(b, a.value() * g);
      },
      "matmul_tn");
}

inline Var matvec(Var w, Var x) {
  if (x.cols() != 1) throw ShapeError("matvec: x must be a column vector, got " + shape_str(x.value()));
  return matmul(w, x);
}

inline Var transpose(Var a) {
  return detail::tape_of(a).record(
      a.value().transpose(), {a},
      [a](Tape& tp, const Matrix& g, const Matrix&) { tp.accumulate(a, g.transpose()); }, "transpose");
}

inline Var add(Var a, Var b) {
  detail::same_shape(a, b, "add");
  return detail::tape_of(a).record(
      a.value() + b.value(), {a, b},
      [a, b](Tape& tp, const Matrix& g, const Matrix&) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
      },
      "add");
}

// Adds a 1 x k row to every row of a.
inline Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: bias " + shape_str(row.value()) + " vs " + shape_str(a.value()));
  }
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return detail::tape_of(a).record(
      std::move(out), {a, row},
      [a, row](Tape& tp, const Matrix& g, const Matrix&) {
        tp.accumulate(a, g);
        if (tp.needs_grad(row)) tp.accumulate(row, g.colwise().sum());
      },
      "add_row");
}

inline Var mul(Var a, Var b) {
  detail::same_shape(a, b, "mul");
  return detail::tape_of(a).record(
      a.value().cwiseProduct(b.value()), {a, b},
      [a, b](Tape& tp, const Matrix& g, const Matrix&) {
        if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(b.value()));
        if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(a.value()));
      },
      "mul");
}

// scale * a + shift, elementwise.
inline Var affine(Var a, double scale, double shift) {
  Matrix out = (a.value().array() * scale + shift).matrix();
  return detail::tape_of(a).record(
      std::move(out), {a},
      [a, scale](Tape& tp, const Matrix& g, const Matrix&) { tp.accumulate(a, g * scale); }, "affine");
}

inline Var scale(Var a, double s) { return affine(a, s, 0.0); }

inline Var relu(Var a) {
  return detail::tape_of(a).record(
      a.value().cwiseMax(0.0), {a},
      [a](Tape& tp, const Matrix& g, const Matrix&) {
        tp.accumulate(a, (a.value().array() > 0.0).select(g, 0.0).matrix());
      },
      "relu");
}

inline Var sigmoid(Var a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return detail::tape_of(a).record(
      std::move(out), {a},
      [a](Tape& tp, const Matrix& g, const Matrix& y) {
        tp.accumulate(a, (g.array() * y.array() * (1.0 - y.array())).matrix());
      },
      "sigmoid");
}

inline Var tanh(Var a) {
  Matrix out = a.value().array().tanh().matrix();
  return detail::tape_of(a).record(
      std::move(out), {a},
      [a](Tape& tp, const Matrix& g, const Matrix& y) {
        tp.accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
      },
      "tanh");
}

inline Var log(Var a) {
  Matrix out = a.value().array().log().matrix();
  return detail::tape_of(a).record(
      std::move(out), {a},
      [a](Tape& tp, const Matrix& g, const Matrix&) {
        tp.accumulate(a, (g.array() / a.value().array()).matrix());
      },
      "log");
}

// Sum of all entries, as a 1x1.
inline Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return detail::tape_of(a).record(
      std::move(out), {a},
      [a](Tape& tp, const Matrix& g, const Matrix&) {
        tp.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
      },
      "sum");
}

// Softmax of every row, computed after subtracting the row max.
inline Matrix row_softmax_values(const Matrix& logits) {
  if (logits.cols() == 0) throw ShapeError("row_softmax: empty rows");
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double hi = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - hi).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

inline Var row_softmax(Var a) {
  return detail::tape_of(a).record(
      row_softmax_values(a.value()), {a},
      [a](Tape& tp, const Matrix& g, const Matrix& y) {
        Matrix gy = g.cwiseProduct(y);
        Eigen::VectorXd dots = gy.rowwise().sum();
        Matrix dx = gy;
        dx -= (y.array().colwise() * dots.array()).matrix();
        tp.accumulate(a, dx);
      },
      "row_softmax");
}

// Column-wise concatenation of blocks with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::tape_of(parts.front()).record(
      std::move(out), parts,
      [parts](Tape& tp, const Matrix& g, const Matrix&) {
        Index off = 0;
        for (const Var& p : parts) {
          if (tp.needs_grad(p)) tp.accumulate(p, g.middleCols(off, p.cols()));
          off += p.cols();
        }
      },
      "concat_cols");
}

// Entries a(r, c) for each requested (r, c), as a column.
inline Var pick(Var a, std::vector<std::pair<Index, Index>> at) {
  Matrix out(static_cast<Index>(at.size()), 1);
  for (std::size_t k = 0; k < at.size(); ++k) {
    const auto [r, c] = at[k];
    if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) throw ShapeError("pick: index out of range");
    out(static_cast<Index>(k), 0) = a.value()(r, c);
  }
  return detail::tape_of(a).record(
      std::move(out), {a},
      [a, at = std::move(at)](Tape& tp, const Matrix& g, const Matrix&) {
        Matrix dx = Matrix::Zero(a.rows(), a.cols());
        for (std::size_t k = 0; k < at.size(); ++k) dx(at[k].first, at[k].second) += g(static_cast<Index>(k), 0);
        tp.accumulate(a, dx);
      },
      "pick");
}

// Weighted link used by edge aggregation: out[dst] += weight * in[src].
struct Link {
  Index src;
  Index dst;
  double weight;
};

using LinkList = std::shared_ptr<const std::vector<Link>>;

// Sums weighted source rows into destination rows along fixed links.
inline Var aggregate_links(Var src, const LinkList& links, Index n_dst) {
  Matrix out = Matrix::Zero(n_dst, src.cols());
  const Matrix& in = src.value();
  for (const Link& l : *links) out.row(l.dst) += l.weight * in.row(l.src);
  return detail::tape_of(src).record(
      std::move(out), {src},
      [src, links](Tape& tp, const Matrix& g, const Matrix&) {
        Matrix dx = Matrix::Zero(src.rows(), src.cols());
        for (const Link& l : *links) dx.row(l.src) += l.weight * g.row(l.dst);
        tp.accumulate(src, dx);
      },
      "aggregate_links");
}

// A named trainable tensor with its gradient slot.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
};

class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix value) {
    for (const Parameter& p : items_) {
      if (p.name == name) throw UniquenessError("duplicate parameter name " + name);
    }
    Matrix grad = Matrix::Zero(value.rows(), value.cols());
    items_.push_back(Parameter{std::move(name), std::move(value), std::move(grad)});
    return items_.size() - 1;
  }

  std::size_t size() const { return items_.size(); }
  Parameter& operator[](std::size_t i) { return items_[i]; }
  const Parameter& operator[](std::size_t i) const { return items_[i]; }
  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }

  const Parameter* find(std::string_view name) const {
    for (const Parameter& p : items_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  void zero_grad() {
    for (Parameter& p : items_) p.grad.setZero();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const Parameter& p : items_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  // Zeroed buffers shaped like the parameters, for per-worker gradients.
  std::vector<Matrix> zero_like() const {
    std::vector<Matrix> out;
    out.reserve(items_.size());
    for (const Parameter& p : items_) out.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    return out;
  }

  // Binds every parameter onto the tape, tracked into the parameters' own slots.
  std::vector<Var> bind(Tape& tape) {
    std::vector<Var> vars;
    vars.reserve(items_.size());
    for (Parameter& p : items_) vars.push_back(tape.watch(p.value, &p.grad));
    return vars;
  }

  // Binds into external slots (nullptr: untracked constants).
  std::vector<Var> bind(Tape& tape, std::vector<Matrix>* grads) const {
    if (grads != nullptr && grads->size() != items_.size()) {
      throw ShapeError("gradient buffer count does not match parameter count");
    }
    std::vector<Var> vars;
    vars.reserve(items_.size());
    for (std::size_t i = 0; i < items_.size(); ++i) {
      vars.push_back(tape.watch(items_[i].value, grads ? &(*grads)[i] : nullptr));
    }
    return vars;
  }

 private:
  std::vector<Parameter> items_;
};

// Weights of a one-hidden-layer ReLU head: W2 relu(W1 x + b1) + b2.
struct MlpHead {
  Var w1, b1, w2, b2;
};

// Applies the head to each row of x.
inline Var apply_mlp(const MlpHead& h, Var x) {
  Var hidden = relu(add_row(matmul_nt(x, h.w1), h.b1));
  return add_row(matmul_nt(hidden, h.w2), h.b2);
}

struct MlpWeights {
  Matrix w1, b1, w2, b2;
};

// Column-vector form: returns W2 relu(W1 x + b1) + b2.
inline Matrix evaluate_mlp_head(const MlpWeights& head, const Matrix& x) {
  if (x.cols() != 1) throw ShapeError("evaluate_mlp_head: x must be a column vector");
  if (head.w1.cols() != x.rows() || head.b1.size() != head.w1.rows() || head.w2.cols() != head.w1.rows() ||
      head.b2.size() != head.w2.rows()) {
    throw ShapeError("evaluate_mlp_head: head shapes do not chain with input " + shape_str(x));
  }
  Tape tape;
  auto row = [](const Matrix& m) -> Matrix { return m.reshaped<Eigen::RowMajor>(1, m.size()); };
  MlpHead h{tape.constant(head.w1), tape.constant(row(head.b1)), tape.constant(head.w2), tape.constant(row(head.b2))};
  Matrix xt = x.transpose();
  Var out = apply_mlp(h, tape.constant(std::move(xt)));
  return out.value().transpose();
}

}  // namespace gbnet
