#pragma once

// Define-by-run reverse-mode differentiation over dense tensors. A Tape owns
// every value produced during one forward pass; backward() walks it once in
// reverse recording order.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgrpo/tensor.hpp"

namespace dualgrpo {

enum class Op {
  Leaf,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  Tanh,
  Relu,
  Exp,
  Square,
  LogSoftmax,
  GatherRows,
  Sum,
  Mean,
  PpoSurrogate,
  CategoricalKl,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Square: return "square";
    case Op::LogSoftmax: return "log_softmax";
    case Op::GatherRows: return "gather_rows";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::PpoSurrogate: return "ppo_surrogate";
    case Op::CategoricalKl: return "categorical_kl";
  }
  return "?";
}

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Per-node gradients produced by Tape::backward.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::optional<Tensor>> g) : grads_(std::move(g)) {}

  /// Gradient for `v`; zeros of the right shape when the output does not
  /// depend on it.
  Tensor operator[](Var v) const;

 private:
  friend class Tape;
  std::vector<std::optional<Tensor>> grads_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) { return push(Op::Leaf, std::move(value), {}, true); }
  Var constant(Tensor value) { return push(Op::Leaf, std::move(value), {}, false); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_.at(v.id).op; }
  std::span<const std::size_t> inputs(Var v) const { return nodes_.at(v.id).inputs; }

  /// Vector-Jacobian products for every node, seeded with d(out)/d(out) = 1.
  Gradients backward(Var out) const;

 private:
  struct Node {
    Op op;
    Tensor value;
    std::vector<std::size_t> inputs;
    bool requires_grad;
    std::vector<std::size_t> index;  // GatherRows
    double scalar = 0.0;             // Scale factor / clip width
    Tensor aux;                      // constant side input of fused ops
  };

  Var push(Op op, Tensor value, std::vector<std::size_t> inputs, bool requires_grad) {
    nodes_.push_back(Node{op, std::move(value), std::move(inputs), requires_grad, {}, 0.0, {}});
    return Var{this, nodes_.size() - 1};
  }
  Node& node(Var v) { return nodes_.at(v.id); }
  bool needs(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (nodes_.at(v.id).requires_grad) return true;
    return false;
  }

  std::vector<Node> nodes_;

  friend Var matmul(Var, Var);
  friend Var add(Var, Var);
  friend Var sub(Var, Var);
  friend Var mul(Var, Var);
  friend Var scale(Var, double);
  friend Var tanh(Var);
  friend Var relu(Var);
  friend Var exp(Var);
  friend Var square(Var);
  friend Var log_softmax(Var);
  friend Var gather_rows(Var, std::vector<std::size_t>);
  friend Var sum(Var);
  friend Var mean(Var);
  friend Var ppo_surrogate(Var, const Tensor&, double);
  friend Var categorical_kl(Var, const Tensor&);
};

namespace detail {

inline Tape& same_tape(const char* op, Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape;
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_mismatch(op, a.shape(), b.shape());
}

inline void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape("matmul", a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  detail::require_matrix("matmul", av);
  detail::require_matrix("matmul", bv);
  if (av.cols() != bv.rows()) detail::shape_mismatch("matmul", av.shape(), bv.shape());
  return t.push(Op::MatMul, kernels::matmul(av, bv), {a.id, b.id}, t.needs({a, b}));
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape("add", a, b);
  detail::require_same("add", t.value(a), t.value(b));
  return t.push(Op::Add, kernels::zip(t.value(a), t.value(b), std::plus<>{}), {a.id, b.id},
                t.needs({a, b}));
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape("sub", a, b);
  detail::require_same("sub", t.value(a), t.value(b));
  return t.push(Op::Sub, kernels::zip(t.value(a), t.value(b), std::minus<>{}), {a.id, b.id},
                t.needs({a, b}));
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape("mul", a, b);
  detail::require_same("mul", t.value(a), t.value(b));
  return t.push(Op::Mul, kernels::zip(t.value(a), t.value(b), std::multiplies<>{}), {a.id, b.id},
                t.needs({a, b}));
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Var out = t.push(Op::Scale, kernels::map(t.value(a), [s](double x) { return s * x; }), {a.id},
                   t.needs({a}));
  t.node(out).scalar = s;
  return out;
}

inline Var tanh(Var a) {
  Tape& t = *a.tape;
  return t.push(Op::Tanh, kernels::map(t.value(a), [](double x) { return kernels::tanh(x); }), {a.id},
                t.needs({a}));
}

inline Var relu(Var a) {
  Tape& t = *a.tape;
  return t.push(Op::Relu, kernels::map(t.value(a), [](double x) { return x > 0.0 ? x : 0.0; }),
                {a.id}, t.needs({a}));
}

inline Var exp(Var a) {
  Tape& t = *a.tape;
  return t.push(Op::Exp, kernels::map(t.value(a), [](double x) { return std::exp(x); }), {a.id},
                t.needs({a}));
}

inline Var square(Var a) {
  Tape& t = *a.tape;
  return t.push(Op::Square, kernels::map(t.value(a), [](double x) { return x * x; }), {a.id},
                t.needs({a}));
}

/// Log-softmax over the last axis (each row of a matrix).
inline Var log_softmax(Var a) {
  Tape& t = *a.tape;
  detail::require_matrix("log_softmax", t.value(a));
  return t.push(Op::LogSoftmax, kernels::log_softmax_rows(t.value(a)), {a.id}, t.needs({a}));
}

/// Rows `index[i]` of a matrix, stacked in order.
inline Var gather_rows(Var table, std::vector<std::size_t> index) {
  Tape& t = *table.tape;
  const Tensor& tv = t.value(table);
  detail::require_matrix("gather_rows", tv);
  const std::size_t c = tv.cols();
  Tensor out({index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= tv.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of range for " +
                       shape_str(tv.shape()));
    }
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(index[i] * c), c,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  Var v = t.push(Op::GatherRows, std::move(out), {table.id}, t.needs({table}));
  t.node(v).index = std::move(index);
  return v;
}

inline Var sum(Var a) {
  Tape& t = *a.tape;
  const auto& d = t.value(a).data();
  double s = 0.0;
  for (double x : d) s += x;
  return t.push(Op::Sum, Tensor::scalar(s), {a.id}, t.needs({a}));
}

inline Var mean(Var a) {
  Tape& t = *a.tape;
  const auto& d = t.value(a).data();
  if (d.empty()) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double x : d) s += x;
  return t.push(Op::Mean, Tensor::scalar(s / static_cast<double>(d.size())), {a.id}, t.needs({a}));
}

/// Clipped policy-gradient term, elementwise over log-ratios:
///   -min(r*A, clip(r, 1-eps, 1+eps)*A),  r = exp(log_ratio).
/// `advantage` is a constant of the same shape.
inline Var ppo_surrogate(Var log_ratio, const Tensor& advantage, double eps) {
  Tape& t = *log_ratio.tape;
  const Tensor& lr = t.value(log_ratio);
  detail::require_same("ppo_surrogate", lr, advantage);
  Tensor out(lr.shape());
  for (std::size_t i = 0; i < lr.size(); ++i) {
    const double r = std::exp(lr[i]);
    const double a = advantage[i];
    const double clipped = std::clamp(r, 1.0 - eps, 1.0 + eps);
    out[i] = -std::min(r * a, clipped * a);
  }
  Var v = t.push(Op::PpoSurrogate, std::move(out), {log_ratio.id}, t.needs({log_ratio}));
  t.node(v).scalar = eps;
  t.node(v).aux = advantage;
  return v;
}

/// Row-wise KL(softmax(logits) || exp(ref_log_probs)); output is (rows x 1).
/// `ref_log_probs` is a constant of the same shape as `logits`.
inline Var categorical_kl(Var logits, const Tensor& ref_log_probs) {
  Tape& t = *logits.tape;
  const Tensor& z = t.value(logits);
  detail::require_matrix("categorical_kl", z);
  detail::require_same("categorical_kl", z, ref_log_probs);
  const Tensor lp = kernels::log_softmax_rows(z);
  const std::size_t r = z.rows(), c = z.cols();
  Tensor out({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    double kl = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double l = lp[i * c + j];
      kl += std::exp(l) * (l - ref_log_probs[i * c + j]);
    }
    out[i] = kl;
  }
  Var v = t.push(Op::CategoricalKl, std::move(out), {logits.id}, t.needs({logits}));
  t.node(v).aux = ref_log_probs;
  return v;
}

// ---------------------------------------------------------------------------
// Backward

inline Tensor Gradients::operator[](Var v) const {
  if (v.id < grads_.size() && grads_[v.id]) return *grads_[v.id];
  return Tensor(shapes_.at(v.id));
}

inline Gradients Tape::backward(Var out) const {
  const Tensor& ov = nodes_.at(out.id).value;
  if (ov.size() != 1) {
    throw ShapeError("backward: output must be scalar, got " + shape_str(ov.shape()));
  }
  std::vector<std::optional<Tensor>> g(nodes_.size());
  g[out.id] = Tensor(ov.shape(), 1.0);

  auto accumulate = [&](std::size_t id, const Tensor& delta) {
    if (!nodes_[id].requires_grad) return;
    if (!g[id]) {
      g[id] = delta;
    } else {
      auto& acc = g[id]->data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += delta[i];
    }
  };

  for (std::size_t id = out.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!g[id] || n.op == Op::Leaf || !n.requires_grad) continue;
    const Tensor& gy = *g[id];
    const auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::MatMul:
        if (nodes_[n.inputs[0]].requires_grad) accumulate(n.inputs[0], kernels::matmul_nt(gy, in(1)));
        if (nodes_[n.inputs[1]].requires_grad) accumulate(n.inputs[1], kernels::matmul_tn(in(0), gy));
        break;
      case Op::Add:
        accumulate(n.inputs[0], gy);
        accumulate(n.inputs[1], gy);
        break;
      case Op::Sub:
        accumulate(n.inputs[0], gy);
        accumulate(n.inputs[1], kernels::map(gy, [](double x) { return -x; }));
        break;
      case Op::Mul:
        accumulate(n.inputs[0], kernels::zip(gy, in(1), std::multiplies<>{}));
        accumulate(n.inputs[1], kernels::zip(gy, in(0), std::multiplies<>{}));
        break;
      case Op::Scale: {
        const double s = n.scalar;
        accumulate(n.inputs[0], kernels::map(gy, [s](double x) { return s * x; }));
        break;
      }
      case Op::Tanh:
        accumulate(n.inputs[0], kernels::zip(gy, n.value, [](double d, double y) { return d * (1.0 - y * y); }));
        break;
      case Op::Relu:
        accumulate(n.inputs[0], kernels::zip(gy, in(0), [](double d, double x) { return x > 0.0 ? d : 0.0; }));
        break;
      case Op::Exp:
        accumulate(n.inputs[0], kernels::zip(gy, n.value, std::multiplies<>{}));
        break;
      case Op::Square:
        accumulate(n.inputs[0], kernels::zip(gy, in(0), [](double d, double x) { return 2.0 * x * d; }));
        break;
      case Op::LogSoftmax: {
        const std::size_t r = gy.rows(), c = gy.cols();
        Tensor gx(gy.shape());
        for (std::size_t i = 0; i < r; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j) s += gy[i * c + j];
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] = gy[i * c + j] - std::exp(n.value[i * c + j]) * s;
        }
        accumulate(n.inputs[0], gx);
        break;
      }
      case Op::GatherRows: {
        Tensor gt(in(0).shape());
        const std::size_t c = gt.cols();
        for (std::size_t i = 0; i < n.index.size(); ++i)
          for (std::size_t j = 0; j < c; ++j) gt[n.index[i] * c + j] += gy[i * c + j];
        accumulate(n.inputs[0], gt);
        break;
      }
      case Op::Sum:
        accumulate(n.inputs[0], Tensor(in(0).shape(), gy[0]));
        break;
      case Op::Mean:
        accumulate(n.inputs[0], Tensor(in(0).shape(), gy[0] / static_cast<double>(in(0).size())));
        break;
      case Op::PpoSurrogate: {
        const Tensor& lr = in(0);
        Tensor gx(lr.shape());
        for (std::size_t i = 0; i < lr.size(); ++i) {
          const double r = std::exp(lr[i]);
          const double a = n.aux[i];
          const double clipped = std::clamp(r, 1.0 - n.scalar, 1.0 + n.scalar);
          // Only the unclipped branch carries gradient.
          gx[i] = (r * a <= clipped * a) ? -a * r * gy[i] : 0.0;
        }
        accumulate(n.inputs[0], gx);
        break;
      }
      case Op::CategoricalKl: {
        const Tensor lp = kernels::log_softmax_rows(in(0));
        const std::size_t r = lp.rows(), c = lp.cols();
        Tensor gx(lp.shape());
        for (std::size_t i = 0; i < r; ++i) {
          const double kl = n.value[i];
          for (std::size_t j = 0; j < c; ++j) {
            const double l = lp[i * c + j];
            gx[i * c + j] = gy[i] * std::exp(l) * ((l - n.aux[i * c + j]) - kl);
          }
        }
        accumulate(n.inputs[0], gx);
        break;
      }
    }
  }

  Gradients result(std::move(g));
  result.shapes_.reserve(nodes_.size());
  for (const auto& n : nodes_) result.shapes_.push_back(n.value.shape());
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference checking

class GradCheckError : public std::runtime_error {
 public:
  GradCheckError(const std::string& what, std::size_t coordinate)
      : std::runtime_error(what), coordinate_(coordinate) {}
  std::size_t coordinate() const { return coordinate_; }

 private:
  std::size_t coordinate_;
};

/// Builds a scalar on `tape` from leaves holding `inputs`.
using MultiScalarFn = std::function<Var(Tape&, std::span<const Var>)>;
using ScalarFn = std::function<Var(Tape&, Var)>;

/// Max over all coordinates of |analytic - central difference| / max(1, |analytic|).
/// `stride` > 1 checks every stride-th coordinate of each input.
inline double grad_check(const MultiScalarFn& f, const std::vector<Tensor>& points, double h,
                         std::size_t stride = 1) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : points) leaves.push_back(tape.leaf(p));
    Var out = f(tape, leaves);
    if (!std::isfinite(tape.value(out).item())) throw GradCheckError("grad_check: non-finite output at point", 0);
    Gradients g = tape.backward(out);
    for (Var v : leaves) analytic.push_back(g[v]);
  }
  auto eval = [&](const std::vector<Tensor>& at) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : at) leaves.push_back(tape.leaf(p));
    return tape.value(f(tape, leaves)).item();
  };

  double worst = 0.0;
  std::vector<Tensor> probe = points;
  std::size_t flat = 0;
  for (std::size_t which = 0; which < points.size(); ++which) {
    for (std::size_t i = 0; i < points[which].size(); ++i, ++flat) {
      if (stride > 1 && i % stride != 0) continue;
      const double orig = points[which][i];
      probe[which][i] = orig + h;
      const double up = eval(probe);
      probe[which][i] = orig - h;
      const double down = eval(probe);
      probe[which][i] = orig;
      const double a = analytic[which][i];
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(a)) {
        throw GradCheckError("grad_check: non-finite value at coordinate " + std::to_string(flat), flat);
      }
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

inline double grad_check(const ScalarFn& f, const Tensor& point, double h) {
  return grad_check([&](Tape& t, std::span<const Var> v) { return f(t, v[0]); },
                    std::vector<Tensor>{point}, h);
}

}  // namespace dualgrpo
