#pragma once
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cromac/tensor.hpp"

namespace cromac {

class Tape;

// Handle into a tape slot. Cheap to copy; valid while its tape lives.
struct Var {
  int id = -1;
  Tape* tape = nullptr;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode record. One tape per update: build the graph forward, call
// backward(loss) once, read gradients, drop the tape. Parameters bound via
// param() get their contribution accumulated into Tensor::grad; other leaves
// created with input() keep their gradient readable through grad_of().
//
// A tape constructed with grad_enabled=false evaluates the same graph eagerly
// without recording backward closures (used for rollouts and target networks).
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor v) { return push(std::move(v), /*needs_grad=*/false); }

  Var input(Tensor v) { return push(std::move(v), /*needs_grad=*/grad_enabled_); }

  // Leaf bound to an external parameter; memoized so repeated use of the same
  // tensor (weight sharing, recurrent unrolls) maps to one slot. Inside a
  // FreezeGuard scope the binding degrades to a constant (target networks,
  // gated-off loss terms).
  Var param(Tensor& p) {
    if (freeze_params_) {
      auto fit = frozen_cache_.find(&p);
      if (fit != frozen_cache_.end()) return Var{fit->second, this};
      Var v = push(p, /*needs_grad=*/false);
      frozen_cache_.emplace(&p, v.id);
      return v;
    }
    auto it = param_cache_.find(&p);
    if (it != param_cache_.end()) return Var{it->second, this};
    Var v = push(p, /*needs_grad=*/grad_enabled_);
    param_cache_.emplace(&p, v.id);
    if (grad_enabled_) param_bindings_.emplace_back(&p, v.id);
    return v;
  }

  bool params_frozen() const { return freeze_params_; }

  const Tensor& value(Var v) const { return slots_[check(v)].val; }

  // Gradient of the last backward() with respect to a leaf/node.
  const Tensor& grad_of(Var v) const {
    const Slot& s = slots_[check(v)];
    if (s.grad.size() != s.val.size()) throw ContractError("grad_of: no gradient recorded");
    return s.grad;
  }

  // Seeds d(loss)=1 and sweeps the record in reverse. Parameter tensors get
  // their grad buffers accumulated (callers zero them beforehand). Gradient
  // buffers are preallocated at node creation, so a tape supports one
  // backward sweep; later sweeps rezero first.
  void backward(Var loss) {
    if (!grad_enabled_) throw ContractError("backward on a no-grad tape");
    const int lid = check(loss);
    if (slots_[lid].val.size() != 1) throw ContractError("backward: loss must be scalar");
    if (swept_) {
      for (Slot& s : slots_)
        if (s.needs_grad) std::fill(s.grad.data.begin(), s.grad.data.end(), 0.0);
    }
    swept_ = true;
    if (!slots_[lid].needs_grad) slots_[lid].grad = Tensor(slots_[lid].val.shape);
    slots_[lid].grad.data[0] = 1.0;
    for (int i = static_cast<int>(slots_.size()) - 1; i >= 0; --i)
      if (slots_[i].needs_grad && slots_[i].back) slots_[i].back(*this);
    for (auto& [p, id] : param_bindings_) {
      p->ensure_grad();
      const Tensor& g = slots_[id].grad;
      for (std::size_t k = 0; k < g.size(); ++k) p->grad[k] += g.data[k];
    }
  }

  std::size_t node_count() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor val;
    Tensor grad;
    bool needs_grad = false;
    std::function<void(Tape&)> back;
  };

  int check(Var v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(slots_.size()))
      throw ContractError("Var does not belong to this tape");
    return v.id;
  }

  Var push(Tensor v, bool needs_grad) {
    Tensor g;
    if (needs_grad) g = Tensor(v.shape);  // allocate the grad next to the value
    slots_.push_back(Slot{std::move(v), std::move(g), needs_grad, nullptr});
    return Var{static_cast<int>(slots_.size()) - 1, this};
  }

  bool grad_enabled_;
  bool swept_ = false;
  bool freeze_params_ = false;
  // deque: references returned by value()/grad_of() stay valid while nodes
  // keep being appended
  std::deque<Slot> slots_;
  std::unordered_map<const Tensor*, int> param_cache_;
  std::unordered_map<const Tensor*, int> frozen_cache_;
  std::vector<std::pair<Tensor*, int>> param_bindings_;

  friend struct OpAccess;
  friend class FreezeGuard;
};

// RAII scope in which Tape::param binds tensors as constants.
class FreezeGuard {
 public:
  explicit FreezeGuard(Tape& t) : tape_(t), prev_(t.freeze_params_) { t.freeze_params_ = true; }
  ~FreezeGuard() { tape_.freeze_params_ = prev_; }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

// Internal plumbing for the free-function ops below. Ops create the output
// node first, then attach a closure that knows the node's own id.
struct OpAccess {
  static Tensor& val(Tape& t, int id) { return t.slots_[id].val; }
  static Tensor& grad(Tape& t, int id) { return t.slots_[id].grad; }
  static bool needs(const Tape& t, int id) { return t.slots_[id].needs_grad; }

  template <typename AttachFn>
  static Var node(Tape& t, Tensor out, bool any_parent_needs, AttachFn&& attach) {
    const bool ng = t.grad_enabled() && any_parent_needs;
    Var v = t.push(std::move(out), ng);
    if (ng) t.slots_[v.id].back = attach(v.id);
    return v;
  }
};

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("op on invalid Var");
  return *a.tape;
}
inline Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape != &t) throw ContractError("ops across different tapes");
  return t;
}
inline const Tensor& val(Var v) { return v.tape->value(v); }
inline bool needs(Var v) { return OpAccess::needs(*v.tape, v.id); }

inline void axpy(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace detail

// ---- elementwise binary ----

inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Tensor &x = detail::val(a), &y = detail::val(b);
  check_same_shape(x, y, "add");
  Tensor out = x;
  detail::axpy(out, y);
  const int ia = a.id, ib = b.id;
  const bool na = detail::needs(a), nb = detail::needs(b);
  return OpAccess::node(t, std::move(out), na || nb, [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      if (na) detail::axpy(OpAccess::grad(tp, ia), g);
      if (nb) detail::axpy(OpAccess::grad(tp, ib), g);
    };
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Tensor &x = detail::val(a), &y = detail::val(b);
  check_same_shape(x, y, "sub");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= y.data[i];
  const int ia = a.id, ib = b.id;
  const bool na = detail::needs(a), nb = detail::needs(b);
  return OpAccess::node(t, std::move(out), na || nb, [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      if (na) detail::axpy(OpAccess::grad(tp, ia), g);
      if (nb) {
        Tensor& gb = OpAccess::grad(tp, ib);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
      }
    };
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Tensor &x = detail::val(a), &y = detail::val(b);
  check_same_shape(x, y, "mul");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= y.data[i];
  const int ia = a.id, ib = b.id;
  const bool na = detail::needs(a), nb = detail::needs(b);
  return OpAccess::node(t, std::move(out), na || nb, [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      const Tensor& xv = OpAccess::val(tp, ia);
      const Tensor& yv = OpAccess::val(tp, ib);
      if (na) {
        Tensor& ga = OpAccess::grad(tp, ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * yv.data[i];
      }
      if (nb) {
        Tensor& gb = OpAccess::grad(tp, ib);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * xv.data[i];
      }
    };
  });
}

// ---- elementwise unary ----

namespace detail {

// generic unary: fwd(x) and dfd(x, y) giving dy/dx from input and output
template <typename Fwd, typename Dfd>
Var unary(Var a, Fwd fwd, Dfd dfd) {
  Tape& t = tape_of(a);
  const Tensor& x = val(a);
  Tensor out = x;
  for (double& v : out.data) v = fwd(v);
  const int ia = a.id;
  return OpAccess::node(t, std::move(out), needs(a), [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      const Tensor& xv = OpAccess::val(tp, ia);
      const Tensor& yv = OpAccess::val(tp, self);
      Tensor& ga = OpAccess::grad(tp, ia);
      for (std::size_t i = 0; i < g.size(); ++i)
        ga.data[i] += g.data[i] * dfd(xv.data[i], yv.data[i]);
    };
  });
}

inline double sigmoid_scalar(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
inline double softplus_scalar(double x) {
  // max(x,0) + log1p(exp(-|x|)) is overflow-safe at both tails
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

inline Var neg(Var a) {
  return detail::unary(a, [](double v) { return -v; }, [](double, double) { return -1.0; });
}
inline Var relu(Var a) {
  return detail::unary(a, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
inline Var elu(Var a) {
  return detail::unary(a, [](double v) { return v > 0.0 ? v : std::expm1(v); },
                       [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}
inline Var sigmoid(Var a) {
  return detail::unary(a, detail::sigmoid_scalar,
                       [](double, double y) { return y * (1.0 - y); });
}
inline Var tanh_op(Var a) {
  return detail::unary(a, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}
inline Var softplus(Var a) {
  return detail::unary(a, detail::softplus_scalar,
                       [](double x, double) { return detail::sigmoid_scalar(x); });
}
inline Var square(Var a) {
  return detail::unary(a, [](double v) { return v * v; },
                       [](double x, double) { return 2.0 * x; });
}
inline Var sqrt_op(Var a) {
  return detail::unary(a, [](double v) { return std::sqrt(v); },
                       [](double, double y) { return 0.5 / y; });
}
inline Var log_op(Var a) {
  return detail::unary(a, [](double v) { return std::log(v); },
                       [](double x, double) { return 1.0 / x; });
}
inline Var reciprocal(Var a) {
  return detail::unary(a, [](double v) { return 1.0 / v; },
                       [](double, double y) { return -y * y; });
}
inline Var abs_op(Var a) {
  return detail::unary(a, [](double v) { return std::abs(v); },
                       [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}
inline Var scale(Var a, double c) {
  return detail::unary(a, [c](double v) { return c * v; }, [c](double, double) { return c; });
}
inline Var add_const(Var a, double c) {
  return detail::unary(a, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

// Variance positivity map: max(softplus(x), floor). Keeps reciprocals finite
// while staying monotone nondecreasing, so it is usable both in training and
// in interval propagation.
inline constexpr double kVarianceFloor = 1e-6;
inline double variance_map_scalar(double x) {
  return std::max(detail::softplus_scalar(x), kVarianceFloor);
}
inline Var variance_map(Var a) {
  return detail::unary(a, variance_map_scalar, [](double x, double) {
    return detail::softplus_scalar(x) > kVarianceFloor ? detail::sigmoid_scalar(x) : 0.0;
  });
}

// ---- affine ----

// y = x * W^T + b with x:[B,in] (rank-1 x treated as one row, rank-1 output),
// W:[out,in], b:[out].
inline Var linear(Var x, Var W, Var b) {
  Tape& t = detail::tape_of(x, W);
  if (b.tape != &t) throw ContractError("ops across different tapes");
  const Tensor &xv = detail::val(x), &Wv = detail::val(W), &bv = detail::val(b);
  const std::size_t out_w = Wv.rows(), in_w = Wv.cols();
  if (xv.cols() != in_w)
    throw ShapeError("linear: input " + xv.shape_str() + " vs W " + Wv.shape_str());
  if (bv.size() != out_w) throw ShapeError("linear: bias " + bv.shape_str());
  const std::size_t B = xv.rows();
  Tensor out = xv.rank() == 1 ? Tensor(std::vector<std::size_t>{out_w}) : Tensor(B, out_w);
  {
    EMap o(out.data.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(out_w));
    o.noalias() = as_mat(xv) * as_mat(Wv).transpose();
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data.data(),
                                                        static_cast<Eigen::Index>(out_w));
  }
  const int ix = x.id, iw = W.id, ib = b.id;
  const bool nx = detail::needs(x), nw = detail::needs(W), nb = detail::needs(b);
  return OpAccess::node(t, std::move(out), nx || nw || nb, [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      ECMap gm(g.data.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(out_w));
      if (nx) {
        Tensor& gx = OpAccess::grad(tp, ix);
        EMap m(gx.data.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(in_w));
        m.noalias() += gm * as_mat(OpAccess::val(tp, iw));
      }
      if (nw) {
        Tensor& gw = OpAccess::grad(tp, iw);
        as_mat(gw).noalias() += gm.transpose() * as_mat(OpAccess::val(tp, ix));
      }
      if (nb) {
        Tensor& gb = OpAccess::grad(tp, ib);
        Eigen::Map<Eigen::RowVectorXd>(gb.data.data(), static_cast<Eigen::Index>(out_w)) +=
            gm.colwise().sum();
      }
    };
  });
}

// Residual propagation through an affine layer: y = r * |W|^T (no bias).
// Gradients reach W through the elementwise |.| (sign(0) = 0).
inline Var linear_abs(Var r, Var W) {
  Tape& t = detail::tape_of(r, W);
  const Tensor &rv = detail::val(r), &Wv = detail::val(W);
  const std::size_t out_w = Wv.rows(), in_w = Wv.cols();
  if (rv.cols() != in_w)
    throw ShapeError("linear_abs: input " + rv.shape_str() + " vs W " + Wv.shape_str());
  const std::size_t B = rv.rows();
  Tensor absW = Wv;
  for (double& v : absW.data) v = std::abs(v);
  Tensor out = rv.rank() == 1 ? Tensor(std::vector<std::size_t>{out_w}) : Tensor(B, out_w);
  {
    EMap o(out.data.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(out_w));
    o.noalias() = as_mat(rv) * as_mat(absW).transpose();
  }
  const int ir = r.id, iw = W.id;
  const bool nr = detail::needs(r), nw = detail::needs(W);
  return OpAccess::node(t, std::move(out), nr || nw, [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      const Tensor& Wcur = OpAccess::val(tp, iw);
      ECMap gm(g.data.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(out_w));
      if (nr) {
        Tensor aW = Wcur;
        for (double& v : aW.data) v = std::abs(v);
        Tensor& gr = OpAccess::grad(tp, ir);
        EMap m(gr.data.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(in_w));
        m.noalias() += gm * as_mat(aW);
      }
      if (nw) {
        Tensor& gw = OpAccess::grad(tp, iw);
        EMat raw = gm.transpose() * as_mat(OpAccess::val(tp, ir));
        for (std::size_t i = 0; i < gw.size(); ++i) {
          const double w = Wcur.data[i];
          const double s = w > 0.0 ? 1.0 : (w < 0.0 ? -1.0 : 0.0);
          gw.data[i] += s * raw(static_cast<Eigen::Index>(i / in_w),
                                static_cast<Eigen::Index>(i % in_w));
        }
      }
    };
  });
}

// ---- structure ops ----

inline Var reshape(Var a, ShapeVec shape) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = detail::val(a);
  if (Tensor::count(shape) != x.size()) throw ShapeError("reshape: element count mismatch");
  Tensor out = x;
  out.shape = shape;
  const int ia = a.id;
  return OpAccess::node(t, std::move(out), detail::needs(a), [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      detail::axpy(OpAccess::grad(tp, ia), g);
    };
  });
}

// Copies the value and severs the gradient path.
inline Var stop_grad(Var a) {
  Tape& t = detail::tape_of(a);
  return t.constant(detail::val(a));
}

inline Var concat_cols(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Tensor &x = detail::val(a), &y = detail::val(b);
  if (x.rows() != y.rows()) throw ShapeError("concat_cols: row mismatch");
  const std::size_t B = x.rows(), m = x.cols(), n = y.cols();
  const bool vec = x.rank() == 1 && y.rank() == 1;
  Tensor out = vec ? Tensor(std::vector<std::size_t>{m + n}) : Tensor(B, m + n);
  for (std::size_t r = 0; r < B; ++r) {
    for (std::size_t c = 0; c < m; ++c) out.data[r * (m + n) + c] = x.data[r * m + c];
    for (std::size_t c = 0; c < n; ++c) out.data[r * (m + n) + m + c] = y.data[r * n + c];
  }
  const int ia = a.id, ib = b.id;
  const bool na = detail::needs(a), nb = detail::needs(b);
  return OpAccess::node(t, std::move(out), na || nb, [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      if (na) {
        Tensor& ga = OpAccess::grad(tp, ia);
        for (std::size_t r = 0; r < B; ++r)
          for (std::size_t c = 0; c < m; ++c) ga.data[r * m + c] += g.data[r * (m + n) + c];
      }
      if (nb) {
        Tensor& gb = OpAccess::grad(tp, ib);
        for (std::size_t r = 0; r < B; ++r)
          for (std::size_t c = 0; c < n; ++c) gb.data[r * n + c] += g.data[r * (m + n) + m + c];
      }
    };
  });
}

// out[r,0] = x[r, idx[r]]
inline Var gather_cols(Var a, std::vector<std::size_t> idx) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = detail::val(a);
  const std::size_t B = x.rows(), n = x.cols();
  if (idx.size() != B) throw ShapeError("gather_cols: index count mismatch");
  for (std::size_t i : idx)
    if (i >= n) throw ContractError("gather_cols: index out of range");
  Tensor out(B, 1);
  for (std::size_t r = 0; r < B; ++r) out.data[r] = x.data[r * n + idx[r]];
  const int ia = a.id;
  return OpAccess::node(t, std::move(out), detail::needs(a), [=, ix = std::move(idx)](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      Tensor& ga = OpAccess::grad(tp, ia);
      for (std::size_t r = 0; r < B; ++r) ga.data[r * n + ix[r]] += g.data[r];
    };
  });
}

// column vector [B,1] -> [B,n] by copying across columns
inline Var broadcast_cols(Var a, std::size_t n) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = detail::val(a);
  if (x.cols() != 1) throw ShapeError("broadcast_cols: expects a column vector");
  const std::size_t B = x.rows();
  Tensor out(B, n);
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] = x.data[r];
  const int ia = a.id;
  return OpAccess::node(t, std::move(out), detail::needs(a), [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      Tensor& ga = OpAccess::grad(tp, ia);
      for (std::size_t r = 0; r < B; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += g.data[r * n + c];
        ga.data[r] += s;
      }
    };
  });
}

// [G, Z] -> [G*reps, Z], row g repeated reps times consecutively
inline Var repeat_rows(Var a, std::size_t reps) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = detail::val(a);
  const std::size_t G = x.rows(), Z = x.cols();
  Tensor out(G * reps, Z);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t k = 0; k < reps; ++k)
      std::copy(x.data.begin() + g * Z, x.data.begin() + (g + 1) * Z,
                out.data.begin() + (g * reps + k) * Z);
  const int ia = a.id;
  return OpAccess::node(t, std::move(out), detail::needs(a), [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      Tensor& ga = OpAccess::grad(tp, ia);
      for (std::size_t r = 0; r < G; ++r)
        for (std::size_t k = 0; k < reps; ++k)
          for (std::size_t c = 0; c < Z; ++c) ga.data[r * Z + c] += g.data[(r * reps + k) * Z + c];
    };
  });
}

// [G*group, Z] -> [G, Z], summing each consecutive block of `group` rows
inline Var group_sum_rows(Var a, std::size_t group) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = detail::val(a);
  if (group == 0 || x.rows() % group != 0) throw ShapeError("group_sum_rows: bad group size");
  const std::size_t G = x.rows() / group, Z = x.cols();
  Tensor out(G, Z);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t k = 0; k < group; ++k)
      for (std::size_t c = 0; c < Z; ++c) out.data[g * Z + c] += x.data[(g * group + k) * Z + c];
  const int ia = a.id;
  return OpAccess::node(t, std::move(out), detail::needs(a), [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      Tensor& ga = OpAccess::grad(tp, ia);
      for (std::size_t r = 0; r < G; ++r)
        for (std::size_t k = 0; k < group; ++k)
          for (std::size_t c = 0; c < Z; ++c) ga.data[(r * group + k) * Z + c] += g.data[r * Z + c];
    };
  });
}

// ---- reductions ----

inline Var sum_all(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = detail::val(a);
  Tensor out(std::vector<std::size_t>{1});
  for (double v : x.data) out.data[0] += v;
  const int ia = a.id;
  return OpAccess::node(t, std::move(out), detail::needs(a), [=](int self) {
    return [=](Tape& tp) {
      const double g = OpAccess::grad(tp, self).data[0];
      Tensor& ga = OpAccess::grad(tp, ia);
      for (double& v : ga.data) v += g;
    };
  });
}

// per-row sum: [B,n] -> [B,1]
inline Var row_sum(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = detail::val(a);
  const std::size_t B = x.rows(), n = x.cols();
  Tensor out(B, 1);
  for (std::size_t r = 0; r < B; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += x.data[r * n + c];
    out.data[r] = s;
  }
  const int ia = a.id;
  return OpAccess::node(t, std::move(out), detail::needs(a), [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      Tensor& ga = OpAccess::grad(tp, ia);
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t c = 0; c < n; ++c) ga.data[r * n + c] += g.data[r];
    };
  });
}

// numerically stable per-row logsumexp: [B,n] -> [B,1]
inline Var logsumexp_rows(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = detail::val(a);
  const std::size_t B = x.rows(), n = x.cols();
  if (n == 0) throw ContractError("logsumexp over empty rows");
  Tensor out(B, 1);
  for (std::size_t r = 0; r < B; ++r) {
    double m = x.data[r * n];
    for (std::size_t c = 1; c < n; ++c) m = std::max(m, x.data[r * n + c]);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += std::exp(x.data[r * n + c] - m);
    out.data[r] = m + std::log(s);
  }
  const int ia = a.id;
  return OpAccess::node(t, std::move(out), detail::needs(a), [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      const Tensor& xv = OpAccess::val(tp, ia);
      const Tensor& yv = OpAccess::val(tp, self);
      Tensor& ga = OpAccess::grad(tp, ia);
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t c = 0; c < n; ++c)
          ga.data[r * n + c] += g.data[r] * std::exp(xv.data[r * n + c] - yv.data[r]);
    };
  });
}

// per-row dot product: ([B,n], [B,n]) -> [B,1]
inline Var row_dot(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Tensor &x = detail::val(a), &y = detail::val(b);
  check_same_shape(x, y, "row_dot");
  const std::size_t B = x.rows(), n = x.cols();
  Tensor out(B, 1);
  for (std::size_t r = 0; r < B; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += x.data[r * n + c] * y.data[r * n + c];
    out.data[r] = s;
  }
  const int ia = a.id, ib = b.id;
  const bool na = detail::needs(a), nb = detail::needs(b);
  return OpAccess::node(t, std::move(out), na || nb, [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      const Tensor& xv = OpAccess::val(tp, ia);
      const Tensor& yv = OpAccess::val(tp, ib);
      for (std::size_t r = 0; r < B; ++r) {
        if (na) {
          Tensor& ga = OpAccess::grad(tp, ia);
          for (std::size_t c = 0; c < n; ++c)
            ga.data[r * n + c] += g.data[r] * yv.data[r * n + c];
        }
        if (nb) {
          Tensor& gb = OpAccess::grad(tp, ib);
          for (std::size_t c = 0; c < n; ++c)
            gb.data[r * n + c] += g.data[r] * xv.data[r * n + c];
        }
      }
    };
  });
}

// Per-sample vector-matrix product used by the monotone mixer:
// q:[B,n], w:[B,n*e] (row-major per-sample [n,e] matrix) -> [B,e]
// out[b,j] = sum_a q[b,a] * w[b, a*e + j]
inline Var mix_dot(Var q, Var w, std::size_t e) {
  Tape& t = detail::tape_of(q, w);
  const Tensor &qv = detail::val(q), &wv = detail::val(w);
  const std::size_t B = qv.rows(), n = qv.cols();
  if (wv.rows() != B || wv.cols() != n * e) throw ShapeError("mix_dot: weight shape");
  Tensor out(B, e);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t a = 0; a < n; ++a) {
      const double qa = qv.data[b * n + a];
      for (std::size_t j = 0; j < e; ++j) out.data[b * e + j] += qa * wv.data[b * n * e + a * e + j];
    }
  const int iq = q.id, iw = w.id;
  const bool nq = detail::needs(q), nw = detail::needs(w);
  return OpAccess::node(t, std::move(out), nq || nw, [=](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      const Tensor& qc = OpAccess::val(tp, iq);
      const Tensor& wc = OpAccess::val(tp, iw);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t a = 0; a < n; ++a) {
          double acc = 0.0;
          for (std::size_t j = 0; j < e; ++j) {
            const double gj = g.data[b * e + j];
            acc += gj * wc.data[b * n * e + a * e + j];
            if (nw) OpAccess::grad(tp, iw).data[b * n * e + a * e + j] += gj * qc.data[b * n + a];
          }
          if (nq) OpAccess::grad(tp, iq).data[b * n + a] += acc;
        }
    };
  });
}

// Fused GRU gate math over stacked pre-activations. gx = x*Wx^T + b and
// gh = h*Wh^T arrive as [B, 3H] blocks ordered (reset, update, candidate):
//   r = sigmoid(gx_r + gh_r)
//   u = sigmoid(gx_u + gh_u)
//   c = tanh(gx_c + r .* gh_c)
//   h' = (1-u) .* c + u .* h
inline Var gru_gates(Var gx, Var gh, Var h) {
  Tape& t = detail::tape_of(gx, gh);
  const Tensor &gxv = detail::val(gx), &ghv = detail::val(gh), &hv = detail::val(h);
  const std::size_t B = hv.rows(), H = hv.cols();
  if (gxv.rows() != B || gxv.cols() != 3 * H || ghv.rows() != B || ghv.cols() != 3 * H)
    throw ShapeError("gru_gates: stacked width " + gxv.shape_str() + " vs " + hv.shape_str());
  struct Stash {
    Tensor r, u, c;
  };
  Stash st{Tensor(B, H), Tensor(B, H), Tensor(B, H)};
  Tensor out = hv.rank() == 1 ? Tensor(std::vector<std::size_t>{H}) : Tensor(B, H);
  for (std::size_t row = 0; row < B; ++row) {
    const double* px = &gxv.data[row * 3 * H];
    const double* ph = &ghv.data[row * 3 * H];
    const double* phid = &hv.data[row * H];
    double* pr = &st.r.data[row * H];
    double* pu = &st.u.data[row * H];
    double* pc = &st.c.data[row * H];
    double* po = &out.data[row * H];
    for (std::size_t k = 0; k < H; ++k) {
      const double r = detail::sigmoid_scalar(px[k] + ph[k]);
      const double u = detail::sigmoid_scalar(px[H + k] + ph[H + k]);
      const double c = std::tanh(px[2 * H + k] + r * ph[2 * H + k]);
      pr[k] = r;
      pu[k] = u;
      pc[k] = c;
      po[k] = (1.0 - u) * c + u * phid[k];
    }
  }
  const int ix = gx.id, ih2 = gh.id, ihid = h.id;
  const bool nx = detail::needs(gx), nh2 = detail::needs(gh), nhid = detail::needs(h);
  return OpAccess::node(t, std::move(out), nx || nh2 || nhid,
                        [=, stash = std::move(st)](int self) mutable {
    return [=, stash = std::move(stash)](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      const Tensor& ghc = OpAccess::val(tp, ih2);
      const Tensor& hcur = OpAccess::val(tp, ihid);
      for (std::size_t row = 0; row < B; ++row) {
        const double* pg = &g.data[row * H];
        const double* pr = &stash.r.data[row * H];
        const double* pu = &stash.u.data[row * H];
        const double* pc = &stash.c.data[row * H];
        const double* phg = &ghc.data[row * 3 * H];
        const double* phid = &hcur.data[row * H];
        double* ggx = nx ? &OpAccess::grad(tp, ix).data[row * 3 * H] : nullptr;
        double* ggh = nh2 ? &OpAccess::grad(tp, ih2).data[row * 3 * H] : nullptr;
        double* ghd = nhid ? &OpAccess::grad(tp, ihid).data[row * H] : nullptr;
        for (std::size_t k = 0; k < H; ++k) {
          const double r = pr[k], u = pu[k], c = pc[k];
          const double dh = pg[k];
          const double dc = dh * (1.0 - u);
          const double du = dh * (phid[k] - c);
          const double dpre_c = dc * (1.0 - c * c);
          const double dr = dpre_c * phg[2 * H + k];
          const double dpre_u = du * u * (1.0 - u);
          const double dpre_r = dr * r * (1.0 - r);
          if (ggx != nullptr) {
            ggx[k] += dpre_r;
            ggx[H + k] += dpre_u;
            ggx[2 * H + k] += dpre_c;
          }
          if (ggh != nullptr) {
            ggh[k] += dpre_r;
            ggh[H + k] += dpre_u;
            ggh[2 * H + k] += dpre_c * r;
          }
          if (ghd != nullptr) ghd[k] += dh * u;
        }
      }
    };
  });
}

// out[r] = mean over rows sel[r] of x; used for subset-ablated message
// aggregation. Each selection must be nonempty.
inline Var gather_rows_mean(Var a, std::vector<std::vector<std::size_t>> sel) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = detail::val(a);
  const std::size_t n = x.cols();
  Tensor out(sel.size(), n);
  for (std::size_t r = 0; r < sel.size(); ++r) {
    if (sel[r].empty()) throw ContractError("gather_rows_mean: empty selection");
    const double inv = 1.0 / static_cast<double>(sel[r].size());
    for (std::size_t src : sel[r]) {
      if (src >= x.rows()) throw ContractError("gather_rows_mean: row out of range");
      for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] += inv * x.data[src * n + c];
    }
  }
  const int ia = a.id;
  return OpAccess::node(t, std::move(out), detail::needs(a), [=, sv = std::move(sel)](int self) {
    return [=](Tape& tp) {
      const Tensor& g = OpAccess::grad(tp, self);
      Tensor& ga = OpAccess::grad(tp, ia);
      for (std::size_t r = 0; r < sv.size(); ++r) {
        const double inv = 1.0 / static_cast<double>(sv[r].size());
        for (std::size_t src : sv[r])
          for (std::size_t c = 0; c < n; ++c) ga.data[src * n + c] += inv * g.data[r * n + c];
      }
    };
  });
}

// operator sugar
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }

}  // namespace cromac
