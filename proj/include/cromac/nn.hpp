#pragma once
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cromac/tape.hpp"

namespace cromac {

// Named handle to a trainable tensor. Modules append their parameters with a
// dotted prefix; the same list drives Adam, target copies, clamping and
// checkpoints, so ordering must be deterministic.
struct ParamRef {
  std::string name;
  Tensor* tensor;
};
using ParamList = std::vector<ParamRef>;

inline void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    p.tensor->ensure_grad();
    p.tensor->zero_grad();
  }
}

// ---- affine layer ----

struct AffineLayer {
  Tensor W;  // [out, in]
  Tensor b;  // [out]

  AffineLayer() = default;
  AffineLayer(std::size_t out, std::size_t in)
      : W(out, in), b(std::vector<std::size_t>{out}) {}

  std::size_t in_width() const { return W.cols(); }
  std::size_t out_width() const { return W.rows(); }

  void init(Rng& rng, double bound = 0.0) {
    const double k = bound > 0.0 ? bound : 1.0 / std::sqrt(static_cast<double>(in_width()));
    W.fill_uniform(rng, -k, k);
    b.fill_uniform(rng, -k, k);
  }

  void collect(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".W", &W});
    out.push_back({prefix + ".b", &b});
  }
};

inline Var linear_forward(Tape& tape, Var x, AffineLayer& layer) {
  return linear(x, tape.param(layer.W), tape.param(layer.b));
}

// Plain-value convenience (same code path, no-grad tape underneath).
inline Tensor linear_forward(const Tensor& x, AffineLayer& layer) {
  Tape t(false);
  return t.value(linear_forward(t, t.constant(x), layer));
}

// ---- GRU cell ----

// Standard three-gate cell with the gate transforms stored stacked (rows
// ordered reset, update, candidate) so one matmul covers all three:
//   r = sigmoid(Wx_r x + Wh_r h + b_r)
//   u = sigmoid(Wx_u x + Wh_u h + b_u)
//   c = tanh(Wx_c x + r .* (Wh_c h) + b_c)
//   h' = (1-u) .* c + u .* h
struct GruCell {
  Tensor Wx;  // [3*hidden, in]
  Tensor Wh;  // [3*hidden, hidden]
  Tensor b;   // [3*hidden]

  GruCell() = default;
  GruCell(std::size_t hidden, std::size_t in)
      : Wx(3 * hidden, in), Wh(3 * hidden, hidden),
        b(std::vector<std::size_t>{3 * hidden}) {}

  std::size_t hidden_width() const { return Wh.cols(); }
  std::size_t in_width() const { return Wx.cols(); }

  void init(Rng& rng) {
    const double k = 1.0 / std::sqrt(static_cast<double>(hidden_width()));
    for (Tensor* w : {&Wx, &Wh, &b}) w->fill_uniform(rng, -k, k);
  }

  void collect(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".Wx", &Wx});
    out.push_back({prefix + ".Wh", &Wh});
    out.push_back({prefix + ".b", &b});
  }
};

struct GruState {
  Tensor hidden;
};

inline Var gru_step(Tape& tape, Var x, Var h, GruCell& cell) {
  if (tape.value(x).cols() != cell.in_width())
    throw ShapeError("gru_step: input width " + tape.value(x).shape_str());
  if (tape.value(h).cols() != cell.hidden_width())
    throw ShapeError("gru_step: hidden width " + tape.value(h).shape_str());
  Var zero_b = tape.constant(Tensor::zeros(3 * cell.hidden_width()));
  Var gx = linear(x, tape.param(cell.Wx), tape.param(cell.b));
  Var gh = linear(h, tape.param(cell.Wh), zero_b);
  return gru_gates(gx, gh, h);
}

inline GruState gru_step(const Tensor& x, const GruState& state, GruCell& cell) {
  Tape t(false);
  Var h = gru_step(t, t.constant(x), t.constant(state.hidden), cell);
  return GruState{t.value(h)};
}

// ---- MLP ----

struct Mlp {
  std::vector<AffineLayer> layers;

  Mlp() = default;
  // widths = {in, hidden..., out}; ReLU between layers, linear output
  explicit Mlp(const std::vector<std::size_t>& widths) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      layers.emplace_back(widths[i + 1], widths[i]);
  }

  void init(Rng& rng) {
    for (auto& l : layers) l.init(rng);
  }

  Var forward(Tape& tape, Var x) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = linear_forward(tape, x, layers[i]);
      if (i + 1 < layers.size()) x = relu(x);
    }
    return x;
  }

  void collect(ParamList& out, const std::string& prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(out, prefix + ".l" + std::to_string(i));
  }
};

// ---- Adam ----

struct AdamState {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long step = 0;
  std::vector<std::vector<double>> m, v;

  AdamState() = default;
  explicit AdamState(const ParamList& params, double learning_rate = 5e-4) : lr(learning_rate) {
    for (const auto& p : params) {
      m.emplace_back(p.tensor->size(), 0.0);
      v.emplace_back(p.tensor->size(), 0.0);
    }
  }
};

// Standard bias-corrected Adam over the registered parameters, reading each
// tensor's grad buffer.
inline void adam_step(const ParamList& params, AdamState& state) {
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state/param count mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = *params[i].tensor;
    t.ensure_grad();
    if (state.m[i].size() != t.size()) throw ShapeError("adam_step: moment shape mismatch");
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double g = t.grad[k];
      state.m[i][k] = state.beta1 * state.m[i][k] + (1.0 - state.beta1) * g;
      state.v[i][k] = state.beta2 * state.v[i][k] + (1.0 - state.beta2) * g * g;
      const double mh = state.m[i][k] / bc1;
      const double vh = state.v[i][k] / bc2;
      t.data[k] -= state.lr * mh / (std::sqrt(vh) + state.eps);
    }
  }
}

inline void clamp_tensor(Tensor& t, double lo, double hi) {
  for (double& v : t.data) v = std::min(hi, std::max(lo, v));
}

// Global L2 gradient clipping; max_norm <= 0 disables.
inline double clip_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor->grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params)
      for (double& g : p.tensor->grad) g *= s;
  }
  return norm;
}

// Hard copy src -> dst by registry position; names and shapes must line up.
inline void copy_params(const ParamList& src, const ParamList& dst) {
  if (src.size() != dst.size()) throw ContractError("copy_params: architecture mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (!src[i].tensor->same_shape(*dst[i].tensor))
      throw ContractError("copy_params: shape mismatch at " + src[i].name);
    dst[i].tensor->data = src[i].tensor->data;
  }
}

// ---- gradient verification oracle ----

// f(with_grad): evaluates the scalar objective; when with_grad, it must also
// run tape backward so gradients land in the parameter buffers. Returns the
// max over parameter coordinates of the relative error between the tape
// gradient and a central finite difference.
inline double finite_diff_check(const std::function<double(bool)>& f, const ParamList& params,
                                double h = 1e-5) {
  zero_grads(params);
  const double base = f(true);
  if (!std::isfinite(base)) throw NumericError("finite_diff_check: non-finite objective");
  std::vector<std::vector<double>> tape_grads;
  for (const auto& p : params) tape_grads.push_back(p.tensor->grad);
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = *params[i].tensor;
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double orig = t.data[k];
      t.data[k] = orig + h;
      const double fp = f(false);
      t.data[k] = orig - h;
      const double fm = f(false);
      t.data[k] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("finite_diff_check: non-finite probe");
      const double fd = (fp - fm) / (2.0 * h);
      const double g = tape_grads[i][k];
      const double denom = std::max({1e-2, std::abs(fd), std::abs(g)});
      worst = std::max(worst, std::abs(fd - g) / denom);
    }
  }
  return worst;
}

}  // namespace cromac
