#pragma once
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "cromac/latent.hpp"
#include "cromac/nn.hpp"

namespace cromac {

// Elementwise interval box. Stored as (lower, upper); the (average, residual)
// view is derived. lower <= upper is enforced on construction.
struct IntervalBounds {
  Tensor lower;
  Tensor upper;

  IntervalBounds() = default;
  IntervalBounds(Tensor lo, Tensor hi) : lower(std::move(lo)), upper(std::move(hi)) {
    check_same_shape(lower, upper, "IntervalBounds");
    for (std::size_t i = 0; i < lower.size(); ++i)
      if (!(lower[i] <= upper[i])) throw ContractError("IntervalBounds: lower > upper");
  }

  static IntervalBounds from_center(const Tensor& avg, const Tensor& res) {
    check_same_shape(avg, res, "IntervalBounds::from_center");
    Tensor lo = avg, hi = avg;
    for (std::size_t i = 0; i < avg.size(); ++i) {
      if (res[i] < 0.0) throw ContractError("IntervalBounds: negative residual");
      lo[i] -= res[i];
      hi[i] += res[i];
    }
    return IntervalBounds(std::move(lo), std::move(hi));
  }

  Tensor average() const {
    Tensor a = lower;
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.5 * (lower[i] + upper[i]);
    return a;
  }
  Tensor residual() const {
    Tensor r = lower;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = 0.5 * (upper[i] - lower[i]);
    return r;
  }

  std::size_t width() const { return lower.size(); }

  bool contains(const Tensor& x, double slack = 0.0) const {
    if (!x.same_shape(lower)) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] < lower[i] - slack || x[i] > upper[i] + slack) return false;
    return true;
  }
};

struct PerturbationBudget {
  double epsilon = 0.0;  // l_inf radius in message space
  double kappa = 1.0;    // latent-space multiplier

  PerturbationBudget() = default;
  PerturbationBudget(double eps, double k) : epsilon(eps), kappa(k) {
    if (epsilon < 0.0) throw ContractError("PerturbationBudget: epsilon must be >= 0");
    if (!(kappa > 0.0)) throw ContractError("PerturbationBudget: kappa must be > 0");
  }

  double latent_radius() const { return kappa * epsilon; }
};

// l_inf ball around x: average x, residual epsilon in every coordinate.
inline IntervalBounds epsilon_ball(const Tensor& x, double epsilon) {
  if (epsilon < 0.0) throw ContractError("epsilon_ball: negative epsilon");
  Tensor lo = x, hi = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    lo[i] -= epsilon;
    hi[i] += epsilon;
  }
  return IntervalBounds(std::move(lo), std::move(hi));
}

// Affine propagation: out-average = W*avg + b, out-residual = |W|*res.
inline IntervalBounds ibp_affine(const IntervalBounds& in, AffineLayer& layer) {
  if (in.width() != layer.in_width()) throw ShapeError("ibp_affine: width mismatch");
  Tensor avg = linear_forward(in.average(), layer);
  Tensor res_in = in.residual();
  Tensor res(avg.shape);
  for (std::size_t r = 0; r < layer.out_width(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < layer.in_width(); ++c)
      s += std::abs(layer.W.at(r, c)) * res_in[c];
    res[r] = s;
  }
  return IntervalBounds::from_center(avg, res);
}

// Elementwise monotone nondecreasing map: endpoints map to endpoints.
inline IntervalBounds ibp_monotonic(const IntervalBounds& in,
                                    const std::function<double(double)>& f) {
  Tensor lo = in.lower, hi = in.upper;
  for (std::size_t i = 0; i < lo.size(); ++i) {
    lo[i] = f(in.lower[i]);
    hi[i] = f(in.upper[i]);
  }
  return IntervalBounds(std::move(lo), std::move(hi));
}

// Per-message bounds of the two encoder heads under a message-space epsilon
// ball; the variance head goes through the variance positivity map.
struct EncoderBounds {
  std::vector<IntervalBounds> mean;      // per message, on the mean head output
  std::vector<IntervalBounds> variance;  // per message, after the variance map
};

inline EncoderBounds encoder_bounds(const std::vector<Tensor>& messages, double epsilon,
                                    MessageEncoder& enc) {
  if (epsilon < 0.0) throw ContractError("encoder_bounds: negative epsilon");
  EncoderBounds out;
  for (const auto& m : messages) {
    if (m.size() != enc.in_width()) throw ShapeError("encoder_bounds: message width");
    IntervalBounds ball = epsilon_ball(m, epsilon);
    out.mean.push_back(ibp_affine(ball, enc.mean_head));
    out.variance.push_back(
        ibp_monotonic(ibp_affine(ball, enc.var_head), variance_map_scalar));
  }
  return out;
}

// Certified envelope on the fused posterior. The fused variance is 1/N times
// the harmonic mean of the per-expert variances, so it sits inside
// [min(lower)/N, max(upper)/N]; the fused mean is a weighted harmonic mean of
// the per-expert means (weights mean/variance) once means are shifted to a
// positive range, so it sits inside [min(lower), max(upper)]. The shift
// constant cancels when un-shifting, but it is what makes the weighted mean
// argument applicable.
struct PoeEnvelope {
  IntervalBounds mean;
  IntervalBounds variance;
};

inline PoeEnvelope poe_harmonic_bounds(const std::vector<IntervalBounds>& variance_bounds,
                                       const std::vector<IntervalBounds>& mean_bounds) {
  if (variance_bounds.empty() || variance_bounds.size() != mean_bounds.size())
    throw ContractError("poe_harmonic_bounds: expert list mismatch");
  const std::size_t n = variance_bounds.size();
  const std::size_t w = variance_bounds[0].width();
  double vmin = std::numeric_limits<double>::infinity(), vmax = -vmin;
  double mmin = vmin, mmax = -vmin;
  for (const auto& vb : variance_bounds) {
    if (vb.width() != w) throw ShapeError("poe_harmonic_bounds: width mismatch");
    for (std::size_t i = 0; i < w; ++i) {
      if (!(vb.lower[i] > 0.0))
        throw DomainError("poe_harmonic_bounds: variance lower bound must be positive");
      vmin = std::min(vmin, vb.lower[i]);
      vmax = std::max(vmax, vb.upper[i]);
    }
  }
  for (const auto& mb : mean_bounds) {
    if (mb.width() != w) throw ShapeError("poe_harmonic_bounds: width mismatch");
    for (std::size_t i = 0; i < w; ++i) {
      mmin = std::min(mmin, mb.lower[i]);
      mmax = std::max(mmax, mb.upper[i]);
    }
  }
  // shift means positive, take the weighted-harmonic envelope, shift back
  const double c = 1.0 - mmin;
  const double shifted_lo = mmin + c, shifted_hi = mmax + c;
  const double nd = static_cast<double>(n);
  PoeEnvelope env;
  env.variance = IntervalBounds(Tensor::full(w, vmin / nd), Tensor::full(w, vmax / nd));
  env.mean = IntervalBounds(Tensor::full(w, shifted_lo - c), Tensor::full(w, shifted_hi - c));
  return env;
}

// Scalar cap on how far the fused value can drift from the true fusion:
// (max upper - min lower) / N over the per-expert boxes.
inline double integration_error_bound(const std::vector<IntervalBounds>& z_bounds) {
  if (z_bounds.empty()) throw ContractError("integration_error_bound: empty list");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& b : z_bounds)
    for (std::size_t i = 0; i < b.width(); ++i) {
      lo = std::min(lo, b.lower[i]);
      hi = std::max(hi, b.upper[i]);
    }
  return (hi - lo) / static_cast<double>(z_bounds.size());
}

// Exact forward through the affine/ReLU head on concat(tau, z); the point
// counterpart of q_value_bounds.
inline Tensor qhead_forward(const Tensor& tau, const Tensor& z, Mlp& qhead) {
  Tape t(false);
  Var x = concat_cols(t.constant(tau), t.constant(z));
  for (std::size_t i = 0; i < qhead.layers.size(); ++i) {
    x = linear_forward(t, x, qhead.layers[i]);
    if (i + 1 < qhead.layers.size()) x = relu(x);
  }
  return t.value(x);
}

// Per-action Q bounds with tau held exact and z perturbed inside the
// kappa*epsilon l_inf ball, propagated through the affine/ReLU head chain.
inline IntervalBounds q_value_bounds(const Tensor& tau, const Tensor& z,
                                     const PerturbationBudget& budget, Mlp& qhead) {
  if (qhead.layers.empty()) throw ContractError("q_value_bounds: empty head");
  const std::size_t tw = tau.size(), zw = z.size();
  if (qhead.layers.front().in_width() != tw + zw)
    throw ShapeError("q_value_bounds: head input width");
  Tensor avg(std::vector<std::size_t>{tw + zw});
  Tensor res(std::vector<std::size_t>{tw + zw});
  for (std::size_t i = 0; i < tw; ++i) avg[i] = tau[i];
  for (std::size_t i = 0; i < zw; ++i) {
    avg[tw + i] = z[i];
    res[tw + i] = budget.latent_radius();
  }
  IntervalBounds cur = IntervalBounds::from_center(avg, res);
  for (std::size_t i = 0; i < qhead.layers.size(); ++i) {
    cur = ibp_affine(cur, qhead.layers[i]);
    if (i + 1 < qhead.layers.size())
      cur = ibp_monotonic(cur, [](double v) { return v > 0.0 ? v : 0.0; });
  }
  return cur;
}

}  // namespace cromac
