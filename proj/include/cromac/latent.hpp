#pragma once
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cromac/nn.hpp"

namespace cromac {

// ---- diagonal Gaussian ----

struct DiagonalGaussian {
  Tensor mean;
  Tensor variance;  // strictly positive elementwise

  DiagonalGaussian() = default;
  DiagonalGaussian(Tensor m, Tensor v) : mean(std::move(m)), variance(std::move(v)) {
    check_same_shape(mean, variance, "DiagonalGaussian");
    for (double x : variance.data)
      if (!(x > 0.0)) throw DomainError("DiagonalGaussian: variance must be positive");
  }

  std::size_t width() const { return mean.size(); }
};

// tape-resident counterpart used inside differentiated losses
struct GaussianVar {
  Var mean;
  Var variance;
};

// Product of diagonal Gaussian experts: precisions add, the mean is the
// precision-weighted average. Elementwise over the latent dimensions.
inline DiagonalGaussian poe_fuse(const std::vector<DiagonalGaussian>& experts) {
  if (experts.empty()) throw ContractError("poe_fuse: empty expert list");
  const std::size_t w = experts[0].width();
  Tensor prec(experts[0].mean.shape);
  Tensor weighted(experts[0].mean.shape);
  for (const auto& e : experts) {
    if (e.width() != w) throw ShapeError("poe_fuse: expert width mismatch");
    for (std::size_t i = 0; i < w; ++i) {
      if (!(e.variance[i] > 0.0)) throw DomainError("poe_fuse: nonpositive variance");
      const double t = 1.0 / e.variance[i];
      prec[i] += t;
      weighted[i] += e.mean[i] * t;
    }
  }
  Tensor mean(experts[0].mean.shape), var(experts[0].mean.shape);
  for (std::size_t i = 0; i < w; ++i) {
    var[i] = 1.0 / prec[i];
    mean[i] = weighted[i] * var[i];
  }
  return DiagonalGaussian(std::move(mean), std::move(var));
}

// Batched tape version: experts stacked as [G*group, Z] rows (group experts
// per fusion, consecutive), returns fused [G, Z].
inline GaussianVar poe_fuse_rows(GaussianVar experts, std::size_t group) {
  Var prec = reciprocal(experts.variance);
  Var prec_sum = group_sum_rows(prec, group);
  Var weighted_sum = group_sum_rows(mul(experts.mean, prec), group);
  Var fused_var = reciprocal(prec_sum);
  Var fused_mean = mul(weighted_sum, fused_var);
  return {fused_mean, fused_var};
}

// ---- closed-form diagonal Gaussian KL ----

// KL(p || q), summed over dimensions.
inline double gaussian_kl(const DiagonalGaussian& p, const DiagonalGaussian& q) {
  check_same_shape(p.mean, q.mean, "gaussian_kl");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.width(); ++i) {
    const double vp = p.variance[i], vq = q.variance[i];
    const double dm = p.mean[i] - q.mean[i];
    kl += 0.5 * (vp / vq + dm * dm / vq - 1.0 + std::log(vq / vp));
  }
  return kl;
}

// Per-dimension KL(p || q) on the tape, shape-preserving; callers mask/sum.
inline Var gaussian_kl_t(GaussianVar p, GaussianVar q) {
  Var inv_vq = reciprocal(q.variance);
  Var ratio = mul(p.variance, inv_vq);
  Var dm2 = square(sub(p.mean, q.mean));
  Var quad = mul(dm2, inv_vq);
  Var logs = sub(log_op(q.variance), log_op(p.variance));
  return scale(add(add(ratio, quad), add_const(logs, -1.0)), 0.5);
}

// ---- state VAE ----

// Encoder trunk -> two affine heads (mean, pre-variance through the variance
// positivity map), decoder MLP back to the state. One hidden ReLU layer on
// each side.
struct StateVae {
  Mlp enc_trunk;          // state -> hidden
  AffineLayer mean_head;  // hidden -> z
  AffineLayer var_head;   // hidden -> z
  Mlp decoder;            // z -> hidden -> state

  mutable long long encode_calls = 0;  // counted to prove evaluation stays decentralized

  StateVae() = default;
  StateVae(std::size_t state_w, std::size_t hidden_w, std::size_t z_w)
      : enc_trunk({state_w, hidden_w}),
        mean_head(z_w, hidden_w),
        var_head(z_w, hidden_w),
        decoder({z_w, hidden_w, state_w}) {}

  std::size_t z_width() const { return mean_head.out_width(); }
  std::size_t state_width() const { return enc_trunk.layers.front().in_width(); }

  void init(Rng& rng) {
    enc_trunk.init(rng);
    mean_head.init(rng);
    var_head.init(rng);
    decoder.init(rng);
  }

  void collect(ParamList& out, const std::string& prefix) {
    enc_trunk.collect(out, prefix + ".enc");
    mean_head.collect(out, prefix + ".mean");
    var_head.collect(out, prefix + ".var");
    decoder.collect(out, prefix + ".dec");
  }

  void collect_encoder(ParamList& out, const std::string& prefix) {
    enc_trunk.collect(out, prefix + ".enc");
    mean_head.collect(out, prefix + ".mean");
    var_head.collect(out, prefix + ".var");
  }

  GaussianVar encode_t(Tape& tape, Var s) {
    ++encode_calls;
    Var h = relu(enc_trunk.forward(tape, s));
    Var mu = linear_forward(tape, h, mean_head);
    Var v = variance_map(linear_forward(tape, h, var_head));
    return {mu, v};
  }

  Var decode_t(Tape& tape, Var z) { return decoder.forward(tape, z); }
};

// z = mean + sqrt(variance) * eta with standard-normal eta when sampling,
// else z = mean.
inline std::pair<Tensor, DiagonalGaussian> encode_state(const Tensor& s, StateVae& vae,
                                                        bool sample, Rng& rng) {
  if (s.cols() != vae.state_width()) throw ShapeError("encode_state: state width");
  Tape t(false);
  GaussianVar g = vae.encode_t(t, t.constant(s));
  DiagonalGaussian post(t.value(g.mean), t.value(g.variance));
  Tensor z = post.mean;
  if (sample)
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += std::sqrt(post.variance[i]) * rng.normal();
  return {std::move(z), std::move(post)};
}

// Reconstruction NLL with unit observation variance (0.5 * |s - s_hat|^2,
// constants dropped) plus closed-form KL to the standard normal prior.
inline double state_vae_loss(const Tensor& s, StateVae& vae, Rng& rng) {
  Tape t(false);
  Var sv = t.constant(s);
  GaussianVar post = vae.encode_t(t, sv);
  Tensor noise(t.value(post.mean).shape);
  for (double& v : noise.data) v = rng.normal();
  Var z = add(post.mean, mul(sqrt_op(post.variance), t.constant(noise)));
  Var recon = vae.decode_t(t, z);
  Var nll = scale(sum_all(square(sub(sv, recon))), 0.5);
  DiagonalGaussian p(t.value(post.mean), t.value(post.variance));
  DiagonalGaussian prior(Tensor(p.mean.shape), Tensor::full(p.width(), 1.0));
  return t.value(nll)[0] + gaussian_kl(p, prior);
}

// ---- message encoder ----

// One shared single-layer two-headed encoder; both weight matrices are kept
// inside [c_min, c_max] after every optimizer step.
struct MessageEncoder {
  AffineLayer mean_head;  // message -> z
  AffineLayer var_head;   // message -> z (through the variance map)

  MessageEncoder() = default;
  MessageEncoder(std::size_t msg_w, std::size_t z_w)
      : mean_head(z_w, msg_w), var_head(z_w, msg_w) {}

  std::size_t in_width() const { return mean_head.in_width(); }
  std::size_t z_width() const { return mean_head.out_width(); }

  void init(Rng& rng, double c_max) {
    const double k = std::min(1.0 / std::sqrt(static_cast<double>(in_width())), c_max);
    mean_head.W.fill_uniform(rng, -k, k);
    mean_head.b.fill_uniform(rng, -k, k);
    var_head.W.fill_uniform(rng, -k, k);
    var_head.b.fill_uniform(rng, -k, k);
  }

  void clamp_weights(double c_min, double c_max) {
    clamp_tensor(mean_head.W, c_min, c_max);
    clamp_tensor(var_head.W, c_min, c_max);
  }

  bool weights_within(double c_min, double c_max) const {
    auto ok = [&](const Tensor& t) {
      for (double v : t.data)
        if (v < c_min || v > c_max) return false;
      return true;
    };
    return ok(mean_head.W) && ok(var_head.W);
  }

  void collect(ParamList& out, const std::string& prefix) {
    mean_head.collect(out, prefix + ".mean");
    var_head.collect(out, prefix + ".var");
  }

  GaussianVar encode_t(Tape& tape, Var m) {
    Var mu = linear_forward(tape, m, mean_head);
    Var v = variance_map(linear_forward(tape, m, var_head));
    return {mu, v};
  }

  DiagonalGaussian encode(const Tensor& m) {
    Tape t(false);
    GaussianVar g = encode_t(t, t.constant(m));
    return DiagonalGaussian(t.value(g.mean), t.value(g.variance));
  }
};

// Encode every received message (own history included as one of them), fuse
// by product of experts, then sample (training rollouts) or take the mean
// (execution).
inline std::pair<Tensor, DiagonalGaussian> fuse_messages(const std::vector<Tensor>& messages,
                                                         MessageEncoder& enc, bool sample,
                                                         Rng& rng) {
  if (messages.empty()) throw ContractError("fuse_messages: empty message list");
  std::vector<DiagonalGaussian> experts;
  experts.reserve(messages.size());
  for (const auto& m : messages) {
    if (m.size() != enc.in_width()) throw ShapeError("fuse_messages: message width");
    experts.push_back(enc.encode(m));
  }
  DiagonalGaussian fused = poe_fuse(experts);
  Tensor z = fused.mean;
  if (sample)
    for (std::size_t i = 0; i < z.size(); ++i)
      z[i] += std::sqrt(fused.variance[i]) * rng.normal();
  return {std::move(z), std::move(fused)};
}

enum class KlDirection { StateToMessage, MessageToState };

// KL between the (gradient-stopped) state posterior and the fused message
// posterior; gradients flow only into the message encoder.
inline double message_kl_loss(const DiagonalGaussian& z_st_posterior,
                              const DiagonalGaussian& fused,
                              KlDirection dir = KlDirection::StateToMessage) {
  return dir == KlDirection::StateToMessage ? gaussian_kl(z_st_posterior, fused)
                                            : gaussian_kl(fused, z_st_posterior);
}

inline Var message_kl_loss_t(Tape& tape, const DiagonalGaussian& z_st_posterior,
                             GaussianVar fused, KlDirection dir = KlDirection::StateToMessage) {
  GaussianVar sg{tape.constant(z_st_posterior.mean), tape.constant(z_st_posterior.variance)};
  Var per_dim = dir == KlDirection::StateToMessage ? gaussian_kl_t(sg, fused)
                                                   : gaussian_kl_t(fused, sg);
  return sum_all(per_dim);
}

}  // namespace cromac
