#pragma once
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "cromac/bounds.hpp"
#include "cromac/config.hpp"
#include "cromac/marl.hpp"
#include "cromac/trainer.hpp"

namespace cromac {

struct SuiteResult {
  std::string name;
  bool pass = true;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double seconds = 0.0;
  std::string detail;

  void fail(const std::string& msg) {
    pass = false;
    ++failures;
    if (detail.size() < 400) detail += (detail.empty() ? "" : "; ") + msg;
  }
};

namespace verify_detail {

inline bool close(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

// two-expert closed form, folded sequentially: the independent route against
// the batch fusion formula
inline DiagonalGaussian fuse_pairwise(const std::vector<DiagonalGaussian>& experts) {
  DiagonalGaussian acc = experts[0];
  for (std::size_t j = 1; j < experts.size(); ++j) {
    Tensor mean(acc.mean.shape), var(acc.mean.shape);
    for (std::size_t i = 0; i < acc.width(); ++i) {
      const double va = acc.variance[i], vb = experts[j].variance[i];
      var[i] = va * vb / (va + vb);
      mean[i] = (acc.mean[i] * vb + experts[j].mean[i] * va) / (va + vb);
    }
    acc = DiagonalGaussian(std::move(mean), std::move(var));
  }
  return acc;
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

}  // namespace verify_detail

// Product-of-experts fusion against the closed form and sequential pairwise
// folding, relative error 1e-10.
inline SuiteResult verify_poe(std::size_t cases, std::uint64_t seed) {
  verify_detail::Timer timer;
  SuiteResult res;
  res.name = "poe";
  Rng rng(seed);
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = 1 + rng.uniform_int(8);
    const std::size_t dim = 1 + rng.uniform_int(32);
    std::vector<DiagonalGaussian> experts;
    for (std::size_t j = 0; j < n; ++j) {
      Tensor mean = Tensor::zeros(dim), var = Tensor::zeros(dim);
      for (std::size_t i = 0; i < dim; ++i) {
        mean[i] = rng.uniform(-3.0, 3.0);
        var[i] = rng.uniform(0.05, 4.0);
      }
      experts.emplace_back(std::move(mean), std::move(var));
    }
    DiagonalGaussian fused = poe_fuse(experts);
    DiagonalGaussian folded = verify_detail::fuse_pairwise(experts);
    for (std::size_t i = 0; i < dim; ++i) {
      if (!verify_detail::close(fused.mean[i], folded.mean[i], 1e-10) ||
          !verify_detail::close(fused.variance[i], folded.variance[i], 1e-10)) {
        res.fail("pairwise folding mismatch at case " + std::to_string(c));
        break;
      }
      long double prec = 0.0L;
      for (const auto& e : experts) prec += 1.0L / static_cast<long double>(e.variance[i]);
      if (!verify_detail::close(1.0 / fused.variance[i], static_cast<double>(prec), 1e-10)) {
        res.fail("precision additivity broken at case " + std::to_string(c));
        break;
      }
    }
    ++res.cases;
  }
  res.seconds = timer.seconds();
  return res;
}

// Interval propagation soundness: sampled in-ball inputs stay inside the
// propagated boxes for affine/ReLU chains and for the Q-head bounds.
inline SuiteResult verify_ibp(std::size_t cases, std::uint64_t seed) {
  verify_detail::Timer timer;
  SuiteResult res;
  res.name = "ibp";
  Rng rng(seed);
  constexpr double kSlack = 1e-9;
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t depth = 1 + rng.uniform_int(3);
    const std::size_t in_w = 1 + rng.uniform_int(8);
    std::vector<std::size_t> widths{in_w};
    for (std::size_t d = 0; d < depth; ++d) widths.push_back(1 + rng.uniform_int(8));
    Mlp chain(widths);
    for (auto& l : chain.layers) {
      l.W.fill_uniform(rng, -1.0, 1.0);
      l.b.fill_uniform(rng, -0.5, 0.5);
    }
    Tensor x = Tensor::zeros(in_w);
    for (auto& v : x.data) v = rng.uniform(-2.0, 2.0);
    const double eps = rng.uniform(0.0, 0.5);

    IntervalBounds cur = epsilon_ball(x, eps);
    for (std::size_t i = 0; i < chain.layers.size(); ++i) {
      cur = ibp_affine(cur, chain.layers[i]);
      if (i + 1 < chain.layers.size())
        cur = ibp_monotonic(cur, [](double v) { return v > 0.0 ? v : 0.0; });
    }
    // monotonicity in epsilon: the doubled ball must dominate
    IntervalBounds wide = epsilon_ball(x, 2.0 * eps);
    for (std::size_t i = 0; i < chain.layers.size(); ++i) {
      wide = ibp_affine(wide, chain.layers[i]);
      if (i + 1 < chain.layers.size())
        wide = ibp_monotonic(wide, [](double v) { return v > 0.0 ? v : 0.0; });
    }
    for (std::size_t i = 0; i < cur.width(); ++i)
      if (wide.lower[i] > cur.lower[i] + kSlack || wide.upper[i] < cur.upper[i] - kSlack) {
        res.fail("epsilon monotonicity broken at case " + std::to_string(c));
        break;
      }
    for (int s = 0; s < 16 && res.pass; ++s) {
      Tensor probe = x;
      for (auto& v : probe.data) v += rng.uniform(-eps, eps);
      Tape t(false);
      Var out = t.constant(probe);
      for (std::size_t i = 0; i < chain.layers.size(); ++i) {
        out = linear_forward(t, out, chain.layers[i]);
        if (i + 1 < chain.layers.size()) out = relu(out);
      }
      if (!cur.contains(t.value(out), kSlack)) {
        res.fail("containment violated at case " + std::to_string(c));
        break;
      }
    }

    // Q-head variant: tau exact, z perturbed inside the kappa*eps box
    const std::size_t tw = 1 + rng.uniform_int(4), zw = 1 + rng.uniform_int(4);
    Mlp head({tw + zw, 1 + rng.uniform_int(6), 1 + rng.uniform_int(5)});
    for (auto& l : head.layers) {
      l.W.fill_uniform(rng, -1.0, 1.0);
      l.b.fill_uniform(rng, -0.5, 0.5);
    }
    Tensor tau = Tensor::zeros(tw), z = Tensor::zeros(zw);
    for (auto& v : tau.data) v = rng.uniform(-1.0, 1.0);
    for (auto& v : z.data) v = rng.uniform(-1.0, 1.0);
    PerturbationBudget budget(rng.uniform(0.0, 0.4), 1.0 + rng.uniform(0.0, 4.0));
    IntervalBounds qb = q_value_bounds(tau, z, budget, head);
    for (int s = 0; s < 16; ++s) {
      Tensor zp = z;
      for (auto& v : zp.data) v += rng.uniform(-budget.latent_radius(), budget.latent_radius());
      Tensor q = qhead_forward(tau, zp, head);
      if (!qb.contains(q, kSlack)) {
        res.fail("q bounds violated at case " + std::to_string(c));
        break;
      }
    }
    ++res.cases;
  }
  res.seconds = timer.seconds();
  return res;
}

// Harmonic-mean certification: exact fusions inside the envelope, envelope
// width bounded by the integration error, linear epsilon scaling.
inline SuiteResult verify_bounds(std::size_t cases, std::uint64_t seed) {
  verify_detail::Timer timer;
  SuiteResult res;
  res.name = "bounds";
  Rng rng(seed);
  constexpr double kSlack = 1e-9;
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = 2 + rng.uniform_int(5);
    const std::size_t msg_w = 2 + rng.uniform_int(6);
    const std::size_t z_w = 1 + rng.uniform_int(6);
    MessageEncoder enc(msg_w, z_w);
    enc.mean_head.W.fill_uniform(rng, -0.3, 0.3);
    enc.mean_head.b.fill_uniform(rng, -0.3, 0.3);
    enc.var_head.W.fill_uniform(rng, -0.3, 0.3);
    enc.var_head.b.fill_uniform(rng, -0.3, 0.3);
    std::vector<Tensor> messages;
    for (std::size_t j = 0; j < n; ++j) {
      Tensor m = Tensor::zeros(msg_w);
      for (auto& v : m.data) v = rng.uniform(-1.0, 1.0);
      messages.push_back(std::move(m));
    }
    const double eps = rng.uniform(0.01, 0.5);
    EncoderBounds eb = encoder_bounds(messages, eps, enc);
    PoeEnvelope env = poe_harmonic_bounds(eb.variance, eb.mean);
    const double int_err = integration_error_bound(eb.variance);

    // sampled in-ball fusions stay inside the envelope
    for (int s = 0; s < 8; ++s) {
      std::vector<DiagonalGaussian> experts;
      for (const auto& m : messages) {
        Tensor p = m;
        for (auto& v : p.data) v += rng.uniform(-eps, eps);
        experts.push_back(enc.encode(p));
      }
      DiagonalGaussian fused = poe_fuse(experts);
      if (!env.variance.contains(fused.variance, kSlack) ||
          !env.mean.contains(fused.mean, kSlack)) {
        res.fail("fusion escaped the envelope at case " + std::to_string(c));
        break;
      }
    }

    // monotone extremes of the fused variance vs the integration error cap
    for (std::size_t d = 0; d < z_w; ++d) {
      double prec_hi = 0.0, prec_lo = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        prec_hi += 1.0 / eb.variance[j].upper[d];
        prec_lo += 1.0 / eb.variance[j].lower[d];
      }
      const double zbar = 1.0 / prec_hi, zlow = 1.0 / prec_lo;
      if (zbar - zlow > int_err + kSlack) {
        res.fail("integration error cap violated at case " + std::to_string(c));
        break;
      }
    }

    // linear epsilon scaling of the affine-head cap: rows normalized to one
    // L1 norm pin the arg-max row for every epsilon, making the cap exactly
    // affine (the monotone variance map is omitted here, as in the cap's
    // derivation)
    AffineLayer lin_head = enc.var_head;
    for (std::size_t r = 0; r < z_w; ++r) {
      double s = 0.0;
      for (std::size_t cc = 0; cc < msg_w; ++cc) s += std::abs(lin_head.W.at(r, cc));
      if (s <= 0.0) continue;
      for (std::size_t cc = 0; cc < msg_w; ++cc) lin_head.W.at(r, cc) *= 0.25 / s;
    }
    auto cap_at = [&](double e) {
      std::vector<IntervalBounds> zb;
      for (const auto& m : messages) zb.push_back(ibp_affine(epsilon_ball(m, e), lin_head));
      return integration_error_bound(zb);
    };
    const double b1 = cap_at(eps), b2 = cap_at(2.0 * eps), b3 = cap_at(3.0 * eps);
    if (std::abs((b3 - b2) - (b2 - b1)) > 1e-9)
      res.fail("epsilon scaling not linear at case " + std::to_string(c));
    ++res.cases;
  }
  res.seconds = timer.seconds();
  return res;
}

namespace verify_detail {

// tiny synthetic batch for full-loss gradient checks
inline EpisodeBatch tiny_batch(std::size_t n_agents, std::size_t obs_w, std::size_t state_w,
                               std::size_t n_actions, Rng& rng) {
  std::vector<Episode> eps;
  for (std::size_t b = 0; b < 2; ++b) {
    Episode e;
    const std::size_t len = 2 + b;
    for (std::size_t t = 0; t <= len; ++t) {
      std::vector<Tensor> obs;
      for (std::size_t i = 0; i < n_agents; ++i) {
        Tensor o = Tensor::zeros(obs_w);
        for (auto& v : o.data) v = rng.uniform(-1.0, 1.0);
        obs.push_back(std::move(o));
      }
      e.obs.push_back(std::move(obs));
      Tensor s = Tensor::zeros(state_w);
      for (auto& v : s.data) v = rng.uniform(-1.0, 1.0);
      e.states.push_back(std::move(s));
    }
    for (std::size_t t = 0; t < len; ++t) {
      std::vector<int> acts;
      for (std::size_t i = 0; i < n_agents; ++i)
        acts.push_back(static_cast<int>(rng.uniform_int(n_actions)));
      e.actions.push_back(std::move(acts));
      e.rewards.push_back(rng.uniform(-1.0, 1.0));
    }
    eps.push_back(std::move(e));
  }
  return EpisodeBatch::assemble(std::move(eps), n_actions);
}

}  // namespace verify_detail

// Gradient fidelity: every layer type and every loss term against central
// finite differences; stop-gradient and robust-phase gating exactness.
inline SuiteResult verify_grad(std::size_t cases, std::uint64_t seed) {
  verify_detail::Timer timer;
  SuiteResult res;
  res.name = "grad";
  Rng rng(seed);
  constexpr double kTol = 1e-4;

  // layer sweep
  for (std::size_t c = 0; c < cases; ++c) {
    const int kind = static_cast<int>(c % 4);
    if (kind == 0) {  // affine
      AffineLayer l(1 + rng.uniform_int(5), 1 + rng.uniform_int(5));
      l.init(rng);
      Tensor x(2, l.in_width());
      x.fill_uniform(rng, -1.0, 1.0);
      ParamList params;
      l.collect(params, "l");
      auto f = [&](bool with_grad) {
        Tape t(with_grad);
        Var out = sum_all(square(linear_forward(t, t.constant(x), l)));
        const double v = t.value(out)[0];
        if (with_grad) t.backward(out);
        return v;
      };
      if (finite_diff_check(f, params, 1e-6) > kTol) res.fail("affine grad " + std::to_string(c));
    } else if (kind == 1) {  // GRU, 3-step unroll
      GruCell cell(1 + rng.uniform_int(4), 1 + rng.uniform_int(4));
      cell.init(rng);
      std::vector<Tensor> xs;
      for (int s = 0; s < 3; ++s) {
        Tensor x(2, cell.in_width());
        x.fill_uniform(rng, -1.0, 1.0);
        xs.push_back(std::move(x));
      }
      ParamList params;
      cell.collect(params, "gru");
      auto f = [&](bool with_grad) {
        Tape t(with_grad);
        Var h = t.constant(Tensor(2, cell.hidden_width()));
        for (const auto& x : xs) h = gru_step(t, t.constant(x), h, cell);
        Var out = sum_all(square(h));
        const double v = t.value(out)[0];
        if (with_grad) t.backward(out);
        return v;
      };
      if (finite_diff_check(f, params, 1e-6) > kTol) res.fail("gru grad " + std::to_string(c));
    } else if (kind == 2) {  // two-headed encoder with variance map + fusion
      MessageEncoder enc(1 + rng.uniform_int(4), 1 + rng.uniform_int(4));
      Rng init_rng(seed + c);
      enc.init(init_rng, 0.5);
      Tensor msgs(4, enc.in_width());
      msgs.fill_uniform(rng, -1.0, 1.0);
      ParamList params;
      enc.collect(params, "enc");
      auto f = [&](bool with_grad) {
        Tape t(with_grad);
        GaussianVar experts = enc.encode_t(t, t.constant(msgs));
        GaussianVar fused = poe_fuse_rows(experts, 2);
        Var out = sum_all(add(square(fused.mean), log_op(fused.variance)));
        const double v = t.value(out)[0];
        if (with_grad) t.backward(out);
        return v;
      };
      if (finite_diff_check(f, params, 1e-6) > kTol)
        res.fail("encoder/poe grad " + std::to_string(c));
    } else {  // monotone mixer
      const std::size_t n = 2 + rng.uniform_int(3);
      Mixer mx(MixerKind::Qmix, n, 3, 4);
      mx.init(rng);
      Tensor q(2, n), s(2, 3);
      q.fill_uniform(rng, -1.0, 1.0);
      s.fill_uniform(rng, -1.0, 1.0);
      ParamList params;
      mx.collect(params, "mixer");
      auto f = [&](bool with_grad) {
        Tape t(with_grad);
        Var out = sum_all(square(mix(t, t.constant(q), t.constant(s), mx)));
        const double v = t.value(out)[0];
        if (with_grad) t.backward(out);
        return v;
      };
      if (finite_diff_check(f, params, 1e-6) > kTol) res.fail("mixer grad " + std::to_string(c));
    }
    ++res.cases;
  }

  // full losses on a tiny model
  {
    RunConfig cfg = preset("hallway-small");
    cfg.rnn_hidden_dim = 4;
    cfg.z_dim = 3;
    cfg.vae_hidden_dim = 5;
    cfg.qhead_hidden_dim = 4;
    cfg.mixing_embed_dim = 4;
    EnvSpec spec;
    spec.n_agents = 2;
    spec.n_actions = 3;
    spec.obs_width = 3;
    spec.state_width = 4;
    Rng init_rng(seed + 999);
    CromacNets nets = build_nets(cfg, spec, init_rng);
    CromacNets targets = nets;
    Rng batch_rng(seed + 1234);
    EpisodeBatch batch =
        verify_detail::tiny_batch(spec.n_agents, spec.obs_width, spec.state_width,
                                  spec.n_actions, batch_rng);
    ParamList params = nets.params();
    LossWeights w{0.3, 0.2, 0.5, 0};

    // Each loss is finite-difference checked against the parameters that
    // receive its gradients; the gradient-stopped inputs (detached messages,
    // detached z) make a whole-parameter check meaningless by construction,
    // and their exact-zero contracts are asserted separately below.
    auto component = [&](Tape& t, int which) {
      LossOptions opt;
      opt.gamma = 0.9;
      opt.latent_radius = 0.25;
      opt.robust_active = true;
      Rng noise(42);  // fixed so finite differences see a deterministic objective
      LossBundle l = build_losses(t, batch, nets, targets, opt, noise);
      return which == 0   ? l.td
             : which == 1 ? l.vae
             : which == 2 ? l.kl
                          : l.adv;
    };
    auto check_component = [&](const char* name, int which, const ParamList& subset) {
      auto f = [&](bool with_grad) {
        Tape t(with_grad);
        Var obj = component(t, which);
        const double v = t.value(obj)[0];
        if (with_grad) t.backward(obj);
        return v;
      };
      if (finite_diff_check(f, subset, 1e-6) > kTol) res.fail(std::string("loss grad: ") + name);
      ++res.cases;
    };
    ParamList menc_params, agent_params;
    nets.menc.collect(menc_params, "menc");
    nets.agent.collect(agent_params, "agent");
    check_component("td", 0, params);
    check_component("vae", 1, params);
    check_component("message_kl", 2, menc_params);
    check_component("adv", 3, agent_params);

    // Eq.-level additivity: the gradient of the weighted total equals the
    // weighted sum of the component gradients.
    {
      auto grads_of = [&](int which, double alpha) {
        Tape t(true);
        Var obj = which < 0 ? [&] {
          LossOptions opt;
          opt.gamma = 0.9;
          opt.latent_radius = 0.25;
          opt.robust_active = true;
          Rng noise(42);
          LossBundle l = build_losses(t, batch, nets, targets, opt, noise);
          return add(add(l.td, scale(l.vae, w.alpha1)),
                     add(scale(l.kl, w.alpha2), scale(l.adv, w.alpha3)));
        }()
                            : component(t, which);
        zero_grads(params);
        t.backward(obj);
        std::vector<double> flat;
        for (const auto& p : params)
          for (double g : p.tensor->grad) flat.push_back(alpha * g);
        return flat;
      };
      std::vector<double> total = grads_of(-1, 1.0);
      std::vector<double> sum = grads_of(0, 1.0);
      auto acc = [&](const std::vector<double>& g) {
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += g[i];
      };
      acc(grads_of(1, w.alpha1));
      acc(grads_of(2, w.alpha2));
      acc(grads_of(3, w.alpha3));
      for (std::size_t i = 0; i < sum.size(); ++i)
        if (std::abs(total[i] - sum[i]) > 1e-10 * std::max(1.0, std::abs(sum[i]))) {
          res.fail("total-loss gradient does not decompose");
          break;
        }
      ++res.cases;
    }

    // stop-gradient: the message KL must leave the whole state VAE untouched
    {
      Tape t(true);
      LossOptions opt;
      opt.robust_active = true;
      opt.latent_radius = 0.25;
      Rng noise(42);
      LossBundle l = build_losses(t, batch, nets, targets, opt, noise);
      ParamList vae_params;
      nets.vae.collect(vae_params, "vae");
      zero_grads(params);
      t.backward(l.kl);
      for (const auto& p : vae_params)
        for (double g : p.tensor->grad)
          if (g != 0.0) res.fail("stop-gradient leaked into the state encoder");
      ++res.cases;
    }

    // gating: before the robust phase the adversarial term contributes no gradient
    {
      Tape t(true);
      LossOptions opt;
      opt.robust_active = false;
      opt.latent_radius = 0.25;
      Rng noise(42);
      LossBundle l = build_losses(t, batch, nets, targets, opt, noise);
      zero_grads(params);
      t.backward(l.adv);
      for (const auto& p : params)
        for (double g : p.tensor->grad)
          if (g != 0.0) res.fail("adversarial gradient leaked before the robust phase");
      ++res.cases;
    }
  }

  res.seconds = timer.seconds();
  return res;
}

inline SuiteResult run_verify_suite(const std::string& suite, std::size_t cases,
                                    std::uint64_t seed) {
  if (suite == "poe") return verify_poe(cases, seed);
  if (suite == "ibp") return verify_ibp(cases, seed);
  if (suite == "bounds") return verify_bounds(cases, seed);
  if (suite == "grad") return verify_grad(cases, seed);
  throw ContractError("unknown verify suite: " + suite);
}

}  // namespace cromac
