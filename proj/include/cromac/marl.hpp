#pragma once
#include <cmath>
#include <string>
#include <vector>

#include "cromac/attacks.hpp"
#include "cromac/bounds.hpp"
#include "cromac/latent.hpp"
#include "cromac/nn.hpp"
#include "cromac/replay.hpp"

namespace cromac {

// ---- agent network ----

// Shared across agents: observation embedder (affine+ReLU) -> GRU trajectory
// encoder -> Q head over (tau ++ z). The Q head stays a pure affine/ReLU
// chain so interval propagation over z is exact to implement.
struct AgentNetwork {
  AffineLayer embed;  // obs + agent id -> rnn hidden
  GruCell gru;
  Mlp q_head;  // (rnn hidden + z) -> hidden -> n_actions

  AgentNetwork() = default;
  AgentNetwork(std::size_t input_w, std::size_t rnn_w, std::size_t z_w, std::size_t head_hidden,
               std::size_t n_actions)
      : embed(rnn_w, input_w), gru(rnn_w, rnn_w), q_head({rnn_w + z_w, head_hidden, n_actions}) {}

  std::size_t rnn_width() const { return gru.hidden_width(); }
  std::size_t n_actions() const { return q_head.layers.back().out_width(); }

  void init(Rng& rng) {
    embed.init(rng);
    gru.init(rng);
    q_head.init(rng);
  }

  void collect(ParamList& out, const std::string& prefix) {
    embed.collect(out, prefix + ".embed");
    gru.collect(out, prefix + ".gru");
    q_head.collect(out, prefix + ".qhead");
  }
};

inline Var agent_q(Tape& tape, Var tau, Var z, AgentNetwork& net) {
  return net.q_head.forward(tape, concat_cols(tau, z));
}

inline Tensor agent_q(const Tensor& tau, const Tensor& z, AgentNetwork& net) {
  Tape t(false);
  return t.value(agent_q(t, t.constant(tau), t.constant(z), net));
}

// ---- mixers ----

enum class MixerKind { Vdn, Qmix };

// VDN sums the chosen-action values; QMIX mixes them monotonically with
// state-conditioned nonnegative weights (absolute-value transform on the
// hypernetwork outputs keeps dQ_tot/dQ_i >= 0).
struct Mixer {
  MixerKind kind = MixerKind::Vdn;
  std::size_t n_agents = 0;
  std::size_t embed_w = 0;
  AffineLayer hyper_w1;  // state -> n_agents * embed
  AffineLayer hyper_b1;  // state -> embed
  AffineLayer hyper_w2;  // state -> embed
  Mlp v_net;             // state -> embed -> 1

  Mixer() = default;
  Mixer(MixerKind k, std::size_t n, std::size_t state_w, std::size_t embed)
      : kind(k), n_agents(n), embed_w(embed) {
    if (kind == MixerKind::Qmix) {
      hyper_w1 = AffineLayer(n * embed, state_w);
      hyper_b1 = AffineLayer(embed, state_w);
      hyper_w2 = AffineLayer(embed, state_w);
      v_net = Mlp({state_w, embed, 1});
    }
  }

  void init(Rng& rng) {
    if (kind == MixerKind::Qmix) {
      hyper_w1.init(rng);
      hyper_b1.init(rng);
      hyper_w2.init(rng);
      v_net.init(rng);
    }
  }

  void collect(ParamList& out, const std::string& prefix) {
    if (kind == MixerKind::Qmix) {
      hyper_w1.collect(out, prefix + ".hw1");
      hyper_b1.collect(out, prefix + ".hb1");
      hyper_w2.collect(out, prefix + ".hw2");
      v_net.collect(out, prefix + ".v");
    }
  }
};

// per_agent_q: [B, n_agents], state: [B, state_w] -> [B, 1]
inline Var mix(Tape& tape, Var per_agent_q, Var state, Mixer& mixer) {
  const Tensor& q = tape.value(per_agent_q);
  if (q.cols() != mixer.n_agents) throw ContractError("mix: agent count mismatch");
  if (mixer.kind == MixerKind::Vdn) return row_sum(per_agent_q);
  Var w1 = abs_op(linear_forward(tape, state, mixer.hyper_w1));
  Var b1 = linear_forward(tape, state, mixer.hyper_b1);
  Var hidden = elu(add(mix_dot(per_agent_q, w1, mixer.embed_w), b1));
  Var w2 = abs_op(linear_forward(tape, state, mixer.hyper_w2));
  Var v = mixer.v_net.forward(tape, state);
  return add(row_dot(hidden, w2), v);
}

inline double mix(const std::vector<double>& per_agent_q, const Tensor& state, Mixer& mixer) {
  Tape t(false);
  Tensor q(1, per_agent_q.size());
  for (std::size_t i = 0; i < per_agent_q.size(); ++i) q.data[i] = per_agent_q[i];
  Tensor s(1, state.size());
  s.data = state.data;
  return t.value(mix(t, t.constant(q), t.constant(s), mixer))[0];
}

// ---- loss weights / total objective ----

struct LossWeights {
  double alpha1 = 0.0;  // state VAE
  double alpha2 = 0.0;  // message KL
  double alpha3 = 0.0;  // adversarial overlap
  long long t_r = 0;    // robust-phase start (env steps)
};

inline double total_loss(double ltd, double lpsi, double lphi, double ladv,
                         const LossWeights& w, long long t) {
  return ltd + w.alpha1 * lpsi + w.alpha2 * lphi + (t > w.t_r ? w.alpha3 * ladv : 0.0);
}

// ---- model bundle ----

enum class QInputMode { State, Message, AmeSubset };

struct CromacNets {
  AgentNetwork agent;
  Mixer mixer;
  StateVae vae;
  MessageEncoder menc;

  void collect(ParamList& out) {
    agent.collect(out, "agent");
    mixer.collect(out, "mixer");
    vae.collect(out, "vae");
    menc.collect(out, "menc");
  }

  ParamList params() {
    ParamList out;
    collect(out);
    return out;
  }
};

inline void target_update(CromacNets& nets, CromacNets& targets) {
  ParamList a, b;
  nets.collect(a);
  targets.collect(b);
  if (a.size() != b.size()) throw ContractError("target_update: architecture mismatch");
  copy_params(a, b);
}

// ---- adversarial overlap pieces ----

// sum_y max(0, Q(a)-Q(y)) * max(0, Qhi(y)-Qlo(a)); the y == a term is zero.
inline double adv_overlap_term(const Tensor& q, const Tensor& qlo, const Tensor& qhi,
                               std::size_t action) {
  if (action >= q.size()) throw ContractError("adv_overlap_term: bad action");
  double s = 0.0;
  for (std::size_t y = 0; y < q.size(); ++y) {
    const double qdiff = std::max(0.0, q[action] - q[y]);
    const double ovl = std::max(0.0, qhi[y] - qlo[action]);
    s += qdiff * ovl;
  }
  return s;
}

struct QBoundsT {
  Var lower;
  Var upper;
};

// Differentiable interval propagation of the Q head: tau exact, z inside the
// kappa*epsilon box. Mirrors q_value_bounds (the plain route) so the two can
// be cross-checked numerically.
inline QBoundsT q_bounds_t(Tape& tape, Var tau, Var z_point, double radius, Mlp& head) {
  const std::size_t t_cols = tape.value(tau).cols();
  const std::size_t z_cols = tape.value(z_point).cols();
  Var mu = concat_cols(tau, z_point);
  Tensor r0(tape.value(mu).shape);
  const std::size_t w = t_cols + z_cols;
  for (std::size_t r = 0; r < r0.rows(); ++r)
    for (std::size_t c = t_cols; c < w; ++c) r0.data[r * w + c] = radius;
  Var res = tape.constant(r0);
  for (std::size_t i = 0; i < head.layers.size(); ++i) {
    Var Wv = tape.param(head.layers[i].W);
    Var bv = tape.param(head.layers[i].b);
    mu = linear(mu, Wv, bv);
    res = linear_abs(res, Wv);
    if (i + 1 < head.layers.size()) {
      Var lo = relu(sub(mu, res));
      Var hi = relu(add(mu, res));
      mu = scale(add(lo, hi), 0.5);
      res = scale(sub(hi, lo), 0.5);
    }
  }
  return {sub(mu, res), add(mu, res)};
}

// ---- batched losses over an episode batch ----

struct LossOptions {
  double gamma = 0.99;
  double latent_radius = 0.0;  // kappa * epsilon
  bool robust_active = false;  // indicator(t > T_r)
  bool aux_losses = true;      // VAE / message-KL / adversarial terms built at all
  bool double_q = false;
  QInputMode q_input = QInputMode::State;
  KlDirection kl_dir = KlDirection::StateToMessage;
  std::size_t ame_k = 1;  // subset size for the ablated-ensemble baseline
};

struct LossBundle {
  Var td;
  Var vae;
  Var kl;
  Var adv;
};

namespace detail {

// GRU unroll over the padded batch; returns tau for t = 0..max_len.
inline std::vector<Var> unroll(Tape& tape, const EpisodeBatch& batch, AgentNetwork& net) {
  std::vector<Var> tau;
  Var h = tape.constant(Tensor(batch.size() * batch.n_agents, net.rnn_width()));
  for (std::size_t t = 0; t <= batch.max_len; ++t) {
    Var x = tape.constant(batch.inputs_at(t));
    Var e = relu(linear_forward(tape, x, net.embed));
    h = gru_step(tape, e, h, net.gru);
    tau.push_back(h);
  }
  return tau;
}

inline Tensor row_max(const Tensor& x) {
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double m = x.at(r, 0);
    for (std::size_t c = 1; c < x.cols(); ++c) m = std::max(m, x.at(r, c));
    out.data[r] = m;
  }
  return out;
}

}  // namespace detail

// Builds the four loss terms on one tape with the GRU unrolls shared. The
// target side runs under FreezeGuard (no gradients). Before the robust phase
// the adversarial term is built on detached inputs and frozen parameters, so
// its metric is still reported while its gradient stays exactly zero.
// noise_rng drives the VAE reparameterization draws (one block per timestep,
// fixed order, so a (config, seed) pair fully determines the run).
inline LossBundle build_losses(Tape& tape, const EpisodeBatch& batch, CromacNets& nets,
                               CromacNets& targets, const LossOptions& opt, Rng& noise_rng) {
  const std::size_t B = batch.size(), N = batch.n_agents, L = batch.max_len;
  const std::size_t A = nets.agent.n_actions();
  const std::size_t Z = nets.vae.z_width();
  const double total_mask = batch.total_mask();
  if (total_mask <= 0.0) throw ContractError("build_losses: empty batch");

  std::vector<Var> tau = detail::unroll(tape, batch, nets.agent);
  std::vector<Var> tau_tgt;
  {
    FreezeGuard fg(tape);
    tau_tgt = detail::unroll(tape, batch, targets.agent);
  }

  Tensor ones_bz(B, Z);
  std::fill(ones_bz.data.begin(), ones_bz.data.end(), 1.0);
  Var prior_mean = tape.constant(Tensor(B, Z));
  Var prior_var = tape.constant(ones_bz);

  Var td_acc = tape.constant(Tensor::zeros(1));
  Var vae_acc = tape.constant(Tensor::zeros(1));
  Var kl_acc = tape.constant(Tensor::zeros(1));
  Var adv_acc = tape.constant(Tensor::zeros(1));

  // Fresh random k-subsets of the other agents' channels, one per (episode,
  // receiver) row; used only by the ablated-ensemble baseline.
  auto draw_subsets = [&]() {
    std::vector<std::vector<std::size_t>> sel(B * N);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < N; ++i) {
        std::vector<std::size_t> others;
        for (std::size_t j = 0; j < N; ++j)
          if (j != i) others.push_back(b * N + j);
        if (others.empty()) {
          sel[b * N + i] = {b * N + i};
          continue;
        }
        const std::size_t k = std::min(opt.ame_k, others.size());
        for (std::size_t p : ame_subset_sample(others.size(), k, noise_rng))
          sel[b * N + i].push_back(others[p]);
      }
    return sel;
  };

  // z fed to the Q head, [B*N, Z]; `frozen` selects the target-network copy.
  auto make_z = [&](std::size_t t, CromacNets& which, std::vector<Var>& tau_src,
                    GaussianVar* post_out) -> Var {
    if (opt.q_input == QInputMode::State) {
      GaussianVar post = which.vae.encode_t(tape, tape.constant(batch.state_at(t)));
      if (post_out != nullptr) *post_out = post;
      return repeat_rows(post.mean, N);
    }
    if (opt.q_input == QInputMode::Message) {
      // fused message mean, used as a detached input feature
      FreezeGuard fg(tape);
      Var msgs = tape.constant(tape.value(tau_src[t]));
      GaussianVar experts = which.menc.encode_t(tape, msgs);
      GaussianVar fused = poe_fuse_rows(experts, N);
      return repeat_rows(tape.constant(tape.value(fused.mean)), N);
    }
    Var subset_mean = gather_rows_mean(tau_src[t], draw_subsets());
    return linear_forward(tape, subset_mean, which.menc.mean_head);
  };

  for (std::size_t t = 0; t < L; ++t) {
    Var state = tape.constant(batch.state_at(t));
    Tensor mask_col = batch.mask_at(t);  // [B,1]
    Var mask = tape.constant(mask_col);
    Tensor mask_rows(B * N, 1);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < N; ++i) mask_rows.data[b * N + i] = mask_col.data[b];

    GaussianVar post;  // state posterior (Q input and/or VAE terms)
    bool have_post = false;
    Var z_rows;
    if (opt.q_input == QInputMode::State) {
      z_rows = make_z(t, nets, tau, &post);
      have_post = true;
    } else {
      z_rows = make_z(t, nets, tau, nullptr);
    }
    if (opt.aux_losses && !have_post) {
      post = nets.vae.encode_t(tape, state);
      have_post = true;
    }

    // temporal-difference term
    Var q_all = agent_q(tape, tau[t], z_rows, nets.agent);  // [B*N, A]
    Var chosen = gather_cols(q_all, batch.actions_at(t));
    Var qtot = mix(tape, reshape(chosen, {B, N}), state, nets.mixer);
    Tensor target_col(B, 1);
    {
      FreezeGuard fg(tape);
      Var next_state = tape.constant(batch.state_at(t + 1));
      Var ztgt = make_z(t + 1, targets, tau_tgt, nullptr);
      Var qn = agent_q(tape, tau_tgt[t + 1], ztgt, targets.agent);
      Tensor best(B * N, 1);
      const Tensor qnv_all = tape.value(qn);  // copy; nodes may follow
      if (opt.double_q) {
        // greedy actions from the online network, values from the target
        Var z_online = make_z(t + 1, nets, tau, nullptr);
        Var q_online = agent_q(tape, stop_grad(tau[t + 1]), stop_grad(z_online), nets.agent);
        const Tensor& qov = tape.value(q_online);
        for (std::size_t r = 0; r < B * N; ++r)
          best.data[r] = qnv_all.at(r, argmax_row(qov, r));
      } else {
        best = detail::row_max(qnv_all);
      }
      Var qtot_next = mix(tape, reshape(tape.constant(best), {B, N}), next_state, targets.mixer);
      const Tensor& qnv = tape.value(qtot_next);
      Tensor rew = batch.rewards_at(t);
      Tensor cont = batch.continuing_at(t);
      for (std::size_t b = 0; b < B; ++b)
        target_col.data[b] = rew.data[b] + opt.gamma * cont.data[b] * qnv.data[b];
    }
    Var err = mul(sub(qtot, tape.constant(target_col)), mask);
    td_acc = add(td_acc, sum_all(square(err)));

    if (!opt.aux_losses) continue;

    // state VAE term: reconstruction NLL (unit observation variance) + KL to prior
    {
      Tensor noise(B, Z);
      for (double& v : noise.data) v = noise_rng.normal();
      Var z_sample = add(post.mean, mul(sqrt_op(post.variance), tape.constant(noise)));
      Var recon = nets.vae.decode_t(tape, z_sample);
      Var nll = scale(row_sum(square(sub(state, recon))), 0.5);  // [B,1]
      Var kl_prior = row_sum(gaussian_kl_t(post, GaussianVar{prior_mean, prior_var}));
      vae_acc = add(vae_acc, sum_all(mul(add(nll, kl_prior), mask)));
    }

    // message-encoder KL: sg on the state side, messages detached
    {
      Var msgs = tape.constant(tape.value(tau[t]));  // tau_j is the message content
      GaussianVar experts = nets.menc.encode_t(tape, msgs);
      GaussianVar fused = poe_fuse_rows(experts, N);
      GaussianVar sg{tape.constant(tape.value(post.mean)),
                     tape.constant(tape.value(post.variance))};
      Var per_dim = opt.kl_dir == KlDirection::StateToMessage ? gaussian_kl_t(sg, fused)
                                                              : gaussian_kl_t(fused, sg);
      kl_acc = add(kl_acc, sum_all(mul(row_sum(per_dim), mask)));
    }

    // adversarial overlap term
    {
      Var mask_r = tape.constant(mask_rows);
      auto build_adv = [&](Var tau_in, Var z_in) -> Var {
        QBoundsT qb = q_bounds_t(tape, tau_in, z_in, opt.latent_radius, nets.agent.q_head);
        Var q_adv = agent_q(tape, tau_in, z_in, nets.agent);
        Var qa = gather_cols(q_adv, batch.actions_at(t));
        Var qlo_a = gather_cols(qb.lower, batch.actions_at(t));
        Var qdiff = relu(sub(broadcast_cols(qa, A), q_adv));
        Var ovl = relu(sub(qb.upper, broadcast_cols(qlo_a, A)));
        Var per_row = row_sum(mul(qdiff, ovl));
        return sum_all(mul(per_row, mask_r));
      };
      if (opt.robust_active) {
        adv_acc = add(adv_acc, build_adv(tau[t], stop_grad(z_rows)));
      } else {
        FreezeGuard fg(tape);
        adv_acc = add(adv_acc, build_adv(stop_grad(tau[t]), stop_grad(z_rows)));
      }
    }
  }

  const double inv_mask = 1.0 / total_mask;
  return LossBundle{scale(td_acc, inv_mask), scale(vae_acc, inv_mask), scale(kl_acc, inv_mask),
                    scale(adv_acc, inv_mask)};
}

// Spec-surface wrappers evaluating a single term on a fresh tape.

inline double td_loss(const EpisodeBatch& batch, CromacNets& nets, CromacNets& targets,
                      double gamma) {
  Tape tape(true);
  LossOptions opt;
  opt.gamma = gamma;
  Rng rng(0);
  LossBundle losses = build_losses(tape, batch, nets, targets, opt, rng);
  return tape.value(losses.td)[0];
}

inline double adv_loss(const EpisodeBatch& batch, CromacNets& nets, CromacNets& targets,
                       const PerturbationBudget& budget) {
  Tape tape(true);
  LossOptions opt;
  opt.latent_radius = budget.latent_radius();
  opt.robust_active = true;
  Rng rng(0);
  LossBundle losses = build_losses(tape, batch, nets, targets, opt, rng);
  return tape.value(losses.adv)[0];
}

}  // namespace cromac
