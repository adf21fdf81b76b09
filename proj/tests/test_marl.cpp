#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "cromac/marl.hpp"
#include "cromac/trainer.hpp"

using namespace cromac;

namespace {

void zero_params(ParamList& params) {
  for (auto& p : params) std::fill(p.tensor->data.begin(), p.tensor->data.end(), 0.0);
}

EpisodeBatch one_episode_batch(std::size_t n_agents, std::size_t obs_w, std::size_t state_w,
                               const std::vector<double>& rewards,
                               const std::vector<std::vector<int>>& actions) {
  Episode e;
  const std::size_t len = rewards.size();
  for (std::size_t t = 0; t <= len; ++t) {
    std::vector<Tensor> obs(n_agents, Tensor::zeros(obs_w));
    e.obs.push_back(obs);
    e.states.push_back(Tensor::zeros(state_w));
  }
  e.actions = actions;
  e.rewards = rewards;
  return EpisodeBatch::assemble({e}, 3);
}

}  // namespace

TEST_CASE("agent_q zeroed head returns the output bias") {
  AgentNetwork net(4, 3, 2, 4, 3);
  ParamList params;
  net.collect(params, "agent");
  zero_params(params);
  net.q_head.layers.back().b = Tensor::vec({0.4, -0.2, 1.0});
  Tensor q = agent_q(Tensor::zeros(3), Tensor::vec({0.7, -0.7}), net);
  CHECK(q[0] == Catch::Approx(0.4));
  CHECK(q[1] == Catch::Approx(-0.2));
  CHECK(q[2] == Catch::Approx(1.0));
}

TEST_CASE("single affine head hand evaluation") {
  Mlp head({2, 2});
  head.layers[0].W = Tensor::mat({{0, 1}, {0, -1}});  // tau column ignored
  head.layers[0].b = Tensor::vec({0, 0});
  Tensor q = qhead_forward(Tensor::vec({9.0}), Tensor::vec({0.5}), head);
  CHECK(q[0] == Catch::Approx(0.5));
  CHECK(q[1] == Catch::Approx(-0.5));
}

TEST_CASE("parameter sharing: identical inputs give identical rows") {
  Rng rng(3);
  AgentNetwork net(5, 4, 3, 4, 4);
  net.init(rng);
  Tensor tau(3, 4), z(3, 3);
  for (int c = 0; c < 4; ++c) tau.at(0, c) = tau.at(1, c) = tau.at(2, c) = rng.uniform(-1, 1);
  for (int c = 0; c < 3; ++c) z.at(0, c) = z.at(1, c) = z.at(2, c) = rng.uniform(-1, 1);
  Tape t(false);
  const Tensor& q = t.value(agent_q(t, t.constant(tau), t.constant(z), net));
  for (int a = 0; a < 4; ++a) {
    CHECK(q.at(0, a) == q.at(1, a));
    CHECK(q.at(1, a) == q.at(2, a));
  }
}

TEST_CASE("vdn mix sums the agent values") {
  Mixer vdn(MixerKind::Vdn, 3, 4, 8);
  CHECK(mix({1.0, 2.0, 3.0}, Tensor::zeros(4), vdn) == Catch::Approx(6.0));
  CHECK_THROWS_AS(mix({1.0, 2.0}, Tensor::zeros(4), vdn), ContractError);
}

TEST_CASE("qmix with zeroed hypernetworks returns the value-head bias") {
  Mixer qmix(MixerKind::Qmix, 3, 4, 8);
  ParamList params;
  qmix.collect(params, "mixer");
  zero_params(params);
  qmix.v_net.layers.back().b = Tensor::vec({0.77});
  CHECK(mix({5.0, -2.0, 9.0}, Tensor::zeros(4), qmix) == Catch::Approx(0.77));
}

TEST_CASE("qmix is monotone in every agent value") {
  Rng rng(17);
  Mixer qmix(MixerKind::Qmix, 4, 6, 8);
  qmix.init(rng);
  for (int c = 0; c < 100; ++c) {
    Tensor state = Tensor::zeros(6);
    state.fill_uniform(rng, -1, 1);
    std::vector<double> q(4);
    for (auto& v : q) v = rng.uniform(-2, 2);
    const double base = mix(q, state, qmix);
    for (int i = 0; i < 4; ++i) {
      std::vector<double> up = q;
      up[i] += 1e-4;
      CHECK(mix(up, state, qmix) - base >= -1e-9);
    }
  }
}

TEST_CASE("td_loss on hand-built batches") {
  // two agents, vdn, every network zeroed -> Q_tot = 0 everywhere
  RunConfig cfg = preset("hallway-small");
  cfg.rnn_hidden_dim = 3;
  cfg.z_dim = 2;
  cfg.vae_hidden_dim = 3;
  cfg.qhead_hidden_dim = 3;
  cfg.mixer = MixerKind::Vdn;
  EnvSpec spec;
  spec.n_agents = 2;
  spec.n_actions = 3;
  spec.obs_width = 3;
  spec.state_width = 4;
  Rng rng(0);
  CromacNets nets = build_nets(cfg, spec, rng);
  ParamList params = nets.params();
  zero_params(params);
  CromacNets targets = nets;

  // terminal step with reward matched by Q_tot -> zero loss
  nets.agent.q_head.layers.back().b = Tensor::vec({0.5, 0.5, 0.5});
  targets = nets;
  EpisodeBatch b1 = one_episode_batch(2, 3, 4, {1.0}, {{0, 0}});
  CHECK(td_loss(b1, nets, targets, 0.99) == Catch::Approx(0.0).margin(1e-18));

  // gamma = 0 reduces the target to the immediate reward
  zero_params(params);
  targets = nets;
  EpisodeBatch b2 = one_episode_batch(2, 3, 4, {0.25, 0.0}, {{0, 0}, {0, 0}});
  CHECK(td_loss(b2, nets, targets, 0.0) == Catch::Approx((0.25 * 0.25) / 2.0));

  // bootstrap from a target worth 1.0 at gamma 0.99 -> squared error 0.9801
  zero_params(params);
  ParamList tparams = targets.params();
  zero_params(tparams);
  targets.agent.q_head.layers.back().b = Tensor::vec({0.5, 0.5, 0.5});  // vdn: Q_tot' = 1
  EpisodeBatch b3 = one_episode_batch(2, 3, 4, {0.0, 0.0}, {{0, 0}, {0, 0}});
  // t=0 bootstraps (0.99 * 1.0), t=1 is terminal with zero error
  CHECK(td_loss(b3, nets, targets, 0.99) == Catch::Approx(0.9801 / 2.0));
}

TEST_CASE("td_loss is invariant to padding") {
  RunConfig cfg = preset("hallway-small");
  cfg.rnn_hidden_dim = 4;
  cfg.z_dim = 3;
  cfg.vae_hidden_dim = 4;
  cfg.qhead_hidden_dim = 4;
  EnvSpec spec;
  spec.n_agents = 2;
  spec.n_actions = 3;
  spec.obs_width = 3;
  spec.state_width = 4;
  Rng rng(33);
  CromacNets nets = build_nets(cfg, spec, rng);
  CromacNets targets = nets;

  Rng data_rng(7);
  Episode e;
  for (int t = 0; t <= 3; ++t) {
    std::vector<Tensor> obs;
    for (int i = 0; i < 2; ++i) {
      Tensor o = Tensor::zeros(3);
      o.fill_uniform(data_rng, -1, 1);
      obs.push_back(o);
    }
    e.obs.push_back(obs);
    Tensor s = Tensor::zeros(4);
    s.fill_uniform(data_rng, -1, 1);
    e.states.push_back(s);
  }
  for (int t = 0; t < 3; ++t) {
    e.actions.push_back({static_cast<int>(data_rng.uniform_int(3)),
                         static_cast<int>(data_rng.uniform_int(3))});
    e.rewards.push_back(data_rng.uniform(-1, 1));
  }
  EpisodeBatch plain = EpisodeBatch::assemble({e}, 3);
  EpisodeBatch padded = plain;
  padded.max_len += 4;  // extra fully masked timesteps
  const double a = td_loss(plain, nets, targets, 0.95);
  const double b = td_loss(padded, nets, targets, 0.95);
  CHECK(std::abs(a - b) < 1e-12);
}

TEST_CASE("adversarial overlap kernel") {
  // worked example: Q=[2,1], chosen 0, upper(1)=1.5, lower(0)=1.2
  Tensor q = Tensor::vec({2, 1});
  Tensor qlo = Tensor::vec({1.2, 0.4});
  Tensor qhi = Tensor::vec({2.8, 1.5});
  CHECK(adv_overlap_term(q, qlo, qhi, 0) == Catch::Approx(0.3));

  // the y == a term contributes nothing even with overlapping bounds
  Tensor q2 = Tensor::vec({1, 1});
  CHECK(adv_overlap_term(q2, Tensor::vec({0, 0}), Tensor::vec({2, 2}), 0) ==
        Catch::Approx(0.0));

  // zero budget with a strict argmax: bounds are points, no overlap
  Tensor q3 = Tensor::vec({2, 1, 0.5});
  CHECK(adv_overlap_term(q3, q3, q3, 0) == Catch::Approx(0.0));
}

TEST_CASE("tape interval propagation matches the plain route") {
  Rng rng(29);
  Mlp head({6, 5, 4});
  for (auto& l : head.layers) {
    l.W.fill_uniform(rng, -1, 1);
    l.b.fill_uniform(rng, -0.5, 0.5);
  }
  Tensor tau(2, 2), z(2, 4);
  tau.fill_uniform(rng, -1, 1);
  z.fill_uniform(rng, -1, 1);
  const double radius = 0.35;
  Tape t(true);
  QBoundsT qb = q_bounds_t(t, t.constant(tau), t.constant(z), radius, head);
  for (int r = 0; r < 2; ++r) {
    Tensor tau_r = Tensor::zeros(2), z_r = Tensor::zeros(4);
    for (int c = 0; c < 2; ++c) tau_r[c] = tau.at(r, c);
    for (int c = 0; c < 4; ++c) z_r[c] = z.at(r, c);
    IntervalBounds plain = q_value_bounds(tau_r, z_r, PerturbationBudget(radius, 1.0), head);
    for (int a = 0; a < 4; ++a) {
      CHECK(t.value(qb.lower).at(r, a) == Catch::Approx(plain.lower[a]).epsilon(1e-12));
      CHECK(t.value(qb.upper).at(r, a) == Catch::Approx(plain.upper[a]).epsilon(1e-12));
    }
  }
}

TEST_CASE("adv_loss is nonnegative and vanishes at zero budget with separated actions") {
  RunConfig cfg = preset("hallway-small");
  cfg.rnn_hidden_dim = 4;
  cfg.z_dim = 3;
  cfg.vae_hidden_dim = 4;
  cfg.qhead_hidden_dim = 4;
  EnvSpec spec;
  spec.n_agents = 2;
  spec.n_actions = 3;
  spec.obs_width = 3;
  spec.state_width = 4;
  Rng rng(101);
  CromacNets nets = build_nets(cfg, spec, rng);
  CromacNets targets = nets;

  Rng data_rng(5);
  Episode e;
  for (int t = 0; t <= 2; ++t) {
    std::vector<Tensor> obs;
    for (int i = 0; i < 2; ++i) {
      Tensor o = Tensor::zeros(3);
      o.fill_uniform(data_rng, -1, 1);
      obs.push_back(o);
    }
    e.obs.push_back(obs);
    Tensor s = Tensor::zeros(4);
    s.fill_uniform(data_rng, -1, 1);
    e.states.push_back(s);
  }
  for (int t = 0; t < 2; ++t) {
    e.actions.push_back({0, 0});
    e.rewards.push_back(0.0);
  }
  EpisodeBatch batch = EpisodeBatch::assemble({e}, 3);
  CHECK(adv_loss(batch, nets, targets, PerturbationBudget(0.5, 5.0)) >= 0.0);

  // zero radius: rebuild the batch with the greedy actions, expect exactly 0
  Tape probe(true);
  LossOptions opt;
  opt.latent_radius = 0.0;
  opt.robust_active = true;
  Rng noise(3);
  // compute greedy actions through the state path
  {
    std::vector<Var> tau;
    Var h = probe.constant(Tensor(2, cfg.rnn_hidden_dim));
    for (std::size_t t = 0; t < 2; ++t) {
      Var x = probe.constant(batch.inputs_at(t));
      h = gru_step(probe, relu(linear_forward(probe, x, nets.agent.embed)), h, nets.agent.gru);
      GaussianVar post = nets.vae.encode_t(probe, probe.constant(batch.state_at(t)));
      Var q = agent_q(probe, h, repeat_rows(post.mean, 2), nets.agent);
      for (int i = 0; i < 2; ++i)
        batch.episodes[0].actions[t][i] =
            static_cast<int>(argmax_row(probe.value(q), static_cast<std::size_t>(i)));
    }
  }
  CHECK(adv_loss(batch, nets, targets, PerturbationBudget(0.0, 1.0)) == Catch::Approx(0.0));
}

TEST_CASE("total_loss weighting and gating") {
  LossWeights w;
  w.alpha1 = 0.1;
  w.alpha2 = 0.001;
  w.alpha3 = 0.3;
  w.t_r = 100;
  CHECK(total_loss(1.0, 2.0, 3.0, 7.0, w, 50) == Catch::Approx(1.203));
  CHECK(total_loss(1.0, 2.0, 3.0, 7.0, w, 150) == Catch::Approx(1.203 + 0.3 * 7.0));
  LossWeights zero;
  CHECK(total_loss(1.25, 9.0, 9.0, 9.0, zero, 1000) == Catch::Approx(1.25));
}

TEST_CASE("target_update hard copies and stays fixed between updates") {
  RunConfig cfg = preset("hallway-small");
  EnvSpec spec;
  spec.n_agents = 3;
  spec.n_actions = 3;
  spec.obs_width = 6;
  spec.state_width = 15;
  Rng rng(2);
  CromacNets nets = build_nets(cfg, spec, rng);
  Rng rng2(99);
  CromacNets targets = build_nets(cfg, spec, rng2);
  target_update(nets, targets);
  ParamList a = nets.params(), b = targets.params();
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(a[i].tensor->data == b[i].tensor->data);  // bitwise

  // touching the online nets leaves the frozen copy unchanged
  Tensor before = targets.agent.embed.W;
  nets.agent.embed.W.data[0] += 1.0;
  CHECK(targets.agent.embed.W.data == before.data);
}
