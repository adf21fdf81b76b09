#pragma once
#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cromac/attacks.hpp"
#include "cromac/bounds.hpp"
#include "cromac/checkpoint.hpp"
#include "cromac/config.hpp"
#include "cromac/envs.hpp"
#include "cromac/marl.hpp"
#include "cromac/metrics.hpp"

// vendored single-header nlohmann/json
#include "json.hpp"

namespace cromac {

// argmax with probability 1-explore_eps, uniform otherwise; argmax ties break
// to the lowest index.
inline int epsilon_greedy(const Tensor& q, double explore_eps, Rng& rng) {
  if (q.size() == 0) throw ContractError("epsilon_greedy: empty Q vector");
  if (explore_eps < 0.0 || explore_eps > 1.0)
    throw ContractError("epsilon_greedy: explore_eps in [0,1]");
  if (explore_eps > 0.0 && rng.uniform() < explore_eps)
    return static_cast<int>(rng.uniform_int(q.size()));
  return static_cast<int>(argmax_row(q, 0));
}

inline double explore_schedule(const RunConfig& cfg, long long t_env) {
  if (t_env >= cfg.explore_anneal_steps) return cfg.explore_end;
  const double frac = static_cast<double>(t_env) / static_cast<double>(cfg.explore_anneal_steps);
  return cfg.explore_start + frac * (cfg.explore_end - cfg.explore_start);
}

// RNG stream tags (sub-streams of the master seed)
namespace rng_tag {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kEnv = 2;
inline constexpr std::uint64_t kExplore = 3;
inline constexpr std::uint64_t kSample = 4;
inline constexpr std::uint64_t kNoise = 5;
inline constexpr std::uint64_t kRolloutLatent = 6;
inline constexpr std::uint64_t kAme = 7;
inline constexpr std::uint64_t kEval = 8;
}  // namespace rng_tag

inline CromacNets build_nets(const RunConfig& cfg, const EnvSpec& spec, Rng& rng) {
  CromacNets nets;
  nets.agent = AgentNetwork(spec.obs_width + spec.n_actions + spec.n_agents,
                            cfg.rnn_hidden_dim, cfg.z_dim, cfg.qhead_hidden_dim,
                            spec.n_actions);
  nets.mixer = Mixer(cfg.mixer, spec.n_agents, spec.state_width, cfg.mixing_embed_dim);
  nets.vae = StateVae(spec.state_width, cfg.vae_hidden_dim, cfg.z_dim);
  nets.menc = MessageEncoder(cfg.rnn_hidden_dim, cfg.z_dim);
  nets.agent.init(rng);
  nets.mixer.init(rng);
  nets.vae.init(rng);
  nets.menc.init(rng, cfg.c_max);
  nets.menc.clamp_weights(cfg.c_min(), cfg.c_max);
  return nets;
}

// One decentralized decision step shared by training rollouts. Returns the
// updated hidden states, per-agent actions and the per-step integration-error
// bound of the message path (diagnostic).
struct RolloutStep {
  Tensor hidden;            // [N, rnn]
  std::vector<int> actions;
  double int_err_bound = 0.0;
};

inline RolloutStep rollout_step(const RunConfig& cfg, CromacNets& nets,
                                const std::vector<Tensor>& obs,
                                const std::vector<int>& last_actions, std::size_t n_actions,
                                const Tensor& hidden_prev, double explore_eps,
                                Rng& explore_rng, Rng& latent_rng, Rng& ame_rng,
                                bool sample_latent) {
  const std::size_t N = obs.size();
  const std::size_t obs_w = obs[0].size();
  const std::size_t w = obs_w + n_actions + N;
  Tape t(false);
  Tensor x(N, w);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t c = 0; c < obs_w; ++c) x.data[i * w + c] = obs[i][c];
    if (last_actions[i] >= 0)
      x.data[i * w + obs_w + static_cast<std::size_t>(last_actions[i])] = 1.0;
    x.data[i * w + obs_w + n_actions + i] = 1.0;
  }
  Var e = relu(linear_forward(t, t.constant(x), nets.agent.embed));
  Var h = gru_step(t, e, t.constant(hidden_prev), nets.agent.gru);
  const Tensor hv = t.value(h);  // copy; nodes may follow

  RolloutStep out;
  out.hidden = hv;
  Var z_rows;
  if (cfg.algo == Algo::Cromac) {
    // every agent fuses the same N messages (tau_j for all j, own included)
    GaussianVar experts = nets.menc.encode_t(t, h);
    GaussianVar fused = poe_fuse_rows(experts, N);  // [1, Z]
    Tensor z = t.value(fused.mean);
    if (sample_latent) {
      const Tensor& var = t.value(fused.variance);
      for (std::size_t i = 0; i < z.size(); ++i)
        z[i] += std::sqrt(var[i]) * latent_rng.normal();
    }
    z_rows = repeat_rows(t.constant(z), N);
    // diagnostic: certified envelope width of the message path at the training budget
    std::vector<Tensor> msgs;
    for (std::size_t i = 0; i < N; ++i) {
      Tensor m = Tensor::zeros(hv.cols());
      for (std::size_t c = 0; c < hv.cols(); ++c) m[c] = hv.at(i, c);
      msgs.push_back(std::move(m));
    }
    EncoderBounds eb = encoder_bounds(msgs, cfg.epsilon, nets.menc);
    out.int_err_bound = integration_error_bound(eb.variance);
  } else {
    // ablated-subset baseline: each agent embeds the mean of a random
    // k-subset of the other agents' messages
    std::vector<std::vector<std::size_t>> sel(N);
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<std::size_t> others;
      for (std::size_t j = 0; j < N; ++j)
        if (j != i) others.push_back(j);
      const std::size_t k = std::min(cfg.ame_k, others.size());
      std::vector<std::size_t> pick = ame_subset_sample(others.size(), k, ame_rng);
      for (std::size_t p : pick) sel[i].push_back(others[p]);
      if (sel[i].empty()) sel[i].push_back(i);  // single-agent env degenerate case
    }
    Var subset_mean = gather_rows_mean(h, sel);
    z_rows = linear_forward(t, subset_mean, nets.menc.mean_head);
  }
  Var q = agent_q(t, h, z_rows, nets.agent);
  const Tensor& qv = t.value(q);
  for (std::size_t i = 0; i < N; ++i) {
    Tensor row(1, qv.cols());
    for (std::size_t c = 0; c < qv.cols(); ++c) row.data[c] = qv.at(i, c);
    out.actions.push_back(epsilon_greedy(row, explore_eps, explore_rng));
  }
  return out;
}

struct CollectedEpisode {
  Episode episode;
  double mean_int_err = 0.0;
};

inline CollectedEpisode collect_episode(const RunConfig& cfg, Env& env, CromacNets& nets,
                                        double explore_eps, Rng& env_rng, Rng& explore_rng,
                                        Rng& latent_rng, Rng& ame_rng, bool sample_latent) {
  CollectedEpisode out;
  Episode& ep = out.episode;
  StepResult sr = env.reset(env_rng);
  Tensor hidden(env.spec().n_agents, nets.agent.rnn_width());
  std::vector<int> last_actions(env.spec().n_agents, -1);
  double int_err_sum = 0.0;
  while (true) {
    ep.obs.push_back(sr.obs);
    ep.states.push_back(sr.state);
    if (sr.terminated) break;
    RolloutStep step = rollout_step(cfg, nets, sr.obs, last_actions, env.spec().n_actions,
                                    hidden, explore_eps, explore_rng, latent_rng, ame_rng,
                                    sample_latent);
    last_actions = step.actions;
    hidden = step.hidden;
    sr = env.step(step.actions, env_rng);
    ep.actions.push_back(step.actions);
    ep.rewards.push_back(sr.reward);
    int_err_sum += step.int_err_bound;
    if (sr.terminated) {
      ep.obs.push_back(sr.obs);
      ep.states.push_back(sr.state);
      ep.win = sr.win;
      break;
    }
  }
  out.mean_int_err = ep.rewards.empty() ? 0.0 : int_err_sum / static_cast<double>(ep.rewards.size());
  return out;
}

// Diagnostic latent stream: per-timestep state/message posterior parameters
// of the first episode in the batch.
inline void export_latents(std::ofstream& os, long long trainer_step, const EpisodeBatch& batch,
                           CromacNets& nets) {
  const Episode& ep = batch.episodes[0];
  const std::size_t N = ep.obs[0].size();
  const std::size_t obs_w = ep.obs[0][0].size();
  const std::size_t w = obs_w + batch.n_actions + N;
  Tape t(false);
  Var h = t.constant(Tensor(N, nets.agent.rnn_width()));
  char buf[160];
  for (std::size_t step = 0; step < ep.length(); ++step) {
    Tensor x(N, w);
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t c = 0; c < obs_w; ++c) x.data[i * w + c] = ep.obs[step][i][c];
      if (step > 0)
        x.data[i * w + obs_w + static_cast<std::size_t>(ep.actions[step - 1][i])] = 1.0;
      x.data[i * w + obs_w + batch.n_actions + i] = 1.0;
    }
    h = gru_step(t, relu(linear_forward(t, t.constant(x), nets.agent.embed)), h, nets.agent.gru);
    GaussianVar experts = nets.menc.encode_t(t, h);
    GaussianVar fused = poe_fuse_rows(experts, N);
    GaussianVar st = nets.vae.encode_t(t, t.constant(ep.states[step]));
    const Tensor &fm = t.value(fused.mean), &fv = t.value(fused.variance);
    const Tensor &sm = t.value(st.mean), &sv = t.value(st.variance);
    for (std::size_t d = 0; d < fm.size(); ++d) {
      for (std::size_t i = 0; i < N; ++i) {
        std::snprintf(buf, sizeof(buf), "%lld,%zu,%zu,z_msg,%zu,%.17g,%.17g\n", trainer_step,
                      step, i, d, fm[d], fv[d]);
        os << buf;
      }
      std::snprintf(buf, sizeof(buf), "%lld,%zu,-1,z_st,%zu,%.17g,%.17g\n", trainer_step, step,
                    d, sm[d], sv[d]);
      os << buf;
    }
  }
}

struct TrainSummary {
  long long env_steps = 0;
  long long trainer_steps = 0;
  double wall_seconds = 0.0;
  std::string checkpoint_path;
  std::string metrics_path;
};

// Full training loop: rollout -> buffer -> one combined optimizer step on the
// weighted objective -> encoder weight clamp -> periodic target copy.
inline TrainSummary run_training(const RunConfig& cfg, std::uint64_t seed,
                                 const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto t0 = std::chrono::steady_clock::now();

  auto env = make_env(cfg.env);
  const EnvSpec& spec = env->spec();
  Rng init_rng = Rng::stream(seed, rng_tag::kInit);
  Rng env_rng = Rng::stream(seed, rng_tag::kEnv);
  Rng explore_rng = Rng::stream(seed, rng_tag::kExplore);
  Rng sample_rng = Rng::stream(seed, rng_tag::kSample);
  Rng noise_rng = Rng::stream(seed, rng_tag::kNoise);
  Rng latent_rng = Rng::stream(seed, rng_tag::kRolloutLatent);
  Rng ame_rng = Rng::stream(seed, rng_tag::kAme);

  CromacNets nets = build_nets(cfg, spec, init_rng);
  CromacNets targets = nets;
  ParamList params = nets.params();
  AdamState adam(params, cfg.lr);
  ReplayBuffer buffer(cfg.buffer_capacity, spec.n_actions);

  const std::string config_text = serialize_config(cfg);
  {
    nlohmann::json manifest;
    manifest["config"] = config_text;
    manifest["seed"] = seed;
    manifest["format"] = "cromac-run-v1";
    std::ofstream mf(out_dir + "/manifest.json", std::ios::binary);
    mf << manifest.dump(2) << "\n";
  }
  MetricsWriter metrics(out_dir + "/metrics.csv");
  std::ofstream latent_csv;
  if (cfg.latent_export_interval > 0) {
    latent_csv.open(out_dir + "/latents.csv", std::ios::binary);
    latent_csv << "trainer_step,t,agent,kind,dim,mean,variance\n";
  }

  TrainSummary summary;
  summary.metrics_path = out_dir + "/metrics.csv";
  long long t_env = 0, trainer_step = 0;
  long long next_ckpt = cfg.checkpoint_interval > 0 ? cfg.checkpoint_interval : -1;

  while (t_env < cfg.total_steps) {
    const double eps = explore_schedule(cfg, t_env);
    CollectedEpisode col = collect_episode(cfg, *env, nets, eps, env_rng, explore_rng,
                                           latent_rng, ame_rng, cfg.rollout_latent_sample);
    t_env += static_cast<long long>(col.episode.length());
    double ep_return = 0.0;
    for (double r : col.episode.rewards) ep_return += r;
    const bool win = col.episode.win;
    buffer.insert(std::move(col.episode));

    EpisodeBatch batch = buffer.sample(std::min(cfg.batch_size, buffer.size()), sample_rng);
    LossOptions opt;
    opt.gamma = cfg.gamma;
    opt.latent_radius = cfg.kappa * cfg.epsilon;
    opt.robust_active = cfg.algo == Algo::Cromac && t_env > cfg.t_r && cfg.alpha3 > 0.0;
    opt.q_input = cfg.algo == Algo::Ame ? QInputMode::AmeSubset : cfg.train_q_input;
    opt.kl_dir = cfg.kl_direction;
    opt.double_q = cfg.double_q;
    opt.ame_k = cfg.ame_k;

    Tape tape(true);
    LossBundle losses = build_losses(tape, batch, nets, targets, opt, noise_rng);
    Var total = losses.td;
    if (cfg.algo == Algo::Cromac) {
      total = add(total, scale(losses.vae, cfg.alpha1));
      total = add(total, scale(losses.kl, cfg.alpha2));
      if (opt.robust_active) total = add(total, scale(losses.adv, cfg.alpha3));
    }
    const double ltd = tape.value(losses.td)[0];
    const double lvae = tape.value(losses.vae)[0];
    const double lkl = tape.value(losses.kl)[0];
    const double ladv = tape.value(losses.adv)[0];
    if (!std::isfinite(ltd) || !std::isfinite(lvae) || !std::isfinite(lkl) ||
        !std::isfinite(ladv)) {
      std::ofstream diag(out_dir + "/diagnostic.txt", std::ios::binary);
      diag << "non-finite loss at env step " << t_env << "\n"
           << "td=" << ltd << " vae=" << lvae << " kl=" << lkl << " adv=" << ladv << "\n";
      throw NumericError("run_training: non-finite loss (see diagnostic.txt)");
    }
    zero_grads(params);
    tape.backward(total);
    clip_grad_norm(params, cfg.grad_norm_clip);
    adam_step(params, adam);
    if (cfg.algo == Algo::Cromac) {
      nets.menc.clamp_weights(cfg.c_min(), cfg.c_max);
      if (!nets.menc.weights_within(cfg.c_min(), cfg.c_max))
        throw ContractError("run_training: encoder clamp violated");
    }
    ++trainer_step;
    if (trainer_step % cfg.target_update_interval == 0) target_update(nets, targets);

    MetricsRow row;
    row.step = t_env;
    row.episode_return = ep_return;
    row.win = win ? 1 : 0;
    row.loss_td = ltd;
    row.loss_vae = lvae;
    row.loss_kl = lkl;
    row.loss_adv = ladv;
    row.explore_eps = eps;
    row.int_err_bound = col.mean_int_err;
    metrics.write(row);

    if (latent_csv.is_open() && trainer_step % cfg.latent_export_interval == 0)
      export_latents(latent_csv, trainer_step, batch, nets);

    if (next_ckpt > 0 && t_env >= next_ckpt) {
      save_checkpoint(out_dir + "/model_" + std::to_string(t_env) + ".ckpt", params, config_text);
      next_ckpt += cfg.checkpoint_interval;
    }
  }

  summary.checkpoint_path = out_dir + "/model.ckpt";
  save_checkpoint(summary.checkpoint_path, params, config_text);
  metrics.flush();
  summary.env_steps = t_env;
  summary.trainer_steps = trainer_step;
  summary.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return summary;
}

}  // namespace cromac
