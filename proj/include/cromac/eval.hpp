#pragma once
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "cromac/attacks.hpp"
#include "cromac/checkpoint.hpp"
#include "cromac/config.hpp"
#include "cromac/envs.hpp"
#include "cromac/trainer.hpp"

namespace cromac {

struct EvalResult {
  std::vector<double> per_seed_win;
  double mean = 0.0;
  double stddev = 0.0;  // population std across seeds
  double max_deviation = 0.0;
  long long episodes_total = 0;
};

namespace detail {

inline Tensor row_of(const Tensor& m, std::size_t r) {
  Tensor out = Tensor::zeros(m.cols());
  for (std::size_t c = 0; c < m.cols(); ++c) out[c] = m.at(r, c);
  return out;
}

// Zero-tolerance budget check: every perturbed coordinate must sit inside the
// representable [m - eps, m + eps] interval of its original.
inline void assert_budget(const std::vector<Tensor>& orig, const std::vector<Tensor>& pert,
                          double eps, double& max_dev) {
  for (std::size_t j = 0; j < orig.size(); ++j) {
    for (std::size_t i = 0; i < orig[j].size(); ++i) {
      const double lo = orig[j][i] - eps, hi = orig[j][i] + eps;
      if (pert[j][i] < lo || pert[j][i] > hi)
        throw ContractError("attack exceeded the declared epsilon budget");
      max_dev = std::max(max_dev, std::abs(pert[j][i] - orig[j][i]));
    }
  }
}

// POE fusion mean over encoded messages, plain execution path.
inline Tensor fused_mean(const std::vector<Tensor>& messages, MessageEncoder& enc) {
  std::vector<DiagonalGaussian> experts;
  experts.reserve(messages.size());
  for (const auto& m : messages) experts.push_back(enc.encode(m));
  return poe_fuse(experts).mean;
}

inline int greedy_action(const Tensor& tau, const Tensor& z, AgentNetwork& net) {
  Tensor q = agent_q(tau, z, net);
  return static_cast<int>(argmax_row(q, 0));
}

// AME base action on one message subset: embed the subset mean, then argmax.
inline int ame_base_action(const Tensor& tau, const std::vector<Tensor>& subset,
                           CromacNets& nets) {
  Tensor mean = Tensor::zeros(subset[0].size());
  for (const auto& m : subset)
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += m[c];
  for (double& v : mean.data) v /= static_cast<double>(subset.size());
  Tensor z = linear_forward(mean, nets.menc.mean_head);
  return greedy_action(tau, z, nets.agent);
}

inline int ame_ensemble_action(const Tensor& tau, const std::vector<Tensor>& others,
                               std::size_t k, CromacNets& nets) {
  std::vector<std::vector<std::size_t>> subsets;
  enumerate_subsets(others.size(), std::min(k, others.size()), subsets);
  if (subsets.empty()) throw ContractError("ame: no message subsets available");
  std::vector<int> ballots;
  ballots.reserve(subsets.size());
  for (const auto& s : subsets) {
    std::vector<Tensor> subset;
    for (std::size_t idx : s) subset.push_back(others[idx]);
    ballots.push_back(ame_base_action(tau, subset, nets));
  }
  return ame_vote(ballots);
}

// d(attack objective)/d(message) for one receiving agent; the objective is
// the cross entropy between softmax(Q) and the clean chosen action.
inline MessageGradFn make_grad_fn(const RunConfig& cfg, CromacNets& nets, const Tensor& tau,
                                  std::size_t receiver, int clean_action) {
  return [&cfg, &nets, tau, receiver, clean_action](const std::vector<Tensor>& msgs) {
    Tape t(true);
    std::vector<Var> leaves;
    leaves.reserve(msgs.size());
    for (const auto& m : msgs) leaves.push_back(t.input(m));
    Var z{};
    if (cfg.algo == Algo::Cromac) {
      // per-expert encode, precision-weighted fusion, mean path
      Var prec_sum{}, weighted{};
      for (std::size_t j = 0; j < leaves.size(); ++j) {
        GaussianVar g = nets.menc.encode_t(t, leaves[j]);
        Var prec = reciprocal(g.variance);
        Var w = mul(g.mean, prec);
        prec_sum = j == 0 ? prec : add(prec_sum, prec);
        weighted = j == 0 ? w : add(weighted, w);
      }
      z = mul(weighted, reciprocal(prec_sum));
    } else {
      // AME base policy evaluated on the mean of all received channels
      Var acc{};
      std::size_t count = 0;
      for (std::size_t j = 0; j < leaves.size(); ++j) {
        if (j == receiver) continue;
        acc = count == 0 ? leaves[j] : add(acc, leaves[j]);
        ++count;
      }
      if (count == 0) throw ContractError("ame attack: no channels");
      z = linear_forward(t, scale(acc, 1.0 / static_cast<double>(count)),
                         nets.menc.mean_head);
    }
    Var q = agent_q(t, t.constant(tau), z, nets.agent);
    Var lse = logsumexp_rows(q);
    Var qy = gather_cols(q, {static_cast<std::size_t>(clean_action)});
    Var objective = sub(lse, qy);  // cross entropy against the one-hot clean action
    t.backward(objective);
    std::vector<Tensor> grads;
    grads.reserve(leaves.size());
    for (std::size_t j = 0; j < leaves.size(); ++j) {
      if (j == receiver && cfg.algo == Algo::Ame) {
        grads.push_back(Tensor(msgs[j].shape));
        continue;
      }
      grads.push_back(t.grad_of(leaves[j]));
    }
    return grads;
  };
}

struct BoundsReport {
  std::ofstream os;
  bool open(const std::string& path) {
    if (path.empty()) return false;
    os.open(path, std::ios::binary);
    if (!os) throw ContractError("cannot open bounds report " + path);
    os << "episode,step,agent,dim,z_lower,z_upper,int_err_bound\n";
    return true;
  }
};

}  // namespace detail

// Greedy decentralized evaluation of one episode under the given attack.
// Returns the win flag; tracks the max message deviation seen.
inline bool evaluate_episode(const RunConfig& cfg, Env& env, CromacNets& nets,
                             const AttackSpec& attack, Rng& env_rng, Rng& attack_rng,
                             double& max_dev, detail::BoundsReport* report,
                             long long episode_idx) {
  const std::size_t N = env.spec().n_agents;
  const std::size_t A = env.spec().n_actions;
  StepResult sr = env.reset(env_rng);
  Tensor hidden(N, nets.agent.rnn_width());
  std::vector<int> last_actions(N, -1);
  long long step_idx = 0;
  while (!sr.terminated) {
    // trajectory encoders run on clean local observations
    Tape t(false);
    const std::size_t obs_w = sr.obs[0].size();
    const std::size_t w = obs_w + A + N;
    Tensor x(N, w);
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t c = 0; c < obs_w; ++c) x.data[i * w + c] = sr.obs[i][c];
      if (last_actions[i] >= 0)
        x.data[i * w + obs_w + static_cast<std::size_t>(last_actions[i])] = 1.0;
      x.data[i * w + obs_w + A + i] = 1.0;
    }
    Var h = gru_step(t, relu(linear_forward(t, t.constant(x), nets.agent.embed)),
                     t.constant(hidden), nets.agent.gru);
    hidden = t.value(h);
    std::vector<Tensor> messages;
    for (std::size_t i = 0; i < N; ++i) messages.push_back(detail::row_of(hidden, i));

    std::vector<int> actions(N, 0);
    for (std::size_t i = 0; i < N; ++i) {
      const Tensor tau = detail::row_of(hidden, i);
      std::vector<Tensor> others_clean;
      for (std::size_t j = 0; j < N; ++j)
        if (j != i) others_clean.push_back(messages[j]);

      int clean_action;
      if (cfg.algo == Algo::Cromac) {
        clean_action = detail::greedy_action(tau, detail::fused_mean(messages, nets.menc),
                                             nets.agent);
      } else {
        clean_action = detail::ame_ensemble_action(tau, others_clean, cfg.ame_k, nets);
      }

      std::vector<bool> attackable(N, true);
      attackable[i] = false;  // the agent's own history is not a channel
      std::vector<Tensor> perturbed = messages;
      switch (attack.kind) {
        case AttackKind::Natural:
          break;
        case AttackKind::Random:
          perturbed = random_attack(messages, attack.epsilon, attack_rng, attackable);
          break;
        case AttackKind::Fgsm:
          perturbed = fgsm_attack(messages,
                                  detail::make_grad_fn(cfg, nets, tau, i, clean_action),
                                  attack.epsilon, attackable);
          break;
        case AttackKind::Pgd:
          perturbed = pgd_attack(messages,
                                 detail::make_grad_fn(cfg, nets, tau, i, clean_action),
                                 attack.epsilon, attack.steps, attackable);
          break;
      }
      detail::assert_budget(messages, perturbed, attack.epsilon, max_dev);

      if (cfg.algo == Algo::Cromac) {
        actions[i] =
            detail::greedy_action(tau, detail::fused_mean(perturbed, nets.menc), nets.agent);
      } else {
        std::vector<Tensor> others_pert;
        for (std::size_t j = 0; j < N; ++j)
          if (j != i) others_pert.push_back(perturbed[j]);
        actions[i] = detail::ame_ensemble_action(tau, others_pert, cfg.ame_k, nets);
      }

      if (report != nullptr && cfg.algo == Algo::Cromac) {
        EncoderBounds eb = encoder_bounds(messages, attack.epsilon, nets.menc);
        PoeEnvelope env_b = poe_harmonic_bounds(eb.variance, eb.mean);
        const double ie = integration_error_bound(eb.variance);
        char buf[200];
        for (std::size_t d = 0; d < env_b.mean.width(); ++d) {
          std::snprintf(buf, sizeof(buf), "%lld,%lld,%zu,%zu,%.17g,%.17g,%.17g\n", episode_idx,
                        step_idx, i, d, env_b.mean.lower[d], env_b.mean.upper[d], ie);
          report->os << buf;
        }
      }
    }
    sr = env.step(actions, env_rng);
    last_actions = actions;
    ++step_idx;
  }
  return sr.win;
}

// Greedy decentralized evaluation: `episodes` per seed, message path only
// (the state encoder must never run). Reports per-seed win rates with their
// mean and population std.
inline EvalResult run_evaluation(CromacNets& nets, const RunConfig& cfg,
                                 const AttackSpec& attack, std::size_t episodes,
                                 const std::vector<std::uint64_t>& seeds,
                                 const std::string& bounds_report_path = "") {
  if (episodes < 1) throw ContractError("run_evaluation: episodes must be >= 1");
  if (seeds.empty()) throw ContractError("run_evaluation: need at least one seed");
  detail::BoundsReport report;
  const bool reporting = report.open(bounds_report_path);
  const long long state_encoder_calls_before = nets.vae.encode_calls;
  EvalResult out;
  for (std::uint64_t seed : seeds) {
    auto env = make_env(cfg.env);
    std::size_t wins = 0;
    for (std::size_t e = 0; e < episodes; ++e) {
      Rng env_rng = Rng::stream(seed, rng_tag::kEval, 2 * e);
      Rng attack_rng = Rng::stream(seed, rng_tag::kEval, 2 * e + 1);
      if (evaluate_episode(cfg, *env, nets, attack, env_rng, attack_rng, out.max_deviation,
                           reporting ? &report : nullptr, static_cast<long long>(e)))
        ++wins;
      ++out.episodes_total;
    }
    out.per_seed_win.push_back(static_cast<double>(wins) / static_cast<double>(episodes));
  }
  if (nets.vae.encode_calls != state_encoder_calls_before)
    throw ContractError("run_evaluation: state encoder was invoked during execution");
  double sum = 0.0;
  for (double w : out.per_seed_win) sum += w;
  out.mean = sum / static_cast<double>(out.per_seed_win.size());
  double sq = 0.0;
  for (double w : out.per_seed_win) sq += (w - out.mean) * (w - out.mean);
  out.stddev = std::sqrt(sq / static_cast<double>(out.per_seed_win.size()));
  return out;
}

// ---- checkpoint loading ----

struct LoadedModel {
  RunConfig cfg;
  CromacNets nets;
};

inline LoadedModel load_model(const std::string& checkpoint_path) {
  CheckpointData ck = load_checkpoint(checkpoint_path);
  LoadedModel m;
  m.cfg = parse_config_text(ck.config_text);
  m.cfg.validate();
  auto env = make_env(m.cfg.env);
  Rng dummy(0);
  m.nets = build_nets(m.cfg, env->spec(), dummy);
  restore_params(ck, m.nets.params());
  return m;
}

// ---- attack matrix (eight conditions) ----

struct AttackCondition {
  std::string name;
  AttackSpec spec;
};

inline std::vector<AttackCondition> table1_conditions(const RunConfig& cfg) {
  return {
      {"natural", AttackSpec(AttackKind::Natural, 0.0)},
      {"random", AttackSpec(AttackKind::Random, cfg.epsilon)},
      {"pgd", AttackSpec(AttackKind::Pgd, cfg.epsilon, cfg.pgd_steps)},
      {"fgsm_1", AttackSpec(AttackKind::Fgsm, cfg.fgsm_budget(1))},
      {"fgsm_2", AttackSpec(AttackKind::Fgsm, cfg.fgsm_budget(2))},
      {"fgsm", AttackSpec(AttackKind::Fgsm, cfg.epsilon)},
      {"fgsm_3", AttackSpec(AttackKind::Fgsm, cfg.fgsm_budget(3))},
      {"fgsm_4", AttackSpec(AttackKind::Fgsm, cfg.fgsm_budget(4))},
  };
}

inline std::string table1_csv(CromacNets& nets, const RunConfig& cfg, std::size_t episodes,
                              const std::vector<std::uint64_t>& seeds) {
  const auto conditions = table1_conditions(cfg);
  std::string header = "metric", means = "win_rate_mean", stds = "win_rate_std";
  char buf[64];
  for (const auto& c : conditions) {
    EvalResult r = run_evaluation(nets, cfg, c.spec, episodes, seeds);
    header += "," + c.name;
    std::snprintf(buf, sizeof(buf), ",%.6g", r.mean);
    means += buf;
    std::snprintf(buf, sizeof(buf), ",%.6g", r.stddev);
    stds += buf;
  }
  return header + "\n" + means + "\n" + stds + "\n";
}

// Scripted-policy episode runner; exercises the same win-rate estimator path
// without a learned model.
using ScriptedPolicy = std::function<std::vector<int>(const StepResult&, long long step)>;

inline double scripted_win_rate(Env& env, const ScriptedPolicy& policy, std::size_t episodes,
                                std::uint64_t seed) {
  std::size_t wins = 0;
  for (std::size_t e = 0; e < episodes; ++e) {
    Rng rng = Rng::stream(seed, rng_tag::kEval, e);
    StepResult sr = env.reset(rng);
    long long step = 0;
    while (!sr.terminated) sr = env.step(policy(sr, step++), rng);
    if (sr.win) ++wins;
  }
  return static_cast<double>(wins) / static_cast<double>(episodes);
}

}  // namespace cromac
