#pragma once
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "cromac/errors.hpp"
#include "cromac/latent.hpp"
#include "cromac/marl.hpp"

namespace cromac {

enum class Algo { Cromac, Ame };

// Every scalar hyperparameter of a run. Config files are flat UTF-8
// `key = value` lines; keys follow the hyperparameter table naming. The
// canonical serialization below is what gets hashed into checkpoints, so its
// key order must stay stable.
struct RunConfig {
  std::string env = "hallway-4x5x6";
  Algo algo = Algo::Cromac;
  MixerKind mixer = MixerKind::Qmix;
  long long total_steps = 2'000'000;  // env steps
  long long t_r = 700'000;            // robust-phase start, env steps
  double epsilon = 0.5;               // message-space l_inf budget
  double kappa = 5.0;
  double c_max = 0.1;  // encoder weight clamp; c_min = -c_max
  double alpha1 = 0.1;
  double alpha2 = 0.001;
  double alpha3 = 0.3;
  double gamma = 0.99;
  double lr = 5e-4;
  double grad_norm_clip = 10.0;  // global L2 clip; 0 disables
  std::size_t rnn_hidden_dim = 16;
  std::size_t z_dim = 16;
  std::size_t vae_hidden_dim = 32;
  std::size_t mixing_embed_dim = 32;
  std::size_t qhead_hidden_dim = 16;
  double explore_start = 1.0;
  double explore_end = 0.05;
  long long explore_anneal_steps = 50'000;
  std::size_t buffer_capacity = 5000;
  std::size_t batch_size = 32;
  long long target_update_interval = 200;  // trainer steps
  QInputMode train_q_input = QInputMode::State;
  KlDirection kl_direction = KlDirection::StateToMessage;
  bool rollout_latent_sample = false;  // draw z during training rollouts vs use the mean
  bool double_q = false;
  std::size_t ame_k = 1;
  int pgd_steps = 3;
  double eps_fgsm1 = 0.0;  // 0 means "fall back to epsilon"
  double eps_fgsm2 = 0.0;
  double eps_fgsm3 = 0.0;
  double eps_fgsm4 = 0.0;
  long long checkpoint_interval = 100'000;  // env steps; 0 = final only
  long long latent_export_interval = 0;     // trainer steps; 0 = off

  double c_min() const { return -c_max; }
  double fgsm_budget(int variant) const {
    const double v = variant == 1   ? eps_fgsm1
                     : variant == 2 ? eps_fgsm2
                     : variant == 3 ? eps_fgsm3
                     : variant == 4 ? eps_fgsm4
                                    : epsilon;
    return v > 0.0 ? v : epsilon;
  }

  void validate() const {
    if (total_steps <= 0 || t_r < 0 || t_r >= total_steps)
      throw ContractError("config: need 0 <= t_r < total_steps");
    if (epsilon < 0.0) throw ContractError("config: epsilon must be >= 0");
    if (!(kappa > 0.0)) throw ContractError("config: kappa must be > 0");
    if (!(c_max > 0.0)) throw ContractError("config: c_max must be > 0");
    if (alpha1 < 0.0 || alpha2 < 0.0 || alpha3 < 0.0)
      throw ContractError("config: loss weights must be >= 0");
    if (gamma < 0.0 || gamma >= 1.0) throw ContractError("config: gamma in [0,1)");
    if (!(lr > 0.0)) throw ContractError("config: lr must be > 0");
    if (grad_norm_clip < 0.0) throw ContractError("config: grad_norm_clip must be >= 0");
    if (rnn_hidden_dim == 0 || z_dim == 0 || vae_hidden_dim == 0 || mixing_embed_dim == 0 ||
        qhead_hidden_dim == 0)
      throw ContractError("config: dims must be positive");
    if (explore_start < 0.0 || explore_start > 1.0 || explore_end < 0.0 || explore_end > 1.0 ||
        explore_anneal_steps <= 0)
      throw ContractError("config: bad exploration schedule");
    if (buffer_capacity == 0 || batch_size == 0 || target_update_interval <= 0)
      throw ContractError("config: bad replay/trainer settings");
    if (ame_k == 0) throw ContractError("config: ame_k must be >= 1");
    if (pgd_steps < 1) throw ContractError("config: pgd_steps must be >= 1");
  }
};

namespace detail {
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace detail

inline std::string serialize_config(const RunConfig& c) {
  std::ostringstream os;
  auto kv = [&](const char* k, const std::string& v) { os << k << " = " << v << "\n"; };
  auto kd = [&](const char* k, double v) { kv(k, detail::fmt_double(v)); };
  auto ki = [&](const char* k, long long v) { kv(k, std::to_string(v)); };
  kv("env", c.env);
  kv("algo", c.algo == Algo::Cromac ? "cromac" : "ame");
  kv("mixer", c.mixer == MixerKind::Qmix ? "qmix" : "vdn");
  ki("total_steps", c.total_steps);
  ki("t_r", c.t_r);
  kd("epsilon", c.epsilon);
  kd("kappa", c.kappa);
  kd("c_max", c.c_max);
  kd("alpha1", c.alpha1);
  kd("alpha2", c.alpha2);
  kd("alpha3", c.alpha3);
  kd("gamma", c.gamma);
  kd("lr", c.lr);
  kd("grad_norm_clip", c.grad_norm_clip);
  ki("rnn_hidden_dim", static_cast<long long>(c.rnn_hidden_dim));
  ki("z_dim", static_cast<long long>(c.z_dim));
  ki("vae_hidden_dim", static_cast<long long>(c.vae_hidden_dim));
  ki("mixing_embed_dim", static_cast<long long>(c.mixing_embed_dim));
  ki("qhead_hidden_dim", static_cast<long long>(c.qhead_hidden_dim));
  kd("explore_start", c.explore_start);
  kd("explore_end", c.explore_end);
  ki("explore_anneal_steps", c.explore_anneal_steps);
  ki("buffer_capacity", static_cast<long long>(c.buffer_capacity));
  ki("batch_size", static_cast<long long>(c.batch_size));
  ki("target_update_interval", c.target_update_interval);
  kv("train_q_input", c.train_q_input == QInputMode::State ? "state" : "message");
  kv("kl_direction",
     c.kl_direction == KlDirection::StateToMessage ? "state_to_message" : "message_to_state");
  kv("rollout_latent_sample", c.rollout_latent_sample ? "true" : "false");
  kv("double_q", c.double_q ? "true" : "false");
  ki("ame_k", static_cast<long long>(c.ame_k));
  ki("pgd_steps", c.pgd_steps);
  kd("eps_fgsm1", c.eps_fgsm1);
  kd("eps_fgsm2", c.eps_fgsm2);
  kd("eps_fgsm3", c.eps_fgsm3);
  kd("eps_fgsm4", c.eps_fgsm4);
  ki("checkpoint_interval", c.checkpoint_interval);
  ki("latent_export_interval", c.latent_export_interval);
  return os.str();
}

inline void apply_config_line(RunConfig& c, const std::string& key, const std::string& val) {
  auto as_d = [&] { return std::stod(val); };
  auto as_i = [&] { return std::stoll(val); };
  auto as_u = [&] { return static_cast<std::size_t>(std::stoll(val)); };
  if (key == "env") c.env = val;
  else if (key == "algo") {
    if (val == "cromac") c.algo = Algo::Cromac;
    else if (val == "ame") c.algo = Algo::Ame;
    else throw ContractError("config: algo must be cromac|ame");
  } else if (key == "mixer") {
    if (val == "qmix") c.mixer = MixerKind::Qmix;
    else if (val == "vdn") c.mixer = MixerKind::Vdn;
    else throw ContractError("config: mixer must be qmix|vdn");
  } else if (key == "total_steps") c.total_steps = as_i();
  else if (key == "t_r") c.t_r = as_i();
  else if (key == "epsilon") c.epsilon = as_d();
  else if (key == "kappa") c.kappa = as_d();
  else if (key == "c_max") c.c_max = as_d();
  else if (key == "alpha1") c.alpha1 = as_d();
  else if (key == "alpha2") c.alpha2 = as_d();
  else if (key == "alpha3") c.alpha3 = as_d();
  else if (key == "gamma") c.gamma = as_d();
  else if (key == "lr") c.lr = as_d();
  else if (key == "grad_norm_clip") c.grad_norm_clip = as_d();
  else if (key == "rnn_hidden_dim") c.rnn_hidden_dim = as_u();
  else if (key == "z_dim") c.z_dim = as_u();
  else if (key == "vae_hidden_dim") c.vae_hidden_dim = as_u();
  else if (key == "mixing_embed_dim") c.mixing_embed_dim = as_u();
  else if (key == "qhead_hidden_dim") c.qhead_hidden_dim = as_u();
  else if (key == "explore_start") c.explore_start = as_d();
  else if (key == "explore_end") c.explore_end = as_d();
  else if (key == "explore_anneal_steps") c.explore_anneal_steps = as_i();
  else if (key == "buffer_capacity") c.buffer_capacity = as_u();
  else if (key == "batch_size") c.batch_size = as_u();
  else if (key == "target_update_interval") c.target_update_interval = as_i();
  else if (key == "train_q_input") {
    if (val == "state") c.train_q_input = QInputMode::State;
    else if (val == "message") c.train_q_input = QInputMode::Message;
    else throw ContractError("config: train_q_input must be state|message");
  } else if (key == "kl_direction") {
    if (val == "state_to_message") c.kl_direction = KlDirection::StateToMessage;
    else if (val == "message_to_state") c.kl_direction = KlDirection::MessageToState;
    else throw ContractError("config: kl_direction must be state_to_message|message_to_state");
  } else if (key == "rollout_latent_sample") {
    if (val == "true" || val == "1") c.rollout_latent_sample = true;
    else if (val == "false" || val == "0") c.rollout_latent_sample = false;
    else throw ContractError("config: rollout_latent_sample must be true|false");
  } else if (key == "double_q") {
    if (val == "true" || val == "1") c.double_q = true;
    else if (val == "false" || val == "0") c.double_q = false;
    else throw ContractError("config: double_q must be true|false");
  } else if (key == "ame_k") c.ame_k = as_u();
  else if (key == "pgd_steps") c.pgd_steps = static_cast<int>(as_i());
  else if (key == "eps_fgsm1") c.eps_fgsm1 = as_d();
  else if (key == "eps_fgsm2") c.eps_fgsm2 = as_d();
  else if (key == "eps_fgsm3") c.eps_fgsm3 = as_d();
  else if (key == "eps_fgsm4") c.eps_fgsm4 = as_d();
  else if (key == "checkpoint_interval") c.checkpoint_interval = as_i();
  else if (key == "latent_export_interval") c.latent_export_interval = as_i();
  else throw ContractError("config: unknown key '" + key + "'");
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = RunConfig{}) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      bool blank = true;
      for (char ch : line)
        if (!std::isspace(static_cast<unsigned char>(ch))) blank = false;
      if (blank) continue;
      throw ContractError("config: malformed line '" + line + "'");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    apply_config_line(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = RunConfig{}) {
  std::ifstream is(path);
  if (!is) throw ContractError("config: cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), base);
}

// Per-environment hyperparameter presets; hallway-small is the desk-scale
// acceptance preset (corridors 3x4x5, shortened schedule).
inline RunConfig preset(const std::string& name) {
  RunConfig c;
  c.env = name;
  auto hallway = [&] {
    c.rnn_hidden_dim = 16;
    c.z_dim = 16;
    c.vae_hidden_dim = 32;
    c.qhead_hidden_dim = 16;
    c.alpha1 = 0.1;
    c.alpha2 = 0.001;
    c.alpha3 = 0.3;
    c.kappa = 5.0;
    c.c_max = 0.1;
    c.epsilon = 0.5;
    c.t_r = 700'000;
    c.total_steps = 2'000'000;
    c.eps_fgsm1 = 0.3;
    c.eps_fgsm2 = 0.4;
    c.eps_fgsm3 = 0.6;
    c.eps_fgsm4 = 0.7;
  };
  auto lbf = [&] {
    c.rnn_hidden_dim = 32;
    c.z_dim = 32;
    c.vae_hidden_dim = 64;
    c.qhead_hidden_dim = 32;
    c.alpha1 = 0.01;
    c.alpha2 = 0.001;
    c.alpha3 = 0.3;
    c.kappa = 5.0;
    c.c_max = 0.3;
    c.epsilon = 0.03;
    c.t_r = 800'000;
    c.total_steps = 2'000'000;
  };
  auto tj = [&] {
    c.rnn_hidden_dim = 32;
    c.z_dim = 32;
    c.vae_hidden_dim = 64;
    c.qhead_hidden_dim = 32;
    c.alpha1 = 0.01;
    c.alpha2 = 0.001;
    c.alpha3 = 0.3;
    c.kappa = 10.0;
    c.c_max = 0.3;
    c.epsilon = 0.0005;
    c.t_r = 1'000'000;
    c.total_steps = 2'000'000;
  };
  if (name == "hallway-small") {
    hallway();
    c.env = "hallway-3x4x5";
    c.total_steps = 300'000;
    c.t_r = 150'000;
  } else if (name == "hallway-4x5x6") {
    hallway();
  } else if (name == "hallway-3x3x4x4") {
    hallway();
    c.kappa = 10.0;
    c.c_max = 0.2;
    c.eps_fgsm1 = c.eps_fgsm2 = c.eps_fgsm3 = c.eps_fgsm4 = 0.0;
  } else if (name.rfind("hallway-", 0) == 0) {
    hallway();  // generic corridor spec keeps the hallway column
    c.eps_fgsm1 = c.eps_fgsm2 = c.eps_fgsm3 = c.eps_fgsm4 = 0.0;
    c.eps_fgsm1 = 0.3;
    c.eps_fgsm2 = 0.4;
    c.eps_fgsm3 = 0.6;
    c.eps_fgsm4 = 0.7;
  } else if (name == "lbf-3p1f") {
    lbf();
    c.eps_fgsm1 = 0.02;
    c.eps_fgsm2 = 0.25;
    c.eps_fgsm3 = 0.35;
    c.eps_fgsm4 = 0.4;
  } else if (name == "lbf-4p1f") {
    lbf();
    c.kappa = 10.0;
    c.epsilon = 0.05;
  } else if (name == "tj-slow") {
    tj();
    c.eps_fgsm1 = 0.0003;
    c.eps_fgsm2 = 0.0004;
    c.eps_fgsm3 = 0.0006;
    c.eps_fgsm4 = 0.0007;
  } else if (name == "tj-fast") {
    tj();
    c.c_max = 0.6;
    c.epsilon = 0.001;
  } else {
    throw ContractError("unknown preset: " + name);
  }
  c.validate();
  return c;
}

}  // namespace cromac
