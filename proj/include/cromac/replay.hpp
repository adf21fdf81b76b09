#pragma once
#include <deque>
#include <vector>

#include "cromac/rng.hpp"
#include "cromac/tensor.hpp"

namespace cromac {

// One whole episode: T transitions plus the trailing observation/state frame.
struct Episode {
  std::vector<std::vector<Tensor>> obs;  // [T+1][n_agents]
  std::vector<Tensor> states;            // [T+1]
  std::vector<std::vector<int>> actions; // [T][n_agents]
  std::vector<double> rewards;           // [T]
  bool win = false;

  std::size_t length() const { return rewards.size(); }
};

// Batch of episodes padded to the longest one. Assembly produces the stacked
// per-timestep tensors the learner consumes; agent rows are laid out
// episode-major (row = b * n_agents + i). The network input per agent is
// obs ++ one-hot(previous action) ++ one-hot(agent id).
struct EpisodeBatch {
  std::vector<Episode> episodes;
  std::size_t n_agents = 0;
  std::size_t n_actions = 0;
  std::size_t obs_w = 0;
  std::size_t state_w = 0;
  std::size_t max_len = 0;

  static EpisodeBatch assemble(std::vector<Episode> eps, std::size_t n_actions) {
    if (eps.empty()) throw ContractError("EpisodeBatch: empty batch");
    EpisodeBatch b;
    b.n_agents = eps[0].obs[0].size();
    b.n_actions = n_actions;
    b.obs_w = eps[0].obs[0][0].size();
    b.state_w = eps[0].states[0].size();
    for (const auto& e : eps) {
      if (e.length() == 0 || e.obs.size() != e.length() + 1)
        throw ContractError("EpisodeBatch: malformed episode");
      b.max_len = std::max(b.max_len, e.length());
    }
    b.episodes = std::move(eps);
    return b;
  }

  std::size_t size() const { return episodes.size(); }
  std::size_t input_width() const { return obs_w + n_actions + n_agents; }

  // [B*N, obs_w + n_actions + n_agents]; zero past an episode's end
  Tensor inputs_at(std::size_t t) const {
    const std::size_t B = size(), w = input_width();
    Tensor x(B * n_agents, w);
    for (std::size_t b = 0; b < B; ++b) {
      if (t >= episodes[b].obs.size()) continue;
      for (std::size_t i = 0; i < n_agents; ++i) {
        const Tensor& o = episodes[b].obs[t][i];
        for (std::size_t c = 0; c < obs_w; ++c) x.data[(b * n_agents + i) * w + c] = o[c];
        if (t > 0 && t - 1 < episodes[b].actions.size()) {
          const int prev = episodes[b].actions[t - 1][i];
          x.data[(b * n_agents + i) * w + obs_w + static_cast<std::size_t>(prev)] = 1.0;
        }
        x.data[(b * n_agents + i) * w + obs_w + n_actions + i] = 1.0;
      }
    }
    return x;
  }

  Tensor state_at(std::size_t t) const {
    const std::size_t B = size();
    Tensor s(B, state_w);
    for (std::size_t b = 0; b < B; ++b) {
      if (t >= episodes[b].states.size()) continue;
      for (std::size_t c = 0; c < state_w; ++c) s.data[b * state_w + c] = episodes[b].states[t][c];
    }
    return s;
  }

  std::vector<std::size_t> actions_at(std::size_t t) const {
    std::vector<std::size_t> a(size() * n_agents, 0);
    for (std::size_t b = 0; b < size(); ++b) {
      if (t >= episodes[b].length()) continue;
      for (std::size_t i = 0; i < n_agents; ++i)
        a[b * n_agents + i] = static_cast<std::size_t>(episodes[b].actions[t][i]);
    }
    return a;
  }

  Tensor rewards_at(std::size_t t) const {
    Tensor r(size(), 1);
    for (std::size_t b = 0; b < size(); ++b)
      if (t < episodes[b].length()) r.data[b] = episodes[b].rewards[t];
    return r;
  }

  // 1 while t is a valid transition of the episode
  Tensor mask_at(std::size_t t) const {
    Tensor m(size(), 1);
    for (std::size_t b = 0; b < size(); ++b)
      if (t < episodes[b].length()) m.data[b] = 1.0;
    return m;
  }

  // bootstrap factor: 1 unless t is the episode's final transition
  Tensor continuing_at(std::size_t t) const {
    Tensor m(size(), 1);
    for (std::size_t b = 0; b < size(); ++b)
      if (t + 1 < episodes[b].length()) m.data[b] = 1.0;
    return m;
  }

  double total_mask() const {
    double s = 0.0;
    for (const auto& e : episodes) s += static_cast<double>(e.length());
    return s;
  }
};

// FIFO episode store with uniform with-replacement sampling.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t n_actions)
      : capacity_(capacity), n_actions_(n_actions) {
    if (capacity_ == 0) throw ContractError("ReplayBuffer: capacity must be >= 1");
  }

  void insert(Episode e) {
    if (store_.size() == capacity_) store_.pop_front();
    store_.push_back(std::move(e));
  }

  EpisodeBatch sample(std::size_t batch_size, Rng& rng) const {
    if (store_.empty()) throw ContractError("ReplayBuffer: sample from empty buffer");
    std::vector<Episode> picked;
    picked.reserve(batch_size);
    for (std::size_t k = 0; k < batch_size; ++k)
      picked.push_back(store_[rng.uniform_int(store_.size())]);
    return EpisodeBatch::assemble(std::move(picked), n_actions_);
  }

  std::size_t size() const { return store_.size(); }
  const Episode& at(std::size_t i) const { return store_.at(i); }

 private:
  std::size_t capacity_;
  std::size_t n_actions_;
  std::deque<Episode> store_;
};

}  // namespace cromac
