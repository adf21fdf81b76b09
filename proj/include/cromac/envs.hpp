#pragma once
#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "cromac/rng.hpp"
#include "cromac/tensor.hpp"

namespace cromac {

struct EnvSpec {
  std::string name;
  std::size_t n_agents = 0;
  std::size_t n_actions = 0;
  std::size_t obs_width = 0;
  std::size_t state_width = 0;
  std::size_t episode_limit = 0;
};

struct StepResult {
  std::vector<Tensor> obs;  // one per agent
  Tensor state;
  double reward = 0.0;
  bool terminated = false;
  bool win = false;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual StepResult reset(Rng& rng) = 0;
  virtual StepResult step(const std::vector<int>& actions, Rng& rng) = 0;
  virtual Tensor observation(std::size_t agent) const = 0;
};

namespace detail {
inline void check_actions(const std::vector<int>& actions, const EnvSpec& s) {
  if (actions.size() != s.n_agents) throw ContractError(s.name + ": action count mismatch");
  for (int a : actions)
    if (a < 0 || a >= static_cast<int>(s.n_actions))
      throw ContractError(s.name + ": invalid action index");
}
}  // namespace detail

// ---- Hallway ----
//
// One corridor per agent, position 0 is the shared goal g. Everyone must step
// onto g in the same timestep for the +1 reward; if a nonempty proper subset
// stands on g the episode ends immediately with 0. Agents see only a one-hot
// of their own position. Actions: toward goal / stay / away from goal,
// clipped at the corridor ends.
class HallwayEnv final : public Env {
 public:
  explicit HallwayEnv(std::vector<std::size_t> lengths) : lengths_(std::move(lengths)) {
    if (lengths_.empty()) throw ContractError("hallway: needs at least one corridor");
    max_len_ = *std::max_element(lengths_.begin(), lengths_.end());
    spec_.name = "hallway";
    spec_.n_agents = lengths_.size();
    spec_.n_actions = 3;
    spec_.obs_width = max_len_ + 1;
    spec_.state_width = 0;
    for (std::size_t l : lengths_) spec_.state_width += l + 1;
    spec_.episode_limit = max_len_ + 10;
  }

  const EnvSpec& spec() const override { return spec_; }

  StepResult reset(Rng& rng) override {
    pos_.resize(lengths_.size());
    for (std::size_t i = 0; i < lengths_.size(); ++i)
      pos_[i] = 1 + rng.uniform_int(lengths_[i]);
    steps_ = 0;
    done_ = false;
    return snapshot(0.0, false, false);
  }

  StepResult step(const std::vector<int>& actions, Rng&) override {
    detail::check_actions(actions, spec_);
    if (done_) throw ContractError("hallway: step after termination");
    for (std::size_t i = 0; i < pos_.size(); ++i) {
      if (actions[i] == 0 && pos_[i] > 0) --pos_[i];
      if (actions[i] == 2 && pos_[i] < lengths_[i]) ++pos_[i];
    }
    ++steps_;
    const std::size_t at_goal =
        static_cast<std::size_t>(std::count(pos_.begin(), pos_.end(), std::size_t{0}));
    if (at_goal == pos_.size()) {
      done_ = true;
      return snapshot(1.0, true, true);
    }
    if (at_goal > 0) {
      done_ = true;
      return snapshot(0.0, true, false);
    }
    if (steps_ >= spec_.episode_limit) {
      done_ = true;
      return snapshot(0.0, true, false);
    }
    return snapshot(0.0, false, false);
  }

  Tensor observation(std::size_t agent) const override {
    if (agent >= pos_.size()) throw ContractError("hallway: agent index out of range");
    Tensor o = Tensor::zeros(spec_.obs_width);
    o[pos_[agent]] = 1.0;
    return o;
  }

  std::size_t position(std::size_t agent) const { return pos_[agent]; }
  std::size_t corridor_length(std::size_t agent) const { return lengths_[agent]; }

 private:
  StepResult snapshot(double r, bool term, bool win) const {
    StepResult s;
    for (std::size_t i = 0; i < pos_.size(); ++i) s.obs.push_back(observation(i));
    s.state = Tensor::zeros(spec_.state_width);
    std::size_t off = 0;
    for (std::size_t i = 0; i < pos_.size(); ++i) {
      s.state[off + pos_[i]] = 1.0;
      off += lengths_[i] + 1;
    }
    s.reward = r;
    s.terminated = term;
    s.win = win;
    return s;
  }

  EnvSpec spec_;
  std::vector<std::size_t> lengths_;
  std::size_t max_len_ = 0;
  std::vector<std::size_t> pos_;
  std::size_t steps_ = 0;
  bool done_ = false;
};

// ---- Level-Based Foraging (sighted-agent variant) ----
//
// 8x8 grid, one level-3 food, level-1 agents: at least three agents adjacent
// to the food must pick "load" in the same step to collect it. Agent 0
// observes the whole arrangement; everyone else sees zeros except their own
// position. Actions: none/up/down/left/right/load.
class LbfEnv final : public Env {
 public:
  LbfEnv(std::size_t n_agents, std::size_t episode_limit) : n_(n_agents) {
    spec_.name = "lbf";
    spec_.n_agents = n_;
    spec_.n_actions = 6;
    spec_.obs_width = 5 + 2 * n_;  // self xy, food xyl, all agents xy
    spec_.state_width = 4 + 2 * n_;
    spec_.episode_limit = episode_limit;
  }

  const EnvSpec& spec() const override { return spec_; }

  StepResult reset(Rng& rng) override {
    // food in the interior so three agents can surround it
    food_x_ = 1 + rng.uniform_int(kGrid - 2);
    food_y_ = 1 + rng.uniform_int(kGrid - 2);
    ax_.assign(n_, 0);
    ay_.assign(n_, 0);
    for (std::size_t i = 0; i < n_; ++i) {
      while (true) {
        const std::size_t x = rng.uniform_int(kGrid), y = rng.uniform_int(kGrid);
        if (x == food_x_ && y == food_y_) continue;
        bool clash = false;
        for (std::size_t j = 0; j < i; ++j)
          if (ax_[j] == x && ay_[j] == y) clash = true;
        if (!clash) {
          ax_[i] = x;
          ay_[i] = y;
          break;
        }
      }
    }
    steps_ = 0;
    done_ = false;
    return snapshot(0.0, false, false);
  }

  StepResult step(const std::vector<int>& actions, Rng&) override {
    detail::check_actions(actions, spec_);
    if (done_) throw ContractError("lbf: step after termination");
    // loading resolves before movement
    std::size_t load_level = 0;
    for (std::size_t i = 0; i < n_; ++i)
      if (actions[i] == 5 && adjacent_to_food(i)) load_level += 1;  // all agents are level 1
    if (load_level >= kFoodLevel) {
      done_ = true;
      ++steps_;
      return snapshot(1.0, true, true);
    }
    // simultaneous movement; blocked or contested targets leave agents in place
    std::vector<std::size_t> tx = ax_, ty = ay_;
    for (std::size_t i = 0; i < n_; ++i) {
      std::size_t x = ax_[i], y = ay_[i];
      if (actions[i] == 1 && y > 0) --y;
      if (actions[i] == 2 && y + 1 < kGrid) ++y;
      if (actions[i] == 3 && x > 0) --x;
      if (actions[i] == 4 && x + 1 < kGrid) ++x;
      if (x == food_x_ && y == food_y_) {
        x = ax_[i];
        y = ay_[i];
      }
      tx[i] = x;
      ty[i] = y;
    }
    for (std::size_t i = 0; i < n_; ++i) {
      bool blocked = false;
      for (std::size_t j = 0; j < n_; ++j) {
        if (j == i) continue;
        if (tx[j] == tx[i] && ty[j] == ty[i]) blocked = true;          // contested target
        if (ax_[j] == tx[i] && ay_[j] == ty[i] && tx[j] == ax_[j] && ty[j] == ay_[j])
          blocked = true;  // occupied by an agent that is not moving
      }
      if (blocked) {
        tx[i] = ax_[i];
        ty[i] = ay_[i];
      }
    }
    ax_ = tx;
    ay_ = ty;
    ++steps_;
    if (steps_ >= spec_.episode_limit) {
      done_ = true;
      return snapshot(0.0, true, false);
    }
    return snapshot(0.0, false, false);
  }

  std::pair<std::size_t, std::size_t> agent_position(std::size_t i) const {
    return {ax_.at(i), ay_.at(i)};
  }
  std::pair<std::size_t, std::size_t> food_position() const { return {food_x_, food_y_}; }

  // scripted scenario setup (distinct in-bounds cells, food excluded)
  void set_layout(const std::vector<std::pair<std::size_t, std::size_t>>& agents,
                  std::pair<std::size_t, std::size_t> food) {
    if (agents.size() != n_) throw ContractError("lbf: layout agent count");
    food_x_ = food.first;
    food_y_ = food.second;
    ax_.resize(n_);
    ay_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      ax_[i] = agents[i].first;
      ay_[i] = agents[i].second;
      if (ax_[i] >= kGrid || ay_[i] >= kGrid || (ax_[i] == food_x_ && ay_[i] == food_y_))
        throw ContractError("lbf: bad layout cell");
    }
    steps_ = 0;
    done_ = false;
  }

  Tensor observation(std::size_t agent) const override {
    if (agent >= n_) throw ContractError("lbf: agent index out of range");
    Tensor o = Tensor::zeros(spec_.obs_width);
    const double s = 1.0 / static_cast<double>(kGrid - 1);
    o[0] = static_cast<double>(ax_[agent]) * s;
    o[1] = static_cast<double>(ay_[agent]) * s;
    if (agent == 0) {  // only the sighted agent carries the map
      o[2] = static_cast<double>(food_x_) * s;
      o[3] = static_cast<double>(food_y_) * s;
      o[4] = static_cast<double>(kFoodLevel);
      for (std::size_t j = 0; j < n_; ++j) {
        o[5 + 2 * j] = static_cast<double>(ax_[j]) * s;
        o[6 + 2 * j] = static_cast<double>(ay_[j]) * s;
      }
    }
    return o;
  }

 private:
  static constexpr std::size_t kGrid = 8;
  static constexpr std::size_t kFoodLevel = 3;

  bool adjacent_to_food(std::size_t i) const {
    const long dx = static_cast<long>(ax_[i]) - static_cast<long>(food_x_);
    const long dy = static_cast<long>(ay_[i]) - static_cast<long>(food_y_);
    return std::abs(dx) + std::abs(dy) == 1;
  }

  StepResult snapshot(double r, bool term, bool win) const {
    StepResult s;
    for (std::size_t i = 0; i < n_; ++i) s.obs.push_back(observation(i));
    s.state = Tensor::zeros(spec_.state_width);
    const double sc = 1.0 / static_cast<double>(kGrid - 1);
    s.state[0] = static_cast<double>(food_x_) * sc;
    s.state[1] = static_cast<double>(food_y_) * sc;
    s.state[2] = static_cast<double>(kFoodLevel);
    s.state[3] = done_ && win ? 0.0 : 1.0;  // food still present
    for (std::size_t j = 0; j < n_; ++j) {
      s.state[4 + 2 * j] = static_cast<double>(ax_[j]) * sc;
      s.state[5 + 2 * j] = static_cast<double>(ay_[j]) * sc;
    }
    s.reward = r;
    s.terminated = term;
    s.win = win;
    return s;
  }

  EnvSpec spec_;
  std::size_t n_;
  std::size_t food_x_ = 0, food_y_ = 0;
  std::vector<std::size_t> ax_, ay_;
  std::size_t steps_ = 0;
  bool done_ = false;
};

// ---- Traffic Junction (easy: one junction, vision 0) ----
//
// Two one-way roads cross on a 7x7 grid. Cars spawn at the road entries with
// probability add_rate (bounded by the car cap), follow their route, and pick
// gas or brake each step. Reward is -0.01 per car per step alive and -10 per
// car standing in a multi-occupied cell; an episode is won when it finishes
// without any collision.
class TrafficJunctionEnv final : public Env {
 public:
  TrafficJunctionEnv(std::size_t n_cars, double add_rate)
      : n_(n_cars), add_rate_(add_rate) {
    spec_.name = "traffic_junction";
    spec_.n_agents = n_;
    spec_.n_actions = 2;  // gas, brake
    spec_.obs_width = 1 + kDim * kDim + 2;
    spec_.state_width = kDim * kDim + 3 * n_;
    spec_.episode_limit = 20;
  }

  const EnvSpec& spec() const override { return spec_; }

  StepResult reset(Rng& rng) override {
    active_.assign(n_, false);
    route_.assign(n_, 0);
    idx_.assign(n_, 0);
    age_.assign(n_, 0);
    steps_ = 0;
    done_ = false;
    collided_ = false;
    spawn(rng);
    return snapshot(0.0, false, false);
  }

  StepResult step(const std::vector<int>& actions, Rng& rng) override {
    detail::check_actions(actions, spec_);
    if (done_) throw ContractError("traffic_junction: step after termination");
    double reward = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      if (!active_[i]) continue;
      if (actions[i] == 0) {  // gas
        if (idx_[i] + 1 >= kDim) {
          active_[i] = false;  // leaves the map
          continue;
        }
        ++idx_[i];
      }
      ++age_[i];
      reward += -0.01 * static_cast<double>(age_[i]);
    }
    // collision check on shared cells
    for (std::size_t i = 0; i < n_; ++i) {
      if (!active_[i]) continue;
      for (std::size_t j = i + 1; j < n_; ++j) {
        if (!active_[j]) continue;
        if (cell_of(i) == cell_of(j)) {
          reward += -10.0 * 2.0;
          collided_ = true;
        }
      }
    }
    spawn(rng);
    ++steps_;
    if (steps_ >= spec_.episode_limit) {
      done_ = true;
      return snapshot(reward, true, !collided_);
    }
    return snapshot(reward, false, false);
  }

  Tensor observation(std::size_t agent) const override {
    if (agent >= n_) throw ContractError("traffic_junction: agent index out of range");
    Tensor o = Tensor::zeros(spec_.obs_width);
    if (active_[agent]) {
      o[0] = 1.0;
      o[1 + cell_of(agent)] = 1.0;  // vision 0: exactly the own cell
      o[1 + kDim * kDim + route_[agent]] = 1.0;
    }
    return o;
  }

  bool any_collision() const { return collided_; }

 private:
  static constexpr std::size_t kDim = 7;
  static constexpr std::size_t kMid = kDim / 2;

  std::size_t cell_of(std::size_t i) const {
    // route 0: west->east along the middle row; route 1: north->south column
    return route_[i] == 0 ? kMid * kDim + idx_[i] : idx_[i] * kDim + kMid;
  }

  void spawn(Rng& rng) {
    for (std::size_t r = 0; r < 2; ++r) {
      if (rng.uniform() >= add_rate_) continue;
      std::size_t active_count = 0;
      for (bool a : active_) active_count += a ? 1 : 0;
      if (active_count >= n_) continue;
      bool entry_busy = false;
      for (std::size_t i = 0; i < n_; ++i)
        if (active_[i] && route_[i] == r && idx_[i] == 0) entry_busy = true;
      if (entry_busy) continue;
      for (std::size_t i = 0; i < n_; ++i)
        if (!active_[i]) {
          active_[i] = true;
          route_[i] = r;
          idx_[i] = 0;
          age_[i] = 0;
          break;
        }
    }
  }

  StepResult snapshot(double r, bool term, bool win) const {
    StepResult s;
    for (std::size_t i = 0; i < n_; ++i) s.obs.push_back(observation(i));
    s.state = Tensor::zeros(spec_.state_width);
    for (std::size_t i = 0; i < n_; ++i) {
      if (active_[i]) s.state[cell_of(i)] += 1.0;
      s.state[kDim * kDim + 3 * i + 0] = active_[i] ? 1.0 : 0.0;
      s.state[kDim * kDim + 3 * i + 1] =
          static_cast<double>(idx_[i]) / static_cast<double>(kDim - 1);
      s.state[kDim * kDim + 3 * i + 2] = static_cast<double>(route_[i]);
    }
    s.reward = r;
    s.terminated = term;
    s.win = win;
    return s;
  }

  EnvSpec spec_;
  std::size_t n_;
  double add_rate_;
  std::vector<bool> active_;
  std::vector<std::size_t> route_, idx_, age_;
  std::size_t steps_ = 0;
  bool done_ = false;
  bool collided_ = false;
};

// Environment ids: hallway-<l1>x<l2>x..., lbf-3p1f, lbf-4p1f, tj-slow, tj-fast.
inline std::unique_ptr<Env> make_env(const std::string& id) {
  if (id.rfind("hallway-", 0) == 0) {
    std::vector<std::size_t> lengths;
    std::size_t v = 0;
    bool have = false;
    for (std::size_t i = 8; i <= id.size(); ++i) {
      if (i < id.size() && id[i] >= '0' && id[i] <= '9') {
        v = v * 10 + static_cast<std::size_t>(id[i] - '0');
        have = true;
      } else if (i == id.size() || id[i] == 'x') {
        if (!have) throw ContractError("bad hallway id: " + id);
        lengths.push_back(v);
        v = 0;
        have = false;
      } else {
        throw ContractError("bad hallway id: " + id);
      }
    }
    return std::make_unique<HallwayEnv>(std::move(lengths));
  }
  if (id == "lbf-3p1f") return std::make_unique<LbfEnv>(3, 25);
  if (id == "lbf-4p1f") return std::make_unique<LbfEnv>(4, 15);
  if (id == "tj-slow") return std::make_unique<TrafficJunctionEnv>(5, 0.3);
  if (id == "tj-fast") return std::make_unique<TrafficJunctionEnv>(4, 0.4);
  throw ContractError("unknown environment id: " + id);
}

}  // namespace cromac
