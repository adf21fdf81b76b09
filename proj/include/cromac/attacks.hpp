#pragma once
#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "cromac/rng.hpp"
#include "cromac/tensor.hpp"

namespace cromac {

enum class AttackKind { Natural, Random, Fgsm, Pgd };

struct AttackSpec {
  AttackKind kind = AttackKind::Natural;
  double epsilon = 0.0;
  int steps = 3;  // pgd only

  AttackSpec() = default;
  AttackSpec(AttackKind k, double eps, int s = 3) : kind(k), epsilon(eps), steps(s) {
    if (epsilon < 0.0) throw ContractError("AttackSpec: epsilon must be >= 0");
    if (kind == AttackKind::Pgd && steps < 1) throw ContractError("AttackSpec: pgd steps >= 1");
  }

  static AttackKind parse_kind(const std::string& s) {
    if (s == "natural") return AttackKind::Natural;
    if (s == "random") return AttackKind::Random;
    if (s == "fgsm") return AttackKind::Fgsm;
    if (s == "pgd") return AttackKind::Pgd;
    throw ContractError("unknown attack kind: " + s);
  }
};

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Evaluates dJ/dm for every message at the given (possibly already perturbed)
// message values; J is the victim's attack objective. Entries for channels
// the adversary cannot touch are ignored.
using MessageGradFn = std::function<std::vector<Tensor>(const std::vector<Tensor>&)>;

// Single signed-gradient step of radius epsilon on every attackable channel.
inline std::vector<Tensor> fgsm_attack(const std::vector<Tensor>& messages,
                                       const MessageGradFn& grad_fn, double epsilon,
                                       const std::vector<bool>& attackable) {
  if (messages.size() != attackable.size())
    throw ContractError("fgsm_attack: mask size mismatch");
  if (epsilon < 0.0) throw ContractError("fgsm_attack: negative epsilon");
  std::vector<Tensor> out = messages;
  if (epsilon == 0.0) return out;
  std::vector<Tensor> grads = grad_fn(messages);
  if (grads.size() != messages.size()) throw ContractError("fgsm_attack: grad count mismatch");
  for (std::size_t j = 0; j < out.size(); ++j) {
    if (!attackable[j]) continue;
    check_same_shape(out[j], grads[j], "fgsm_attack");
    for (std::size_t i = 0; i < out[j].size(); ++i) out[j][i] += epsilon * sign0(grads[j][i]);
  }
  return out;
}

// Signed-gradient moves of radius epsilon/3 (the fixed per-step budget of
// the 3-round scheme), each projected back onto the epsilon ball around the
// original messages; `steps` controls how many rounds run.
inline std::vector<Tensor> pgd_attack(const std::vector<Tensor>& messages,
                                      const MessageGradFn& grad_fn, double epsilon, int steps,
                                      const std::vector<bool>& attackable) {
  if (steps < 1) throw ContractError("pgd_attack: steps must be >= 1");
  if (epsilon < 0.0) throw ContractError("pgd_attack: negative epsilon");
  std::vector<Tensor> cur = messages;
  if (epsilon == 0.0) return cur;
  const double step_radius = epsilon / 3.0;
  for (int s = 0; s < steps; ++s) {
    std::vector<Tensor> grads = grad_fn(cur);
    for (std::size_t j = 0; j < cur.size(); ++j) {
      if (!attackable[j]) continue;
      for (std::size_t i = 0; i < cur[j].size(); ++i) {
        double v = cur[j][i] + step_radius * sign0(grads[j][i]);
        v = std::min(messages[j][i] + epsilon, std::max(messages[j][i] - epsilon, v));
        cur[j][i] = v;
      }
    }
  }
  return cur;
}

// Uniform noise in [-epsilon, epsilon] per coordinate.
inline std::vector<Tensor> random_attack(const std::vector<Tensor>& messages, double epsilon,
                                         Rng& rng, const std::vector<bool>& attackable) {
  if (epsilon < 0.0) throw ContractError("random_attack: negative epsilon");
  std::vector<Tensor> out = messages;
  for (std::size_t j = 0; j < out.size(); ++j) {
    if (!attackable[j]) continue;
    for (std::size_t i = 0; i < out[j].size(); ++i) out[j][i] += rng.uniform(-epsilon, epsilon);
  }
  return out;
}

inline double max_message_deviation(const std::vector<Tensor>& original,
                                    const std::vector<Tensor>& perturbed) {
  if (original.size() != perturbed.size())
    throw ContractError("max_message_deviation: list size mismatch");
  double m = 0.0;
  for (std::size_t j = 0; j < original.size(); ++j)
    m = std::max(m, max_abs_diff(original[j], perturbed[j]));
  return m;
}

// ---- ablated message ensemble ----

struct AmePolicy {
  std::size_t k = 1;  // ablation size, 1 <= k <= N-1
};

// Uniform k-subset of {0..n-1} without replacement; returned sorted.
inline std::vector<std::size_t> ame_subset_sample(std::size_t n, std::size_t k, Rng& rng) {
  if (k > n) throw ContractError("ame_subset_sample: k exceeds message count");
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i)
    std::swap(pool[i], pool[i + rng.uniform_int(n - i)]);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline std::vector<Tensor> ame_subset_sample(const std::vector<Tensor>& messages, std::size_t k,
                                             Rng& rng) {
  std::vector<std::size_t> idx = ame_subset_sample(messages.size(), k, rng);
  std::vector<Tensor> out;
  out.reserve(k);
  for (std::size_t i : idx) out.push_back(messages[i]);
  return out;
}

inline void enumerate_subsets(std::size_t n, std::size_t k,
                              std::vector<std::vector<std::size_t>>& out) {
  std::vector<std::size_t> cur(k);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t start, std::size_t depth) {
    if (depth == k) {
      out.push_back(cur);
      return;
    }
    for (std::size_t i = start; i + (k - depth) <= n; ++i) {
      cur[depth] = i;
      rec(i + 1, depth + 1);
    }
  };
  if (k <= n) rec(0, 0);
}

// Plurality vote; ties break toward the lowest action index.
inline int ame_vote(const std::vector<int>& base_actions) {
  if (base_actions.empty()) throw ContractError("ame_vote: empty ballot");
  int max_action = *std::max_element(base_actions.begin(), base_actions.end());
  std::vector<int> counts(static_cast<std::size_t>(max_action) + 1, 0);
  for (int a : base_actions) {
    if (a < 0) throw ContractError("ame_vote: negative action");
    ++counts[static_cast<std::size_t>(a)];
  }
  int best = 0;
  for (int a = 1; a <= max_action; ++a)
    if (counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(best)]) best = a;
  return best;
}

}  // namespace cromac
