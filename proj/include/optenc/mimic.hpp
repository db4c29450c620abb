#pragma once

#include <string>
#include <vector>

#include "optenc/core.hpp"
#include "optenc/dataset.hpp"
#include "optenc/encoder.hpp"
#include "optenc/spectral.hpp"

namespace optenc {

struct MimicConfig {
  double learning_rate = 2.0;
  std::size_t max_iters = 100000;
  double grad_tol = 1e-4;
  double fit_tol = 0.01;  // max-over-states TV distance accepted
  double tau = 1.0;       // Boltzmann temperature for Q-value experts; unused for policy experts
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("MimicConfig: learning_rate must be > 0");
  }
};

/// Tabular softmax policy fitted by cross-entropy.
struct MimicPolicy {
  std::size_t n_states = 0;
  std::size_t n_actions = kNumActions;
  std::vector<double> logits;  // |S| x |A|

  PolicyTable table() const {
    PolicyTable t(n_states, n_actions);
    for (StateId s = 0; s < n_states; ++s)
      softmax(std::span<const double>(logits.data() + s * n_actions, n_actions), t.row(s));
    return t;
  }
};

struct MimicFit {
  MimicPolicy policy;
  double worst_tv = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
};

class MimicFitError : public std::runtime_error {
 public:
  MimicFitError(const std::string& what, double worst_tv)
      : std::runtime_error(what), worst_tv_(worst_tv) {}
  double worst_tv() const noexcept { return worst_tv_; }

 private:
  double worst_tv_;
};

/// Minimizes -sum_s w_s sum_a target(a|s) log pi(a|s) over per-state logits
/// by gradient descent. The problem separates by state, so each state stops
/// once its own gradient is below grad_tol.
inline MimicFit fit_actor_mimic(const PolicyTable& targets, const MimicConfig& cfg,
                                const std::vector<double>& state_weights = {}) {
  cfg.validate();
  for (StateId s = 0; s < targets.n_states; ++s)
    if (!is_distribution(targets.row(s), 1e-6))
      throw std::invalid_argument("fit_actor_mimic: target row " + std::to_string(s) +
                                  " is not a distribution");
  const std::size_t A = targets.n_actions;
  MimicFit out;
  out.policy.n_states = targets.n_states;
  out.policy.n_actions = A;
  out.policy.logits.assign(targets.n_states * A, 0.0);
  std::vector<double> p(A);
  for (StateId s = 0; s < targets.n_states; ++s) {
    const double w = state_weights.empty() ? 1.0 : state_weights[s];
    std::span<double> z(out.policy.logits.data() + s * A, A);
    auto t = targets.row(s);
    double g = 0.0;
    std::size_t it = 0;
    for (; it < cfg.max_iters; ++it) {
      softmax(z, p);
      g = 0.0;
      for (Action a = 0; a < A; ++a) g = std::max(g, std::abs(w * (p[a] - t[a])));
      if (g < cfg.grad_tol) break;
      for (Action a = 0; a < A; ++a) z[a] -= cfg.learning_rate * w * (p[a] - t[a]);
    }
    softmax(z, p);
    out.worst_tv = std::max(out.worst_tv, total_variation(p, t));
    out.grad_norm = std::max(out.grad_norm, g);
    out.iterations = std::max(out.iterations, it);
  }
  if (out.worst_tv > cfg.fit_tol)
    throw MimicFitError("fit_actor_mimic: worst-state TV distance " + std::to_string(out.worst_tv) +
                            " exceeds tolerance " + std::to_string(cfg.fit_tol),
                        out.worst_tv);
  return out;
}

/// Fits one standalone policy per distilled table; undefined states get uniform targets.
inline std::vector<MimicFit> extract_distilled(const DistilledSet& distilled, const MimicConfig& cfg) {
  std::vector<MimicFit> out;
  out.reserve(distilled.n_distilled);
  for (const auto& table : distilled.policies) {
    PolicyTable targets = table;
    for (StateId s = 0; s < targets.n_states; ++s)
      if (!distilled.defined[s]) {
        auto row = targets.row(s);
        std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(targets.n_actions));
      }
    out.push_back(fit_actor_mimic(targets, cfg));
  }
  return out;
}

/// Per-state arithmetic mean of each state's expert rows in the dataset,
/// weighted by row multiplicity. Unvisited states are uniform.
inline PolicyTable dataset_mean_policy(const PolicyDataset& d, std::vector<double>* mass_out = nullptr) {
  PolicyTable mean(d.n_states, d.n_actions, 0.0);
  std::vector<double> mass(d.n_states, 0.0);
  for (std::size_t r = 0; r < d.rows(); ++r) {
    StateId s = d.states[r];
    for (std::size_t j = 0; j < d.n_options; ++j) {
      auto e = d.expert(r, j);
      for (Action a = 0; a < d.n_actions; ++a) mean.at(s, a) += d.weight(r) * e[a];
    }
    mass[s] += d.weight(r) * static_cast<double>(d.n_options);
  }
  for (StateId s = 0; s < d.n_states; ++s) {
    auto row = mean.row(s);
    if (mass[s] > 0.0)
      for (double& v : row) v /= mass[s];
    else
      std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(d.n_actions));
  }
  if (mass_out) *mass_out = std::move(mass);
  return mean;
}

/// Single policy fitted jointly to all N experts. Per state the summed
/// cross-entropy has gradient mass_s * (pi - mean_s): the objective separates
/// by state and its minimizer is the per-state expert mean, so the fit runs
/// against that mean directly.
inline MimicFit distill_to_single(const PolicyDataset& d, const MimicConfig& cfg) {
  return fit_actor_mimic(dataset_mean_policy(d), cfg);
}

/// Per-state arithmetic mean of a nonempty subset of options.
inline PolicyTable average_policies(const std::vector<const OptionPolicy*>& subset) {
  if (subset.empty()) throw std::invalid_argument("average_policies: empty subset");
  PolicyTable out(subset.front()->table.n_states, subset.front()->table.n_actions, 0.0);
  for (const auto* o : subset)
    for (std::size_t k = 0; k < out.probs.size(); ++k) out.probs[k] += o->table.probs[k];
  for (double& v : out.probs) v /= static_cast<double>(subset.size());
  return out;
}

inline PolicyTable average_policies(const OptionSet& subset) {
  std::vector<const OptionPolicy*> ptrs;
  for (const auto& o : subset) ptrs.push_back(&o);
  return average_policies(ptrs);
}

}  // namespace optenc
