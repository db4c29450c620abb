#pragma once

#include <string>
#include <vector>

#include "optenc/core.hpp"
#include "optenc/gridworld.hpp"
#include "optenc/spectral.hpp"

namespace optenc {

/// Rows of (state, N expert action distributions).
struct PolicyDataset {
  std::size_t n_states = 0;  // size of the state space the rows index into
  std::size_t n_options = 0;
  std::size_t n_actions = kNumActions;
  std::vector<StateId> states;
  std::vector<double> experts;  // rows x N x A
  std::vector<double> weights;  // empty means unit weight
  std::string mode;
  std::uint64_t seed = 0;

  std::size_t rows() const { return states.size(); }
  std::size_t block() const { return n_options * n_actions; }
  double weight(std::size_t r) const { return weights.empty() ? 1.0 : weights[r]; }

  std::span<const double> expert(std::size_t r, std::size_t j) const {
    return {experts.data() + r * block() + j * n_actions, n_actions};
  }
  std::span<const double> row_block(std::size_t r) const {
    return {experts.data() + r * block(), block()};
  }

  void append(StateId s, const OptionSet& options) {
    states.push_back(s);
    for (const auto& o : options) {
      auto p = o.table.row(s);
      experts.insert(experts.end(), p.begin(), p.end());
    }
  }

  void validate(double tol = 1e-9) const {
    if (experts.size() != rows() * block())
      throw std::invalid_argument("PolicyDataset: expert matrix shape mismatch");
    if (!weights.empty() && weights.size() != rows())
      throw std::invalid_argument("PolicyDataset: weight count mismatch");
    for (std::size_t r = 0; r < rows(); ++r) {
      if (states[r] >= n_states) throw std::invalid_argument("PolicyDataset: state out of range");
      for (std::size_t j = 0; j < n_options; ++j)
        if (!is_distribution(expert(r, j), tol))
          throw std::invalid_argument("PolicyDataset: row " + std::to_string(r) + " option " +
                                      std::to_string(j) + " is not a distribution");
    }
  }
};

inline void check_options(const OptionSet& options) {
  if (options.empty()) throw std::invalid_argument("option set is empty");
  for (const auto& o : options)
    if (o.table.n_states != options.front().table.n_states ||
        o.table.n_actions != options.front().table.n_actions)
      throw std::invalid_argument("option set mixes state/action spaces");
}

/// Algorithm-1 style collection: for each option reset once, roll L steps
/// following it, and record every visited state with all N expert rows.
inline PolicyDataset collect_rollout_dataset(const OptionSet& options, const GridMap& map,
                                             const EnvConfig& cfg, std::size_t steps_per_option,
                                             std::uint64_t seed) {
  check_options(options);
  if (steps_per_option < 1) throw std::invalid_argument("collect_rollout_dataset: L must be >= 1");
  PolicyDataset d;
  d.n_states = map.num_states();
  d.n_options = options.size();
  d.n_actions = options.front().table.n_actions;
  d.mode = "rollout";
  d.seed = seed;
  Rng rng(seed);
  for (const auto& opt : options) {
    StateId s = rng.index(map.num_states());
    for (std::size_t i = 0; i < steps_per_option; ++i) {
      d.append(s, options);
      Action a = rng.categorical(opt.table.row(s));
      s = sample_next_state(map, cfg, s, a, rng);
    }
  }
  return d;
}

/// One row per FREE state in free-index order.
inline PolicyDataset collect_exhaustive_dataset(const OptionSet& options, const GridMap& map) {
  check_options(options);
  if (options.front().table.n_states != map.num_states())
    throw std::invalid_argument("collect_exhaustive_dataset: options do not match map");
  PolicyDataset d;
  d.n_states = map.num_states();
  d.n_options = options.size();
  d.n_actions = options.front().table.n_actions;
  d.mode = "exhaustive";
  for (StateId s : enumerate_free_states(map)) d.append(s, options);
  return d;
}

}  // namespace optenc
