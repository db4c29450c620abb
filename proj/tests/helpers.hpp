#pragma once

#include <string>
#include <vector>

#include "optenc/core.hpp"
#include "optenc/dataset.hpp"
#include "optenc/gridworld.hpp"
#include "optenc/spectral.hpp"

namespace optenc::testing {

inline std::string source_path(const std::string& rel) { return std::string(OPTENC_SOURCE_DIR) + "/" + rel; }

inline GridMap four_room() { return load_map_file(source_path("maps/four_room_20.txt")); }

inline GridMap open_grid(std::size_t rows, std::size_t cols) {
  std::string t;
  for (std::size_t r = 0; r < rows; ++r) t += std::string(cols, '.') + "\n";
  return load_map(t, "open");
}

/// Random connected map: an open grid with walls sprinkled in, accepted only
/// when still connected.
inline GridMap random_map(Rng& rng, std::size_t max_side = 7) {
  for (;;) {
    std::size_t h = 1 + rng.index(max_side), w = 1 + rng.index(max_side);
    std::string t;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) t += rng.uniform() < 0.2 ? '#' : '.';
      t += "\n";
    }
    try {
      return load_map(t, "random");
    } catch (const std::invalid_argument&) {
    }
  }
}

inline std::vector<double> random_distribution(Rng& rng, std::size_t n, double sparsity = 0.0) {
  std::vector<double> p(n);
  double sum = 0.0;
  for (auto& v : p) {
    v = rng.uniform() < sparsity ? 0.0 : rng.uniform() + 1e-3;
    sum += v;
  }
  if (sum == 0.0) {
    p[rng.index(n)] = 1.0;
    return p;
  }
  for (auto& v : p) v /= sum;
  return p;
}

inline PolicyTable random_policy(Rng& rng, std::size_t states, std::size_t actions = kNumActions) {
  PolicyTable t(states, actions);
  for (StateId s = 0; s < states; ++s) {
    auto p = random_distribution(rng, actions);
    for (Action a = 0; a < actions; ++a) t.at(s, a) = p[a];
  }
  return t;
}

inline OptionSet random_options(Rng& rng, std::size_t n, std::size_t states) {
  OptionSet out;
  for (std::size_t j = 0; j < n; ++j)
    out.push_back({j, random_policy(rng, states), {Provenance::Kind::External, j, 1, {}}, std::nullopt});
  return out;
}

inline OptionSet options_from(const std::vector<PolicyTable>& tables) {
  OptionSet out;
  for (std::size_t j = 0; j < tables.size(); ++j)
    out.push_back({j, tables[j], {Provenance::Kind::External, j, 1, {}}, std::nullopt});
  return out;
}

/// States 0..n-1 each with the given expert rows; a dataset with no map behind it.
inline PolicyDataset dataset_of(const std::vector<PolicyTable>& experts) {
  PolicyDataset d;
  d.n_states = experts.front().n_states;
  d.n_options = experts.size();
  d.n_actions = experts.front().n_actions;
  d.mode = "synthetic";
  auto options = options_from(experts);
  for (StateId s = 0; s < d.n_states; ++s) d.append(s, options);
  return d;
}

inline PolicyTable one_hot_policy(std::size_t states, Action a, std::size_t actions = kNumActions) {
  PolicyTable t(states, actions, 0.0);
  for (StateId s = 0; s < states; ++s) t.at(s, a) = 1.0;
  return t;
}

}  // namespace optenc::testing
