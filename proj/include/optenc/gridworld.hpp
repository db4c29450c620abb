#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "optenc/core.hpp"

namespace optenc {

enum class Cell : std::uint8_t { Wall, Free };

/// Action encoding shared by every module.
enum Move : Action { Up = 0, Down = 1, Left = 2, Right = 3 };

inline constexpr std::array<int, kNumActions> kRowDelta = {-1, 1, 0, 0};
inline constexpr std::array<int, kNumActions> kColDelta = {0, 0, -1, 1};

struct CellPos {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const CellPos&) const = default;
};

/// Static layout of a grid world. FREE cells are numbered row-major.
class GridMap {
 public:
  std::string name;

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t num_states() const { return cell_of_state_.size(); }

  Cell cell(std::size_t row, std::size_t col) const { return cells_[row * width_ + col]; }
  bool is_free(std::size_t row, std::size_t col) const { return cell(row, col) == Cell::Free; }

  CellPos position(StateId s) const { return cell_of_state_.at(s); }

  std::optional<StateId> state_at(std::size_t row, std::size_t col) const {
    if (row >= height_ || col >= width_) return std::nullopt;
    long id = state_of_cell_[row * width_ + col];
    if (id < 0) return std::nullopt;
    return static_cast<StateId>(id);
  }

  /// State reached when move `a` executes from `s`; blocked moves stay put.
  StateId neighbor(StateId s, Action a) const { return neighbor_[s * kNumActions + a]; }

  friend GridMap load_map(std::string_view text, std::string name);

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<Cell> cells_;
  std::vector<long> state_of_cell_;
  std::vector<CellPos> cell_of_state_;
  std::vector<StateId> neighbor_;
};

/// Parses rows of '#' (wall) and '.' (free). Rejects ragged, empty or
/// disconnected layouts.
inline GridMap load_map(std::string_view text, std::string name = "map") {
  std::vector<std::string> rows;
  std::string line;
  std::istringstream in{std::string(text)};
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    rows.push_back(line);
  }
  if (rows.empty()) throw std::invalid_argument("load_map: no rows");

  GridMap m;
  m.name = std::move(name);
  m.height_ = rows.size();
  m.width_ = rows.front().size();
  m.cells_.reserve(m.height_ * m.width_);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.width_)
      throw std::invalid_argument("load_map: ragged row " + std::to_string(r) + " (length " +
                                  std::to_string(rows[r].size()) + ", expected " +
                                  std::to_string(m.width_) + ")");
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      char ch = rows[r][c];
      if (ch == '#')
        m.cells_.push_back(Cell::Wall);
      else if (ch == '.')
        m.cells_.push_back(Cell::Free);
      else
        throw std::invalid_argument(std::string("load_map: unexpected character '") + ch +
                                    "' at row " + std::to_string(r));
    }
  }

  m.state_of_cell_.assign(m.cells_.size(), -1);
  for (std::size_t r = 0; r < m.height_; ++r)
    for (std::size_t c = 0; c < m.width_; ++c)
      if (m.is_free(r, c)) {
        m.state_of_cell_[r * m.width_ + c] = static_cast<long>(m.cell_of_state_.size());
        m.cell_of_state_.push_back({r, c});
      }
  if (m.cell_of_state_.empty()) throw std::invalid_argument("load_map: no free cells");

  const std::size_t n = m.cell_of_state_.size();
  m.neighbor_.resize(n * kNumActions);
  for (StateId s = 0; s < n; ++s) {
    auto [r, c] = m.cell_of_state_[s];
    for (Action a = 0; a < kNumActions; ++a) {
      long nr = static_cast<long>(r) + kRowDelta[a];
      long nc = static_cast<long>(c) + kColDelta[a];
      auto dest = (nr < 0 || nc < 0) ? std::nullopt
                                     : m.state_at(static_cast<std::size_t>(nr),
                                                  static_cast<std::size_t>(nc));
      m.neighbor_[s * kNumActions + a] = dest.value_or(s);
    }
  }

  std::vector<bool> seen(n, false);
  std::vector<StateId> stack{0};
  seen[0] = true;
  std::size_t reached = 1;
  while (!stack.empty()) {
    StateId s = stack.back();
    stack.pop_back();
    for (Action a = 0; a < kNumActions; ++a) {
      StateId t = m.neighbor(s, a);
      if (!seen[t]) {
        seen[t] = true;
        ++reached;
        stack.push_back(t);
      }
    }
  }
  if (reached != n)
    throw std::invalid_argument("load_map: free cells are disconnected (" +
                                std::to_string(reached) + " of " + std::to_string(n) +
                                " reachable from state 0)");
  return m;
}

inline GridMap load_map_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open map file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  auto slash = path.find_last_of('/');
  return load_map(ss.str(), slash == std::string::npos ? path : path.substr(slash + 1));
}

inline std::vector<StateId> enumerate_free_states(const GridMap& map) {
  std::vector<StateId> out(map.num_states());
  for (StateId s = 0; s < out.size(); ++s) out[s] = s;
  return out;
}

struct EnvConfig {
  double intended_prob = 0.8;
  std::size_t n_actions = kNumActions;
  std::size_t episode_cap = 3000;
  StateId goal = 0;
  double goal_reward = 1.0;
  double step_reward = 0.0;
  double discount = 0.99;

  void validate() const {
    if (!(intended_prob >= 0.0 && intended_prob <= 1.0))
      throw std::invalid_argument("EnvConfig: intended_prob outside [0,1]");
    if (episode_cap < 1) throw std::invalid_argument("EnvConfig: episode_cap must be >= 1");
    if (!(discount > 0.0 && discount < 1.0))
      throw std::invalid_argument("EnvConfig: discount outside (0,1)");
    if (n_actions != kNumActions) throw std::invalid_argument("EnvConfig: n_actions must be 4");
  }
};

struct Transition {
  StateId next;
  double prob;
};

/// Exact next-state distribution: the intended move runs with probability
/// intended_prob; otherwise a move drawn uniformly from all four runs.
/// Entries are merged per destination and sorted by state id.
inline std::vector<Transition> transition_distribution(const GridMap& map, const EnvConfig& cfg,
                                                       StateId s, Action a) {
  if (s >= map.num_states()) throw std::invalid_argument("transition_distribution: bad state");
  if (a >= kNumActions) throw std::invalid_argument("transition_distribution: bad action");
  std::array<double, kNumActions> move_prob;
  move_prob.fill((1.0 - cfg.intended_prob) / static_cast<double>(kNumActions));
  move_prob[a] += cfg.intended_prob;

  std::vector<Transition> out;
  out.reserve(kNumActions);
  for (Action m = 0; m < kNumActions; ++m) {
    if (move_prob[m] == 0.0) continue;
    StateId t = map.neighbor(s, m);
    auto it = std::find_if(out.begin(), out.end(), [t](const Transition& x) { return x.next == t; });
    if (it == out.end())
      out.push_back({t, move_prob[m]});
    else
      it->prob += move_prob[m];
  }
  std::sort(out.begin(), out.end(),
            [](const Transition& x, const Transition& y) { return x.next < y.next; });
  return out;
}

/// Samples the executed move and returns the resulting state.
inline StateId sample_next_state(const GridMap& map, const EnvConfig& cfg, StateId s, Action a,
                                 Rng& rng) {
  Action executed = rng.uniform() < cfg.intended_prob ? a : rng.index(kNumActions);
  return map.neighbor(s, executed);
}

struct EnvState {
  StateId state = 0;
  std::size_t steps_elapsed = 0;
  bool done = false;
};

inline EnvState reset(const EnvConfig& cfg, StateId start) {
  return {start, 0, start == cfg.goal};
}

/// Uniform FREE start state other than the goal (the goal itself on a one-state map).
inline StateId sample_start(const GridMap& map, const EnvConfig& cfg, Rng& rng) {
  const std::size_t n = map.num_states();
  if (n == 1) return 0;
  StateId s = rng.index(n - 1);
  return s >= cfg.goal ? s + 1 : s;
}

struct StepResult {
  EnvState env;
  double reward;
  bool done;
};

inline StepResult step(const EnvState& env, const EnvConfig& cfg, const GridMap& map, Action a,
                       Rng& rng) {
  if (env.done) throw std::logic_error("step: environment episode already finished");
  if (a >= kNumActions) throw std::invalid_argument("step: bad action");
  EnvState next = env;
  next.state = sample_next_state(map, cfg, env.state, a, rng);
  next.steps_elapsed += 1;
  bool at_goal = next.state == cfg.goal;
  double reward = at_goal ? cfg.goal_reward : cfg.step_reward;
  next.done = at_goal || next.steps_elapsed >= cfg.episode_cap;
  return {next, reward, next.done};
}

}  // namespace optenc
