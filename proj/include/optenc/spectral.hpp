#pragma once

#include <Eigen/Dense>
#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "optenc/core.hpp"
#include "optenc/gridworld.hpp"

namespace optenc {

struct StateGraph {
  std::size_t n = 0;
  Eigen::MatrixXd adjacency;
  Eigen::VectorXd degree;

  std::size_t edge_count() const {
    return static_cast<std::size_t>(adjacency.sum() / 2.0 + 0.5);
  }
};

/// Edge (u, v) iff the two FREE cells are 4-adjacent.
inline StateGraph build_state_graph(const GridMap& map) {
  StateGraph g;
  g.n = map.num_states();
  g.adjacency = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(g.n), static_cast<Eigen::Index>(g.n));
  for (StateId s = 0; s < g.n; ++s)
    for (Action a = 0; a < kNumActions; ++a) {
      StateId t = map.neighbor(s, a);
      if (t != s) g.adjacency(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t)) = 1.0;
    }
  g.degree = g.adjacency.rowwise().sum();
  return g;
}

enum class LaplacianKind { Combinatorial, Normalized };

struct EigenBasis {
  Eigen::VectorXd eigenvalues;   // ascending
  Eigen::MatrixXd eigenvectors;  // unit columns, first nonzero entry positive
  LaplacianKind kind = LaplacianKind::Combinatorial;

  std::size_t size() const { return static_cast<std::size_t>(eigenvalues.size()); }
  double value(std::size_t i, StateId s) const {
    return eigenvectors(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(i));
  }
};

inline Eigen::MatrixXd laplacian(const StateGraph& g, LaplacianKind kind) {
  const auto n = static_cast<Eigen::Index>(g.n);
  if (kind == LaplacianKind::Combinatorial) {
    Eigen::MatrixXd L = -g.adjacency;
    L.diagonal() += g.degree;
    return L;
  }
  Eigen::VectorXd inv_sqrt(n);
  for (Eigen::Index i = 0; i < n; ++i)
    inv_sqrt(i) = g.degree(i) > 0.0 ? 1.0 / std::sqrt(g.degree(i)) : 0.0;
  Eigen::MatrixXd L = -(inv_sqrt.asDiagonal() * g.adjacency * inv_sqrt.asDiagonal());
  L.diagonal().array() += 1.0;
  return L;
}

inline void canonicalize_sign(Eigen::Ref<Eigen::VectorXd> v, double zero_tol = 1e-9) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::abs(v(i)) > zero_tol) {
      if (v(i) < 0.0) v = -v;
      return;
    }
  }
}

/// The k smallest eigenpairs of the graph Laplacian.
inline EigenBasis laplacian_eigendecomposition(const StateGraph& g, std::size_t k,
                                               LaplacianKind kind = LaplacianKind::Combinatorial) {
  if (k > g.n) throw std::invalid_argument("laplacian_eigendecomposition: k exceeds state count");
  if (g.n > 0 && (g.adjacency - g.adjacency.transpose()).cwiseAbs().maxCoeff() > 0.0)
    throw std::invalid_argument("laplacian_eigendecomposition: adjacency is not symmetric");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(laplacian(g, kind));
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("laplacian_eigendecomposition: eigensolver failed");

  EigenBasis basis;
  basis.kind = kind;
  const auto kk = static_cast<Eigen::Index>(k);
  basis.eigenvalues = solver.eigenvalues().head(kk);
  basis.eigenvectors = solver.eigenvectors().leftCols(kk);
  for (Eigen::Index i = 0; i < kk; ++i) {
    basis.eigenvectors.col(i).normalize();
    canonicalize_sign(basis.eigenvectors.col(i));
  }
  return basis;
}

/// Eigenvector-difference reward e_i(s') - e_i(s), scaled by `sign`.
inline double intrinsic_reward(const EigenBasis& basis, std::size_t i, StateId s, StateId next,
                               double sign = 1.0) {
  if (i >= basis.size()) throw std::invalid_argument("intrinsic_reward: eigen index out of range");
  return sign * (basis.value(i, next) - basis.value(i, s));
}

struct Provenance {
  enum class Kind { Eigen, Goal, External, Mimic, Distilled, Average, KMeans } kind = Kind::External;
  std::size_t index = 0;  // eigen index, goal state, or source index
  int sign = 1;
  std::string note;

  bool operator==(const Provenance&) const = default;
};

inline std::string to_string(Provenance::Kind k) {
  switch (k) {
    case Provenance::Kind::Eigen: return "eigen";
    case Provenance::Kind::Goal: return "goal";
    case Provenance::Kind::External: return "external";
    case Provenance::Kind::Mimic: return "mimic";
    case Provenance::Kind::Distilled: return "distilled";
    case Provenance::Kind::Average: return "average";
    case Provenance::Kind::KMeans: return "kmeans";
  }
  return "external";
}

inline Provenance::Kind provenance_kind_from_string(const std::string& s) {
  for (auto k : {Provenance::Kind::Eigen, Provenance::Kind::Goal, Provenance::Kind::External,
                 Provenance::Kind::Mimic, Provenance::Kind::Distilled, Provenance::Kind::Average,
                 Provenance::Kind::KMeans})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown provenance kind: " + s);
}

/// An option with initiation set = all states; termination is imposed by the
/// transfer agent's fixed persistence.
struct OptionPolicy {
  std::size_t id = 0;
  PolicyTable table;
  Provenance provenance;
  std::optional<StateId> subgoal;  // state the option drives towards, if known
};

using OptionSet = std::vector<OptionPolicy>;

using RewardFn = std::function<double(StateId, StateId, Action)>;

/// Expert policy shape: greedy one-hot (temperature 0) or softmax over Q.
struct ExpertMode {
  double temperature = 0.0;
};

struct SolveResult {
  OptionPolicy option;
  std::vector<double> values;
  std::vector<double> q;  // |S| x |A|
  double residual = 0.0;
  std::size_t iterations = 0;
  std::vector<double> residual_trace;  // sup-norm change per sweep
};

struct SolveConfig {
  double tol = 1e-8;
  std::size_t max_iters = 200000;
  ExpertMode expert;
};

/// Jacobi value iteration on the exact model. States flagged in `terminal`
/// are absorbing: their value is treated as zero when entered.
inline SolveResult solve_option_policy(const GridMap& map, const EnvConfig& cfg,
                                       const RewardFn& reward, const SolveConfig& scfg = {},
                                       const std::vector<bool>& terminal = {}) {
  const std::size_t n = map.num_states();
  const double gamma = cfg.discount;
  struct Entry {
    StateId next;
    double prob;
  };
  std::vector<std::vector<Entry>> model(n * kNumActions);
  std::vector<double> expected_reward(n * kNumActions, 0.0);
  for (StateId s = 0; s < n; ++s)
    for (Action a = 0; a < kNumActions; ++a) {
      double r = 0.0;
      for (auto [t, p] : transition_distribution(map, cfg, s, a)) {
        double rv = reward(s, t, a);
        if (!std::isfinite(rv)) throw std::invalid_argument("solve_option_policy: unbounded reward");
        r += p * rv;
        if (terminal.empty() || !terminal[t]) model[s * kNumActions + a].push_back({t, p});
      }
      expected_reward[s * kNumActions + a] = r;
    }

  auto backup = [&](const std::vector<double>& v, StateId s, Action a) {
    double q = expected_reward[s * kNumActions + a];
    for (auto [t, p] : model[s * kNumActions + a]) q += gamma * p * v[t];
    return q;
  };

  SolveResult out;
  std::vector<double> v(n, 0.0), next(n, 0.0);
  double residual = INFINITY;
  std::size_t it = 0;
  while (it < scfg.max_iters) {
    residual = 0.0;
    for (StateId s = 0; s < n; ++s) {
      double best = -INFINITY;
      for (Action a = 0; a < kNumActions; ++a) best = std::max(best, backup(v, s, a));
      next[s] = best;
      residual = std::max(residual, std::abs(best - v[s]));
    }
    v.swap(next);
    ++it;
    out.residual_trace.push_back(residual);
    if (residual < scfg.tol) break;
  }
  if (!(residual < scfg.tol))
    throw ConvergenceError("solve_option_policy: no convergence after " + std::to_string(it) +
                               " sweeps, residual " + std::to_string(residual),
                           residual);

  out.values = v;
  out.q.resize(n * kNumActions);
  out.option.table = PolicyTable(n, kNumActions);
  for (StateId s = 0; s < n; ++s) {
    for (Action a = 0; a < kNumActions; ++a) out.q[s * kNumActions + a] = backup(v, s, a);
    std::span<const double> qs(out.q.data() + s * kNumActions, kNumActions);
    auto row = out.option.table.row(s);
    if (scfg.expert.temperature > 0.0) {
      std::array<double, kNumActions> scaled;
      for (Action a = 0; a < kNumActions; ++a) scaled[a] = qs[a] / scfg.expert.temperature;
      softmax(scaled, row);
    } else {
      row[argmax(qs)] = 1.0;
    }
  }
  out.residual = residual;
  out.iterations = it;
  return out;
}

/// Goal-reaching option: reward on entering `goal`, which is absorbing.
inline SolveResult solve_goal_option(const GridMap& map, const EnvConfig& cfg, StateId goal,
                                     const SolveConfig& scfg = {}) {
  if (goal >= map.num_states()) throw std::invalid_argument("solve_goal_option: bad goal");
  std::vector<bool> terminal(map.num_states(), false);
  terminal[goal] = true;
  auto reward = [&](StateId, StateId t, Action) {
    return t == goal ? cfg.goal_reward : cfg.step_reward;
  };
  auto res = solve_option_policy(map, cfg, reward, scfg, terminal);
  res.option.provenance = {Provenance::Kind::Goal, goal, 1, {}};
  res.option.subgoal = goal;
  return res;
}

struct DiscoverConfig {
  std::size_t n_options = 16;
  bool signs = true;
  LaplacianKind kind = LaplacianKind::Combinatorial;
  SolveConfig solve;
};

/// Eigen-options from the lowest nontrivial Laplacian eigenvectors. With
/// `signs` the order is +v1, -v1, +v2, -v2, ...
inline OptionSet discover_options(const GridMap& map, const EnvConfig& cfg,
                                  const DiscoverConfig& dcfg, EigenBasis* basis_out = nullptr) {
  const std::size_t n = map.num_states();
  const std::size_t available = dcfg.signs ? 2 * (n - 1) : n - 1;
  if (dcfg.n_options > available)
    throw std::invalid_argument("discover_options: requested " + std::to_string(dcfg.n_options) +
                                " options but only " + std::to_string(available) +
                                " eigenvector directions exist");
  const std::size_t needed = dcfg.signs ? (dcfg.n_options + 1) / 2 : dcfg.n_options;
  EigenBasis basis = laplacian_eigendecomposition(build_state_graph(map), needed + 1, dcfg.kind);

  OptionSet out;
  out.reserve(dcfg.n_options);
  for (std::size_t k = 0; out.size() < dcfg.n_options; ++k) {
    std::size_t eig = dcfg.signs ? 1 + k / 2 : 1 + k;
    int sign = (dcfg.signs && k % 2 == 1) ? -1 : 1;
    auto reward = [&basis, eig, sign](StateId s, StateId t, Action) {
      return intrinsic_reward(basis, eig, s, t, static_cast<double>(sign));
    };
    auto res = solve_option_policy(map, cfg, reward, dcfg.solve);
    res.option.id = out.size();
    res.option.provenance = {Provenance::Kind::Eigen, eig, sign, {}};
    auto col = basis.eigenvectors.col(static_cast<Eigen::Index>(eig));
    Eigen::Index best = 0;
    if (sign > 0)
      col.maxCoeff(&best);
    else
      col.minCoeff(&best);
    res.option.subgoal = static_cast<StateId>(best);
    out.push_back(std::move(res.option));
  }
  if (basis_out) *basis_out = std::move(basis);
  return out;
}

/// Goal-reaching experts for an explicit list of goal states.
inline OptionSet goal_options(const GridMap& map, const EnvConfig& cfg,
                              const std::vector<StateId>& goals, const SolveConfig& scfg = {}) {
  OptionSet out;
  for (StateId g : goals) {
    auto res = solve_goal_option(map, cfg, g, scfg);
    res.option.id = out.size();
    out.push_back(std::move(res.option));
  }
  return out;
}

}  // namespace optenc
