#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace optenc {

using StateId = std::size_t;
using Action = std::size_t;

inline constexpr std::size_t kNumActions = 4;

/// Thrown when an iterative solver stops before reaching its tolerance.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// Seeded generator with a portable uniform mapping.
///
/// std::uniform_real_distribution is implementation-defined, so draws are
/// taken directly from the 53 high bits of mt19937_64. Streams are therefore
/// identical on every conforming standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    auto k = static_cast<std::size_t>(uniform() * static_cast<double>(n));
    return k < n ? k : n - 1;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Samples an index from a discrete distribution. Zero-mass entries are never chosen.
  std::size_t categorical(std::span<const double> probs) {
    double u = uniform();
    double acc = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] <= 0.0) continue;
      acc += probs[i];
      last = i;
      if (u < acc) return i;
    }
    return last;
  }

  std::uint64_t next_u64() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salt) {
  std::uint64_t h = mix_seed(base);
  for (auto s : salt) h = mix_seed(h ^ mix_seed(s));
  return h;
}

/// Row-major |S| x |A| table of action distributions.
struct PolicyTable {
  std::size_t n_states = 0;
  std::size_t n_actions = kNumActions;
  std::vector<double> probs;

  PolicyTable() = default;
  PolicyTable(std::size_t states, std::size_t actions, double fill = 0.0)
      : n_states(states), n_actions(actions), probs(states * actions, fill) {}

  static PolicyTable uniform(std::size_t states, std::size_t actions) {
    return PolicyTable(states, actions, 1.0 / static_cast<double>(actions));
  }

  std::span<double> row(StateId s) { return {probs.data() + s * n_actions, n_actions}; }
  std::span<const double> row(StateId s) const {
    return {probs.data() + s * n_actions, n_actions};
  }
  double& at(StateId s, Action a) { return probs[s * n_actions + a]; }
  double at(StateId s, Action a) const { return probs[s * n_actions + a]; }

  bool operator==(const PolicyTable&) const = default;
};

inline bool is_distribution(std::span<const double> p, double tol = 1e-9) {
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= -tol) || !std::isfinite(v)) return false;
    sum += v;
  }
  return std::abs(sum - 1.0) <= tol;
}

inline bool is_row_stochastic(const PolicyTable& t, double tol = 1e-9) {
  for (StateId s = 0; s < t.n_states; ++s)
    if (!is_distribution(t.row(s), tol)) return false;
  return true;
}

inline double total_variation(std::span<const double> p, std::span<const double> q) {
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) d += std::abs(p[i] - q[i]);
  return 0.5 * d;
}

/// Numerically stable softmax of `logits` into `out` (same length).
inline void softmax(std::span<const double> logits, std::span<double> out) {
  double mx = -INFINITY;
  for (double z : logits) mx = std::max(mx, z);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  softmax(logits, out);
  return out;
}

/// Index of the largest entry; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace optenc
