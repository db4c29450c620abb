#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "optenc/core.hpp"
#include "optenc/dataset.hpp"

namespace optenc {

/// Whether attention logits are indexed by state or shared by all states.
enum class TableMode { PerState, Global };

enum class LossKind { KL, Huber };
enum class KLDirection { Forward, Reverse };

/// Which architectural constraints are active.
enum class Variant { Full, NoAttnNorm, NoWeightShare, Neither };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoAttnNorm: return "no-attn-norm";
    case Variant::NoWeightShare: return "no-weight-share";
    case Variant::Neither: return "neither";
  }
  return "full";
}

struct TrainConfig {
  LossKind loss = LossKind::KL;
  KLDirection kl_direction = KLDirection::Forward;
  double epsilon_smooth = 1e-3;
  double huber_delta = 1.0;
  double learning_rate = 1.0;
  double max_learning_rate = 1e4;
  std::size_t max_iters = 5000;
  double grad_tol = 1e-7;
  std::uint64_t seed = 0;
  double init_scale = 0.01;
  TableMode encoder_mode = TableMode::Global;
  TableMode decoder_mode = TableMode::PerState;

  void validate() const {
    if (loss == LossKind::KL && !(epsilon_smooth > 0.0))
      throw std::invalid_argument("TrainConfig: KL loss needs epsilon_smooth > 0");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
  }
};

/// Encoder logits E[t][i][j][k] (softmax over options j) and decoder logits
/// D[t][i][j][k] (softmax over distilled i). k runs over actions only when
/// weight sharing is lifted; t over states only in per-state mode. Without
/// attention normalization the stored values are used as raw weights.
struct EncoderParams {
  std::size_t n_states = 0;
  std::size_t n_distilled = 0;  // M
  std::size_t n_options = 0;    // N
  std::size_t n_actions = kNumActions;
  TableMode encoder_mode = TableMode::Global;
  TableMode decoder_mode = TableMode::PerState;
  bool normalized = true;
  bool shared = true;
  std::vector<double> encoder_logits;
  std::vector<double> decoder_logits;

  std::size_t action_slots() const { return shared ? 1 : n_actions; }
  std::size_t table_size() const { return n_distilled * n_options * action_slots(); }
  std::size_t encoder_tables() const { return encoder_mode == TableMode::PerState ? n_states : 1; }
  std::size_t decoder_tables() const { return decoder_mode == TableMode::PerState ? n_states : 1; }
  std::size_t encoder_offset(StateId s) const {
    return (encoder_mode == TableMode::PerState ? s : 0) * table_size();
  }
  std::size_t decoder_offset(StateId s) const {
    return (decoder_mode == TableMode::PerState ? s : 0) * table_size();
  }
  std::size_t slot(std::size_t i, std::size_t j, std::size_t k) const {
    return (i * n_options + j) * action_slots() + k;
  }
  std::size_t slot_of_action(Action a) const { return shared ? 0 : a; }

  static EncoderParams zeros(std::size_t states, std::size_t m, std::size_t n, std::size_t actions,
                             TableMode enc, TableMode dec, bool normalized = true,
                             bool shared = true) {
    EncoderParams p;
    p.n_states = states;
    p.n_distilled = m;
    p.n_options = n;
    p.n_actions = actions;
    p.encoder_mode = enc;
    p.decoder_mode = dec;
    p.normalized = normalized;
    p.shared = shared;
    p.encoder_logits.assign(p.encoder_tables() * p.table_size(), 0.0);
    p.decoder_logits.assign(p.decoder_tables() * p.table_size(), 0.0);
    return p;
  }

  bool same_shape(const EncoderParams& o) const {
    return n_states == o.n_states && n_distilled == o.n_distilled && n_options == o.n_options &&
           n_actions == o.n_actions && encoder_mode == o.encoder_mode &&
           decoder_mode == o.decoder_mode && normalized == o.normalized && shared == o.shared;
  }
};

/// Attention weights for `s`, laid out as slot(i, j, k).
inline std::vector<double> encoder_weights(const EncoderParams& p, StateId s) {
  const std::size_t K = p.action_slots();
  std::vector<double> w(p.encoder_logits.begin() + static_cast<long>(p.encoder_offset(s)),
                        p.encoder_logits.begin() + static_cast<long>(p.encoder_offset(s) + p.table_size()));
  if (!p.normalized) return w;
  std::vector<double> z(p.n_options), out(p.n_options);
  for (std::size_t i = 0; i < p.n_distilled; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t j = 0; j < p.n_options; ++j) z[j] = w[p.slot(i, j, k)];
      softmax(z, out);
      for (std::size_t j = 0; j < p.n_options; ++j) w[p.slot(i, j, k)] = out[j];
    }
  return w;
}

inline std::vector<double> decoder_weights(const EncoderParams& p, StateId s) {
  const std::size_t K = p.action_slots();
  std::vector<double> w(p.decoder_logits.begin() + static_cast<long>(p.decoder_offset(s)),
                        p.decoder_logits.begin() + static_cast<long>(p.decoder_offset(s) + p.table_size()));
  if (!p.normalized) return w;
  std::vector<double> z(p.n_distilled), out(p.n_distilled);
  for (std::size_t j = 0; j < p.n_options; ++j)
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t i = 0; i < p.n_distilled; ++i) z[i] = w[p.slot(i, j, k)];
      softmax(z, out);
      for (std::size_t i = 0; i < p.n_distilled; ++i) w[p.slot(i, j, k)] = out[i];
    }
  return w;
}

inline void check_row(const EncoderParams& p, std::span<const double> experts) {
  if (experts.size() != p.n_options * p.n_actions)
    throw std::invalid_argument("encoder: expert block has " + std::to_string(experts.size()) +
                                " entries, expected " + std::to_string(p.n_options * p.n_actions));
}

/// Distilled distributions at `s` (M x A): pi_d[i] = sum_j a_ij pi_j.
inline std::vector<double> encode(const EncoderParams& p, StateId s, std::span<const double> experts) {
  check_row(p, experts);
  const std::size_t A = p.n_actions;
  auto w = encoder_weights(p, s);
  std::vector<double> out(p.n_distilled * A, 0.0);
  for (std::size_t i = 0; i < p.n_distilled; ++i)
    for (std::size_t j = 0; j < p.n_options; ++j)
      for (Action a = 0; a < A; ++a)
        out[i * A + a] += w[p.slot(i, j, p.slot_of_action(a))] * experts[j * A + a];
  return out;
}

/// Reconstructions at `s` (N x A): hat_j = sum_i w_ij pi_d[i].
inline std::vector<double> reconstruct(const EncoderParams& p, StateId s,
                                       std::span<const double> distilled) {
  if (distilled.size() != p.n_distilled * p.n_actions)
    throw std::invalid_argument("reconstruct: distilled block shape mismatch");
  const std::size_t A = p.n_actions;
  auto w = decoder_weights(p, s);
  std::vector<double> out(p.n_options * A, 0.0);
  for (std::size_t j = 0; j < p.n_options; ++j)
    for (std::size_t i = 0; i < p.n_distilled; ++i)
      for (Action a = 0; a < A; ++a)
        out[j * A + a] += w[p.slot(i, j, p.slot_of_action(a))] * distilled[i * A + a];
  return out;
}

namespace detail {

/// Divergence between target p and reconstruction q, with d/dq written to `grad`.
inline double divergence(std::span<const double> p, std::span<const double> q, const TrainConfig& cfg,
                         std::span<double> grad) {
  const std::size_t A = p.size();
  if (cfg.loss == LossKind::Huber) {
    double total = 0.0;
    const double delta = cfg.huber_delta;
    for (std::size_t a = 0; a < A; ++a) {
      double d = q[a] - p[a];
      if (std::abs(d) <= delta) {
        total += 0.5 * d * d;
        grad[a] = d;
      } else {
        total += delta * (std::abs(d) - 0.5 * delta);
        grad[a] = d > 0 ? delta : -delta;
      }
    }
    return total;
  }
  const double eps = cfg.epsilon_smooth;
  const double norm = 1.0 / (1.0 + static_cast<double>(A) * eps);
  double total = 0.0;
  for (std::size_t a = 0; a < A; ++a) {
    double ps = (p[a] + eps) * norm;
    double qs = (q[a] + eps) * norm;
    if (cfg.kl_direction == KLDirection::Forward) {
      if (ps > 0.0) total += ps * std::log(ps / qs);
      grad[a] = -ps / qs * norm;
    } else {
      if (qs > 0.0) total += qs * std::log(qs / ps);
      grad[a] = (std::log(qs / ps) + 1.0) * norm;
    }
  }
  return total;
}

/// Backpropagates through a softmax over `idx` entries in place: g <- J^T g.
template <typename IndexFn>
void softmax_backward(const std::vector<double>& w, std::vector<double>& g, std::size_t count,
                      IndexFn idx) {
  double dot = 0.0;
  for (std::size_t t = 0; t < count; ++t) dot += w[idx(t)] * g[idx(t)];
  for (std::size_t t = 0; t < count; ++t) g[idx(t)] = w[idx(t)] * (g[idx(t)] - dot);
}

}  // namespace detail

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> encoder;  // same layout as EncoderParams::encoder_logits
  std::vector<double> decoder;
};

/// Objective sum_rows weight * sum_j L(pi_j, hat_j), optionally with its
/// exact gradient with respect to every stored logit.
inline LossAndGradient loss_and_gradient(const EncoderParams& p, const PolicyDataset& d,
                                         const TrainConfig& cfg, bool want_gradient = true) {
  if (d.n_options != p.n_options || d.n_actions != p.n_actions)
    throw std::invalid_argument("encoder: dataset shape does not match params");
  const std::size_t M = p.n_distilled, N = p.n_options, A = p.n_actions, K = p.action_slots();
  LossAndGradient out;
  if (want_gradient) {
    out.encoder.assign(p.encoder_logits.size(), 0.0);
    out.decoder.assign(p.decoder_logits.size(), 0.0);
  }
  // Gradients w.r.t. attention *weights* per table, converted to logits below.
  std::vector<double> g_enc_w(want_gradient ? p.encoder_logits.size() : 0, 0.0);
  std::vector<double> g_dec_w(want_gradient ? p.decoder_logits.size() : 0, 0.0);

  std::vector<double> ghat(N * A), gd(M * A), grad_a(A);
  // Per-state weight caches keyed by table index; global mode hits one entry.
  std::vector<std::vector<double>> enc_cache(p.encoder_tables()), dec_cache(p.decoder_tables());
  auto enc_w = [&](StateId s) -> const std::vector<double>& {
    auto& c = enc_cache[p.encoder_mode == TableMode::PerState ? s : 0];
    if (c.empty()) c = encoder_weights(p, s);
    return c;
  };
  auto dec_w = [&](StateId s) -> const std::vector<double>& {
    auto& c = dec_cache[p.decoder_mode == TableMode::PerState ? s : 0];
    if (c.empty()) c = decoder_weights(p, s);
    return c;
  };

  for (std::size_t r = 0; r < d.rows(); ++r) {
    const StateId s = d.states[r];
    const double omega = d.weight(r);
    auto experts = d.row_block(r);
    const auto& aw = enc_w(s);
    const auto& ww = dec_w(s);

    std::vector<double> dist(M * A, 0.0);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j)
        for (Action a = 0; a < A; ++a)
          dist[i * A + a] += aw[p.slot(i, j, p.slot_of_action(a))] * experts[j * A + a];
    std::vector<double> hat(N * A, 0.0);
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t i = 0; i < M; ++i)
        for (Action a = 0; a < A; ++a)
          hat[j * A + a] += ww[p.slot(i, j, p.slot_of_action(a))] * dist[i * A + a];

    for (std::size_t j = 0; j < N; ++j) {
      double l = detail::divergence(experts.subspan(j * A, A),
                                    std::span<const double>(hat.data() + j * A, A), cfg, grad_a);
      out.loss += omega * l;
      for (Action a = 0; a < A; ++a) ghat[j * A + a] = omega * grad_a[a];
    }
    if (!want_gradient) continue;

    const std::size_t eo = p.encoder_offset(s), dof = p.decoder_offset(s);
    std::fill(gd.begin(), gd.end(), 0.0);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j)
        for (Action a = 0; a < A; ++a) {
          std::size_t sl = p.slot(i, j, p.slot_of_action(a));
          g_dec_w[dof + sl] += ghat[j * A + a] * dist[i * A + a];
          gd[i * A + a] += ww[sl] * ghat[j * A + a];
        }
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j)
        for (Action a = 0; a < A; ++a)
          g_enc_w[eo + p.slot(i, j, p.slot_of_action(a))] += gd[i * A + a] * experts[j * A + a];
  }
  if (!want_gradient) return out;

  if (!p.normalized) {
    out.encoder = std::move(g_enc_w);
    out.decoder = std::move(g_dec_w);
    return out;
  }
  // Chain through the softmaxes, one table at a time.
  for (std::size_t t = 0; t < p.encoder_tables(); ++t) {
    if (enc_cache[t].empty()) continue;  // no rows touched this table: gradient stays 0
    const std::size_t off = t * p.table_size();
    std::vector<double> g(g_enc_w.begin() + static_cast<long>(off),
                          g_enc_w.begin() + static_cast<long>(off + p.table_size()));
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t k = 0; k < K; ++k)
        detail::softmax_backward(enc_cache[t], g, N, [&](std::size_t j) { return p.slot(i, j, k); });
    std::copy(g.begin(), g.end(), out.encoder.begin() + static_cast<long>(off));
  }
  for (std::size_t t = 0; t < p.decoder_tables(); ++t) {
    if (dec_cache[t].empty()) continue;
    const std::size_t off = t * p.table_size();
    std::vector<double> g(g_dec_w.begin() + static_cast<long>(off),
                          g_dec_w.begin() + static_cast<long>(off + p.table_size()));
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t k = 0; k < K; ++k)
        detail::softmax_backward(dec_cache[t], g, M, [&](std::size_t i) { return p.slot(i, j, k); });
    std::copy(g.begin(), g.end(), out.decoder.begin() + static_cast<long>(off));
  }
  return out;
}

inline double loss(const EncoderParams& p, const PolicyDataset& d, const TrainConfig& cfg) {
  return loss_and_gradient(p, d, cfg, false).loss;
}

inline LossAndGradient gradient(const EncoderParams& p, const PolicyDataset& d,
                                const TrainConfig& cfg) {
  return loss_and_gradient(p, d, cfg, true);
}

/// Mean over (row, option) of the unsmoothed KL(expert || reconstruction).
inline double mean_kl(const EncoderParams& p, const PolicyDataset& d) {
  const std::size_t A = p.n_actions, N = p.n_options;
  double total = 0.0, mass = 0.0;
  for (std::size_t r = 0; r < d.rows(); ++r) {
    auto experts = d.row_block(r);
    auto hat = reconstruct(p, d.states[r], encode(p, d.states[r], experts));
    for (std::size_t j = 0; j < N; ++j) {
      double kl = 0.0;
      for (Action a = 0; a < A; ++a) {
        double pe = experts[j * A + a];
        if (pe > 0.0) kl += pe * std::log(pe / std::max(hat[j * A + a], 1e-300));
      }
      total += d.weight(r) * kl;
      mass += d.weight(r);
    }
  }
  return mass > 0.0 ? total / mass : 0.0;
}

/// M distilled policy tables over the full state space. States absent from
/// the dataset get uniform rows and are marked undefined.
struct DistilledSet {
  std::size_t n_distilled = 0;
  std::vector<PolicyTable> policies;
  std::vector<bool> defined;

  bool all_rows_are_policies(double tol = 1e-6) const {
    for (const auto& t : policies)
      for (StateId s = 0; s < t.n_states; ++s)
        if (defined[s] && !is_distribution(t.row(s), tol)) return false;
    return true;
  }
};

inline DistilledSet distill_table(const EncoderParams& p, const PolicyDataset& d) {
  DistilledSet out;
  out.n_distilled = p.n_distilled;
  out.policies.assign(p.n_distilled, PolicyTable::uniform(p.n_states, p.n_actions));
  out.defined.assign(p.n_states, false);
  for (std::size_t r = 0; r < d.rows(); ++r) {
    StateId s = d.states[r];
    if (out.defined[s]) continue;
    out.defined[s] = true;
    auto dist = encode(p, s, d.row_block(r));
    for (std::size_t i = 0; i < p.n_distilled; ++i)
      for (Action a = 0; a < p.n_actions; ++a) out.policies[i].at(s, a) = dist[i * p.n_actions + a];
  }
  return out;
}

inline EncoderParams init_params(const PolicyDataset& d, std::size_t M, const TrainConfig& cfg,
                                 bool normalized = true, bool shared = true) {
  auto p = EncoderParams::zeros(d.n_states, M, d.n_options, d.n_actions, cfg.encoder_mode,
                                cfg.decoder_mode, normalized, shared);
  Rng rng(cfg.seed);
  const double enc_base = normalized ? 0.0 : 1.0 / static_cast<double>(d.n_options);
  const double dec_base = normalized ? 0.0 : 1.0 / static_cast<double>(M);
  for (double& v : p.encoder_logits) v = enc_base + rng.uniform(-cfg.init_scale, cfg.init_scale);
  for (double& v : p.decoder_logits) v = dec_base + rng.uniform(-cfg.init_scale, cfg.init_scale);
  return p;
}

struct TrainResult {
  EncoderParams params;
  DistilledSet distilled;
  std::vector<double> loss_history;
  std::size_t iterations = 0;
  double final_grad_norm = 0.0;
  bool converged = false;
};

namespace detail {

inline double sq_norm(const LossAndGradient& g) {
  double s = 0.0;
  for (double v : g.encoder) s += v * v;
  for (double v : g.decoder) s += v * v;
  return s;
}

inline double max_abs(const LossAndGradient& g) {
  double m = 0.0;
  for (double v : g.encoder) m = std::max(m, std::abs(v));
  for (double v : g.decoder) m = std::max(m, std::abs(v));
  return m;
}

inline TrainResult descend(EncoderParams params, const PolicyDataset& d, const TrainConfig& cfg) {
  TrainResult out;
  auto lg = loss_and_gradient(params, d, cfg);
  if (!std::isfinite(lg.loss)) throw std::runtime_error("encoder train: initial loss is not finite");
  out.loss_history.push_back(lg.loss);
  double step = cfg.learning_rate;
  constexpr double kArmijo = 1e-4;
  std::size_t it = 0;
  for (; it < cfg.max_iters; ++it) {
    out.final_grad_norm = max_abs(lg);
    if (out.final_grad_norm < cfg.grad_tol) {
      out.converged = true;
      break;
    }
    const double g2 = sq_norm(lg);
    EncoderParams trial = params;
    LossAndGradient next;
    bool accepted = false;
    for (int halvings = 0; halvings < 60; ++halvings) {
      for (std::size_t k = 0; k < trial.encoder_logits.size(); ++k)
        trial.encoder_logits[k] = params.encoder_logits[k] - step * lg.encoder[k];
      for (std::size_t k = 0; k < trial.decoder_logits.size(); ++k)
        trial.decoder_logits[k] = params.decoder_logits[k] - step * lg.decoder[k];
      double trial_loss = loss(trial, d, cfg);
      if (std::isnan(trial_loss))
        throw std::runtime_error("encoder train: loss became NaN at iteration " + std::to_string(it));
      if (trial_loss <= lg.loss - kArmijo * step * g2) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // no descent possible at machine precision
    params = std::move(trial);
    lg = loss_and_gradient(params, d, cfg);
    if (!std::isfinite(lg.loss))
      throw std::runtime_error("encoder train: loss diverged at iteration " + std::to_string(it));
    out.loss_history.push_back(lg.loss);
    step = std::min(step * 2.0, cfg.max_learning_rate);
  }
  out.iterations = it;
  out.final_grad_norm = max_abs(lg);
  out.distilled = distill_table(params, d);
  out.params = std::move(params);
  return out;
}

inline void check_finite(const PolicyDataset& d) {
  for (double v : d.experts)
    if (!std::isfinite(v)) throw std::invalid_argument("encoder train: non-finite expert entry");
}

}  // namespace detail

/// Fits M distilled policies by full-batch gradient descent with
/// backtracking (Armijo) line search.
inline TrainResult train(const PolicyDataset& d, std::size_t M, const TrainConfig& cfg) {
  if (M < 1) throw std::invalid_argument("encoder train: M must be >= 1");
  cfg.validate();
  detail::check_finite(d);
  return detail::descend(init_params(d, M, cfg), d, cfg);
}

struct AblationResult {
  Variant variant = Variant::Full;
  TrainResult trained;
  bool produces_policies = true;  // false when some distilled row leaves the simplex
  std::size_t encoder_parameters = 0;
  std::size_t decoder_parameters = 0;
};

/// Trains with the named constraints lifted. Lifting normalization can make
/// reconstructions negative, so those variants fall back to Huber loss.
inline AblationResult ablation_variant(const PolicyDataset& d, std::size_t M, TrainConfig cfg,
                                       Variant variant) {
  AblationResult out;
  out.variant = variant;
  if (variant == Variant::Full) {
    out.trained = train(d, M, cfg);
  } else {
    const bool normalized = variant == Variant::NoWeightShare;
    const bool shared = variant == Variant::NoAttnNorm;
    if (!normalized || !shared) cfg.loss = LossKind::Huber;
    cfg.validate();
    detail::check_finite(d);
    out.trained = detail::descend(init_params(d, M, cfg, normalized, shared), d, cfg);
  }
  out.produces_policies = out.trained.distilled.all_rows_are_policies();
  out.encoder_parameters = out.trained.params.encoder_logits.size();
  out.decoder_parameters = out.trained.params.decoder_logits.size();
  return out;
}

struct KMeansResult {
  std::vector<PolicyTable> centroids;
  std::vector<std::size_t> assignment;  // option -> cluster
  double inertia = 0.0;
  std::size_t iterations = 0;
};

/// K-means over options viewed as points in concatenated per-row policy space.
inline KMeansResult kmeans_policies(const PolicyDataset& d, std::size_t M, std::uint64_t seed,
                                    std::size_t max_iters = 100) {
  const std::size_t N = d.n_options, A = d.n_actions, R = d.rows(), dim = R * A;
  if (M < 1 || M > N) throw std::invalid_argument("kmeans_policies: need 1 <= M <= N");
  std::vector<std::vector<double>> points(N, std::vector<double>(dim));
  std::vector<double> coord_weight(dim);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < N; ++j)
      for (Action a = 0; a < A; ++a) {
        points[j][r * A + a] = d.expert(r, j)[a];
        coord_weight[r * A + a] = d.weight(r);
      }
  auto dist2 = [&](const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t k = 0; k < dim; ++k) s += coord_weight[k] * (x[k] - y[k]) * (x[k] - y[k]);
    return s;
  };

  Rng rng(seed);
  std::vector<std::vector<double>> centers;
  centers.push_back(points[rng.index(N)]);
  std::vector<double> best_d(N);
  while (centers.size() < M) {
    double total = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      best_d[j] = INFINITY;
      for (const auto& c : centers) best_d[j] = std::min(best_d[j], dist2(points[j], c));
      total += best_d[j];
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      // every point coincides with a centre; take the next unused index
      pick = centers.size() % N;
    } else {
      double u = rng.uniform() * total, acc = 0.0;
      for (std::size_t j = 0; j < N; ++j) {
        acc += best_d[j];
        pick = j;
        if (u < acc && best_d[j] > 0.0) break;
      }
    }
    centers.push_back(points[pick]);
  }

  KMeansResult out;
  out.assignment.assign(N, 0);
  std::vector<std::size_t> prev(N, M);
  for (std::size_t it = 0; it < max_iters; ++it) {
    out.iterations = it + 1;
    for (std::size_t j = 0; j < N; ++j) {
      double bd = INFINITY;
      for (std::size_t c = 0; c < M; ++c) {
        double dd = dist2(points[j], centers[c]);
        if (dd < bd) {
          bd = dd;
          out.assignment[j] = c;
        }
      }
    }
    std::vector<std::size_t> counts(M, 0);
    for (auto c : out.assignment) ++counts[c];
    for (std::size_t c = 0; c < M; ++c) {
      if (counts[c] > 0) continue;
      // empty cluster: re-seed at the point farthest from its own centre
      std::size_t far = 0;
      double fd = -1.0;
      for (std::size_t j = 0; j < N; ++j) {
        if (counts[out.assignment[j]] <= 1) continue;
        double dd = dist2(points[j], centers[out.assignment[j]]);
        if (dd > fd) {
          fd = dd;
          far = j;
        }
      }
      if (fd < 0.0) continue;  // every cluster is a singleton; keep the old centre
      --counts[out.assignment[far]];
      out.assignment[far] = c;
      counts[c] = 1;
    }
    for (std::size_t c = 0; c < M; ++c)
      if (counts[c] > 0) std::fill(centers[c].begin(), centers[c].end(), 0.0);
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t k = 0; k < dim; ++k) centers[out.assignment[j]][k] += points[j][k];
    for (std::size_t c = 0; c < M; ++c)
      if (counts[c] > 0)
        for (double& v : centers[c]) v /= static_cast<double>(counts[c]);
    if (out.assignment == prev) break;
    prev = out.assignment;
  }

  out.inertia = 0.0;
  for (std::size_t j = 0; j < N; ++j) out.inertia += dist2(points[j], centers[out.assignment[j]]);
  out.centroids.assign(M, PolicyTable::uniform(d.n_states, A));
  std::vector<bool> seen(d.n_states, false);
  for (std::size_t r = 0; r < R; ++r) {
    StateId s = d.states[r];
    if (seen[s]) continue;
    seen[s] = true;
    for (std::size_t c = 0; c < M; ++c) {
      double sum = 0.0;
      for (Action a = 0; a < A; ++a) sum += centers[c][r * A + a];
      for (Action a = 0; a < A; ++a)
        out.centroids[c].at(s, a) = sum > 0.0 ? centers[c][r * A + a] / sum : 1.0 / static_cast<double>(A);
    }
  }
  return out;
}

}  // namespace optenc
