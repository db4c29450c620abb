#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "optenc/core.hpp"
#include "optenc/gridworld.hpp"

namespace optenc {

struct TransferConfig {
  std::size_t termination_limit = 20;  // T
  double gamma = 0.99;
  double attention_lr = 0.5;
  double base_lr = 0.5;
  double critic_lr = 0.5;
  double entropy_bonus = 0.01;
  std::size_t episodes = 1000;       // E
  std::size_t max_env_steps = 0;     // training step budget; 0 = unlimited
  std::size_t eval_every = 500;
  std::size_t eval_episodes = 10;
  bool bootstrap = false;            // one-step TD targets instead of Monte-Carlo returns
  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 0;

  void validate() const {
    if (termination_limit < 1) throw std::invalid_argument("TransferConfig: T must be >= 1");
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("TransferConfig: gamma outside (0,1)");
    if (eval_every < 1) throw std::invalid_argument("TransferConfig: eval_every must be >= 1");
    if (eval_episodes < 1) throw std::invalid_argument("TransferConfig: eval_episodes must be >= 1");
  }
};

/// Hard-attention agent over M frozen source policies plus a trainable base
/// policy. Choice index M selects the base policy.
struct HierarchicalAgentParams {
  std::size_t n_states = 0;
  std::size_t n_actions = kNumActions;
  std::vector<PolicyTable> sources;
  std::vector<double> attention_logits;  // |S| x (M+1)
  std::vector<double> base_logits;       // |S| x |A|
  std::vector<double> value;             // |S|

  std::size_t choices() const { return sources.size() + 1; }
  std::size_t base_choice() const { return sources.size(); }

  std::span<const double> attention_row(StateId s) const {
    return {attention_logits.data() + s * choices(), choices()};
  }
  std::span<const double> base_row(StateId s) const {
    return {base_logits.data() + s * n_actions, n_actions};
  }

  std::vector<double> choice_distribution(StateId s) const { return softmax(attention_row(s)); }

  void action_distribution(std::size_t choice, StateId s, std::span<double> out) const {
    if (choice < sources.size()) {
      auto row = sources[choice].row(s);
      std::copy(row.begin(), row.end(), out.begin());
    } else {
      softmax(base_row(s), out);
    }
  }

  static HierarchicalAgentParams create(std::size_t n_states, std::vector<PolicyTable> sources,
                                        std::size_t n_actions = kNumActions) {
    for (const auto& t : sources)
      if (t.n_states != n_states || t.n_actions != n_actions)
        throw std::invalid_argument("HierarchicalAgentParams: source shape mismatch");
    HierarchicalAgentParams p;
    p.n_states = n_states;
    p.n_actions = n_actions;
    p.sources = std::move(sources);
    p.attention_logits.assign(n_states * p.choices(), 0.0);
    p.base_logits.assign(n_states * n_actions, 0.0);
    p.value.assign(n_states, 0.0);
    return p;
  }
};

/// Soft-attention mixture w_base * K_B(s) + sum_i w_i K_i(s); used only to
/// check the weighting formula, never as a trained agent.
inline std::vector<double> soft_attention_policy(const HierarchicalAgentParams& p, StateId s) {
  auto w = p.choice_distribution(s);
  std::vector<double> out(p.n_actions, 0.0), row(p.n_actions);
  for (std::size_t c = 0; c < p.choices(); ++c) {
    p.action_distribution(c, s, row);
    for (Action a = 0; a < p.n_actions; ++a) out[a] += w[c] * row[a];
  }
  return out;
}

/// Samples from softmax(attention[s]), or takes its argmax (ties: lowest).
/// A single available choice consumes no randomness.
inline std::size_t select_choice(const HierarchicalAgentParams& p, StateId s, Rng& rng, bool greedy) {
  if (p.choices() == 1) return 0;
  if (greedy) return argmax(p.attention_row(s));
  auto probs = p.choice_distribution(s);
  return rng.categorical(probs);
}

struct RolloutStep {
  StateId state;
  std::size_t choice;
  Action action;
  double reward;
  StateId next_state;
  bool done;
  bool terminal;  // episode ended by reaching the goal
  bool decision;
};

struct RolloutBuffer {
  std::vector<RolloutStep> steps;
  bool reached_goal() const { return !steps.empty() && steps.back().terminal; }
};

struct EpisodeOptions {
  bool greedy = false;
  std::size_t step_limit = 0;  // stop early after this many steps (0 = none)
  std::function<void()> on_step;
};

/// Runs one episode: at each decision point pick a choice, then execute that
/// policy's primitive actions for up to T steps.
inline RolloutBuffer run_episode(const HierarchicalAgentParams& p, const GridMap& map,
                                 const EnvConfig& cfg, std::size_t T, StateId start, Rng& rng,
                                 const EpisodeOptions& opts = {}) {
  if (T < 1) throw std::invalid_argument("run_episode: T must be >= 1");
  RolloutBuffer buf;
  EnvState env = reset(cfg, start);
  std::size_t since_decision = 0;
  std::size_t choice = 0;
  std::vector<double> probs(p.n_actions);
  while (!env.done) {
    if (opts.step_limit > 0 && buf.steps.size() >= opts.step_limit) break;
    bool decision = since_decision == 0;
    if (decision) choice = select_choice(p, env.state, rng, opts.greedy);
    p.action_distribution(choice, env.state, probs);
    Action a = rng.categorical(probs);
    auto [next, reward, done] = step(env, cfg, map, a, rng);
    buf.steps.push_back({env.state, choice, a, reward, next.state, done,
                         done && next.state == cfg.goal, decision});
    env = next;
    since_decision = (since_decision + 1) % T;
    if (opts.on_step) opts.on_step();
  }
  return buf;
}

/// Advantages derived from a frozen critic for one buffer.
struct Advantages {
  std::vector<double> step_target;    // critic target per step
  std::vector<double> step_advantage; // target - V(s_t)
  std::vector<std::size_t> decisions; // indices of decision points
  std::vector<double> decision_advantage;
};

inline Advantages compute_advantages(const HierarchicalAgentParams& p, const RolloutBuffer& buf,
                                     const TransferConfig& cfg) {
  const auto& st = buf.steps;
  const std::size_t n = st.size();
  Advantages adv;
  adv.step_target.resize(n);
  adv.step_advantage.resize(n);
  auto tail_value = [&](const RolloutStep& x) { return x.terminal ? 0.0 : p.value[x.next_state]; };
  if (cfg.bootstrap) {
    for (std::size_t t = 0; t < n; ++t) adv.step_target[t] = st[t].reward + cfg.gamma * tail_value(st[t]);
  } else {
    double g = n > 0 ? tail_value(st.back()) : 0.0;
    for (std::size_t t = n; t-- > 0;) {
      g = st[t].reward + cfg.gamma * g;
      adv.step_target[t] = g;
    }
  }
  for (std::size_t t = 0; t < n; ++t) adv.step_advantage[t] = adv.step_target[t] - p.value[st[t].state];

  for (std::size_t t = 0; t < n; ++t)
    if (st[t].decision) adv.decisions.push_back(t);
  for (std::size_t k = 0; k < adv.decisions.size(); ++k) {
    std::size_t begin = adv.decisions[k];
    std::size_t end = k + 1 < adv.decisions.size() ? adv.decisions[k + 1] : n;
    double ret = 0.0, disc = 1.0;
    for (std::size_t t = begin; t < end; ++t) {
      ret += disc * st[t].reward;
      disc *= cfg.gamma;
    }
    ret += disc * tail_value(st[end - 1]);
    adv.decision_advantage.push_back(ret - p.value[st[begin].state]);
  }
  return adv;
}

/// Per-state visit counts over the given step indices; updates are averaged
/// per state so a much-visited state takes one lr-sized step per episode.
inline std::vector<double> visit_counts(const RolloutBuffer& buf, const std::vector<std::size_t>& idx,
                                        std::size_t n_states) {
  std::vector<double> c(n_states, 0.0);
  for (auto t : idx) c[buf.steps[t].state] += 1.0;
  return c;
}

/// Surrogate J = sum_k (1/n_{s_k}) [A_k log pi(c_k|s_k) + beta H(pi(.|s_k))]
/// over decision points, with advantages held fixed.
inline double attention_surrogate(const HierarchicalAgentParams& p, const RolloutBuffer& buf,
                                  const Advantages& adv, double entropy_bonus) {
  auto counts = visit_counts(buf, adv.decisions, p.n_states);
  double j = 0.0;
  for (std::size_t k = 0; k < adv.decisions.size(); ++k) {
    const auto& x = buf.steps[adv.decisions[k]];
    auto pi = p.choice_distribution(x.state);
    double h = 0.0;
    for (double v : pi)
      if (v > 0.0) h -= v * std::log(v);
    j += (adv.decision_advantage[k] * std::log(pi[x.choice]) + entropy_bonus * h) / counts[x.state];
  }
  return j;
}

/// Exact gradient of attention_surrogate with respect to attention_logits.
inline std::vector<double> attention_gradient(const HierarchicalAgentParams& p, const RolloutBuffer& buf,
                                              const Advantages& adv, double entropy_bonus) {
  const std::size_t C = p.choices();
  auto counts = visit_counts(buf, adv.decisions, p.n_states);
  std::vector<double> g(p.attention_logits.size(), 0.0);
  for (std::size_t k = 0; k < adv.decisions.size(); ++k) {
    const auto& x = buf.steps[adv.decisions[k]];
    auto pi = p.choice_distribution(x.state);
    double h = 0.0;
    for (double v : pi)
      if (v > 0.0) h -= v * std::log(v);
    const double scale = 1.0 / counts[x.state];
    for (std::size_t c = 0; c < C; ++c) {
      double dlog = (c == x.choice ? 1.0 : 0.0) - pi[c];
      double dent = pi[c] > 0.0 ? -pi[c] * (std::log(pi[c]) + h) : 0.0;
      g[x.state * C + c] += scale * (adv.decision_advantage[k] * dlog + entropy_bonus * dent);
    }
  }
  return g;
}

/// One actor-critic update from a complete episode: attention at decision
/// points with semi-Markov segment returns, the base policy on the steps it
/// executed, and the critic towards the step targets.
inline void a2c_update(HierarchicalAgentParams& p, const RolloutBuffer& buf, const TransferConfig& cfg) {
  if (buf.steps.empty()) throw std::invalid_argument("a2c_update: empty buffer");
  const auto adv = compute_advantages(p, buf, cfg);
  const std::size_t A = p.n_actions;

  auto g_att = attention_gradient(p, buf, adv, cfg.entropy_bonus);

  std::vector<std::size_t> base_steps, all_steps;
  for (std::size_t t = 0; t < buf.steps.size(); ++t) {
    all_steps.push_back(t);
    if (buf.steps[t].choice == p.base_choice()) base_steps.push_back(t);
  }
  auto base_counts = visit_counts(buf, base_steps, p.n_states);
  std::vector<double> g_base(p.base_logits.size(), 0.0), pi(A);
  for (auto t : base_steps) {
    const auto& x = buf.steps[t];
    softmax(p.base_row(x.state), pi);
    for (Action a = 0; a < A; ++a)
      g_base[x.state * A + a] +=
          adv.step_advantage[t] * ((a == x.action ? 1.0 : 0.0) - pi[a]) / base_counts[x.state];
  }

  auto counts = visit_counts(buf, all_steps, p.n_states);
  std::vector<double> dv(p.n_states, 0.0);
  for (auto t : all_steps) dv[buf.steps[t].state] += adv.step_advantage[t] / counts[buf.steps[t].state];

  for (std::size_t k = 0; k < g_att.size(); ++k) p.attention_logits[k] += cfg.attention_lr * g_att[k];
  for (std::size_t k = 0; k < g_base.size(); ++k) p.base_logits[k] += cfg.base_lr * g_base[k];
  for (std::size_t s = 0; s < p.n_states; ++s) p.value[s] += cfg.critic_lr * dv[s];
}

struct EvalResult {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> steps;
};

/// Greedy-choice episodes on the stochastic environment; failures count as
/// episode_cap steps. A fixed `start` overrides random starts.
inline EvalResult evaluate(const HierarchicalAgentParams& p, const GridMap& map, const EnvConfig& cfg,
                           std::size_t T, std::size_t n, Rng& rng,
                           std::optional<StateId> start = std::nullopt) {
  if (n < 1) throw std::invalid_argument("evaluate: need at least one episode");
  EvalResult r;
  EpisodeOptions opts;
  opts.greedy = true;
  for (std::size_t e = 0; e < n; ++e) {
    StateId s0 = start ? *start : sample_start(map, cfg, rng);
    auto buf = run_episode(p, map, cfg, T, s0, rng, opts);
    r.steps.push_back(buf.reached_goal() || s0 == cfg.goal ? static_cast<double>(buf.steps.size())
                                                           : static_cast<double>(cfg.episode_cap));
  }
  for (double v : r.steps) r.mean += v;
  r.mean /= static_cast<double>(n);
  for (double v : r.steps) r.stddev += (v - r.mean) * (v - r.mean);
  r.stddev = std::sqrt(r.stddev / static_cast<double>(n));
  return r;
}

struct CurvePoint {
  std::size_t env_steps = 0;
  double mean_steps = 0.0;
  double std_steps = 0.0;
  bool operator==(const CurvePoint&) const = default;
};

using LearningCurve = std::vector<CurvePoint>;

struct TransferResult {
  HierarchicalAgentParams params;
  LearningCurve curve;
  std::size_t episodes_run = 0;
  std::size_t env_steps = 0;
};

/// Trains on the goal in `env` for E episodes (or until the step budget),
/// evaluating every eval_every training steps with a fresh evaluation stream
/// per point, so agents sharing eval_seed see the same start states.
inline TransferResult train_transfer(std::vector<PolicyTable> sources, const GridMap& map,
                                     const EnvConfig& env, const TransferConfig& cfg) {
  cfg.validate();
  env.validate();
  TransferResult out;
  out.params = HierarchicalAgentParams::create(map.num_states(), std::move(sources));
  Rng rng(cfg.seed);
  std::size_t steps = 0;
  auto on_step = [&] {
    ++steps;
    if (steps % cfg.eval_every == 0) {
      Rng eval_rng(derive_seed(cfg.eval_seed, {steps / cfg.eval_every}));
      auto r = evaluate(out.params, map, env, cfg.termination_limit, cfg.eval_episodes, eval_rng);
      out.curve.push_back({steps, r.mean, r.stddev});
    }
  };
  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    if (cfg.max_env_steps > 0 && steps >= cfg.max_env_steps) break;
    EpisodeOptions opts;
    opts.on_step = on_step;
    if (cfg.max_env_steps > 0) opts.step_limit = cfg.max_env_steps - steps;
    StateId start = sample_start(map, env, rng);
    auto buf = run_episode(out.params, map, env, cfg.termination_limit, start, rng, opts);
    ++out.episodes_run;
    if (!buf.steps.empty()) a2c_update(out.params, buf, cfg);
  }
  out.env_steps = steps;
  return out;
}

/// Flat tabular advantage actor-critic on primitive actions (the vanilla
/// baseline), written independently of the hierarchical agent.
inline TransferResult train_actor_critic(const GridMap& map, const EnvConfig& env,
                                         const TransferConfig& cfg) {
  cfg.validate();
  env.validate();
  const std::size_t S = map.num_states(), A = kNumActions;
  TransferResult out;
  out.params = HierarchicalAgentParams::create(S, {});
  auto& logits = out.params.base_logits;
  auto& value = out.params.value;
  Rng rng(cfg.seed);
  std::size_t steps = 0;
  std::vector<double> pi(A);

  auto act = [&](StateId s, Rng& r) {
    softmax(std::span<const double>(logits.data() + s * A, A), pi);
    return r.categorical(pi);
  };
  auto greedy_eval = [&](Rng& r) {
    EvalResult res;
    for (std::size_t e = 0; e < cfg.eval_episodes; ++e) {
      StateId s = sample_start(map, env, r);
      EnvState st = reset(env, s);
      while (!st.done) st = step(st, env, map, act(st.state, r), r).env;
      res.steps.push_back(st.state == env.goal ? static_cast<double>(st.steps_elapsed)
                                               : static_cast<double>(env.episode_cap));
    }
    for (double v : res.steps) res.mean += v;
    res.mean /= static_cast<double>(res.steps.size());
    for (double v : res.steps) res.stddev += (v - res.mean) * (v - res.mean);
    res.stddev = std::sqrt(res.stddev / static_cast<double>(res.steps.size()));
    return res;
  };

  struct Step {
    StateId s;
    Action a;
    double r;
    StateId next;
    bool terminal;
  };
  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    if (cfg.max_env_steps > 0 && steps >= cfg.max_env_steps) break;
    std::vector<Step> traj;
    EnvState st = reset(env, sample_start(map, env, rng));
    while (!st.done) {
      if (cfg.max_env_steps > 0 && steps >= cfg.max_env_steps) break;
      Action a = act(st.state, rng);
      auto res = step(st, env, map, a, rng);
      traj.push_back({st.state, a, res.reward, res.env.state, res.done && res.env.state == env.goal});
      st = res.env;
      ++steps;
      if (steps % cfg.eval_every == 0) {
        Rng eval_rng(derive_seed(cfg.eval_seed, {steps / cfg.eval_every}));
        auto r = greedy_eval(eval_rng);
        out.curve.push_back({steps, r.mean, r.stddev});
      }
    }
    ++out.episodes_run;
    if (traj.empty()) continue;

    const std::size_t n = traj.size();
    std::vector<double> target(n);
    auto tail = [&](const Step& x) { return x.terminal ? 0.0 : value[x.next]; };
    if (cfg.bootstrap) {
      for (std::size_t t = 0; t < n; ++t) target[t] = traj[t].r + cfg.gamma * tail(traj[t]);
    } else {
      double g = tail(traj.back());
      for (std::size_t t = n; t-- > 0;) target[t] = g = traj[t].r + cfg.gamma * g;
    }
    std::vector<double> count(S, 0.0), g_logits(S * A, 0.0), dv(S, 0.0);
    for (const auto& x : traj) count[x.s] += 1.0;
    for (std::size_t t = 0; t < n; ++t) {
      const auto& x = traj[t];
      double adv = target[t] - value[x.s];
      softmax(std::span<const double>(logits.data() + x.s * A, A), pi);
      for (Action a = 0; a < A; ++a) g_logits[x.s * A + a] += adv * ((a == x.a ? 1.0 : 0.0) - pi[a]) / count[x.s];
      dv[x.s] += adv / count[x.s];
    }
    for (std::size_t k = 0; k < g_logits.size(); ++k) logits[k] += cfg.base_lr * g_logits[k];
    for (std::size_t s = 0; s < S; ++s) value[s] += cfg.critic_lr * dv[s];
  }
  out.env_steps = steps;
  return out;
}

}  // namespace optenc
