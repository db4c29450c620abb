#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "optenc/core.hpp"
#include "optenc/dataset.hpp"
#include "optenc/encoder.hpp"
#include "optenc/gridworld.hpp"
#include "optenc/hierarchy.hpp"
#include "optenc/io.hpp"
#include "optenc/mimic.hpp"
#include "optenc/spectral.hpp"

namespace optenc {

inline constexpr const char* kCodeVersion = "optenc-1.0.0";

namespace fs = std::filesystem;
using nlohmann::json;

// ---- configuration ---------------------------------------------------------

struct ExperimentConfig {
  std::string map_path;
  EnvConfig env;

  struct Options {
    std::string source = "eigen";  // "eigen" or "goals"
    std::size_t n_options = 16;
    bool signs = true;
    LaplacianKind laplacian = LaplacianKind::Combinatorial;
    double tol = 1e-8;
    double expert_temperature = 0.0;
    std::vector<std::array<std::size_t, 2>> goal_cells;  // (row, col), for source = "goals"
  } options;

  struct Dataset {
    std::string mode = "exhaustive";  // or "rollout"
    std::size_t steps_per_option = 100;
  } dataset;

  std::size_t n_distilled = 4;
  TrainConfig encoder;
  MimicConfig mimic;
  TransferConfig transfer;

  std::size_t n_goals = 10;
  bool exclude_subgoals = true;
  std::vector<StateId> goals;  // explicit goals override sampling

  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0};
  std::vector<std::string> roster{"distilled", "vanilla"};

  struct Baselines {
    std::size_t average_policies = 5;
    std::size_t average_per_policy = 10;
    std::size_t subset_size = 5;
    std::size_t subset_count = 0;  // 0: N / subset_size
    std::size_t kmeans_iters = 100;
  } baselines;

  struct Heatmaps {
    std::vector<std::string> policies;  // subset of {distilled, amn_single, options, kmeans, random_average}
    std::size_t total_steps = 50000;
    std::size_t reset_interval = 100;
  } heatmaps;

  void validate() const {
    env.validate();
    transfer.validate();
    encoder.validate();
    mimic.validate();
    if (roster.empty()) throw std::invalid_argument("ExperimentConfig: roster is empty");
    static const std::set<std::string> known{"distilled",    "original", "amn_single", "random_subsets",
                                             "random_average", "kmeans",  "vanilla"};
    for (const auto& r : roster)
      if (!known.count(r)) throw std::invalid_argument("ExperimentConfig: unknown agent '" + r + "'");
    if (goals.empty() && n_goals < 1) throw std::invalid_argument("ExperimentConfig: need K >= 1 goals");
    if (seeds.empty()) throw std::invalid_argument("ExperimentConfig: seeds list is empty");
    if (n_distilled < 1) throw std::invalid_argument("ExperimentConfig: n_distilled must be >= 1");
    if (options.source != "eigen" && options.source != "goals")
      throw std::invalid_argument("ExperimentConfig: options.source must be 'eigen' or 'goals'");
    if (dataset.mode != "exhaustive" && dataset.mode != "rollout")
      throw std::invalid_argument("ExperimentConfig: dataset.mode must be 'exhaustive' or 'rollout'");
  }
};

namespace detail {

template <typename T>
void get_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline std::string mode_name(TableMode m) { return m == TableMode::PerState ? "per_state" : "global"; }
inline TableMode mode_from(const std::string& s) {
  if (s == "per_state") return TableMode::PerState;
  if (s == "global") return TableMode::Global;
  throw std::invalid_argument("unknown attention mode: " + s);
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["map"] = c.map_path;
  j["env"] = {{"intended_prob", c.env.intended_prob}, {"episode_cap", c.env.episode_cap},
              {"goal_reward", c.env.goal_reward},     {"step_reward", c.env.step_reward},
              {"discount", c.env.discount}};
  json goal_cells = json::array();
  for (auto gc : c.options.goal_cells) goal_cells.push_back({gc[0], gc[1]});
  j["options"] = {{"source", c.options.source},
                  {"n_options", c.options.n_options},
                  {"signs", c.options.signs},
                  {"laplacian", c.options.laplacian == LaplacianKind::Normalized ? "normalized" : "combinatorial"},
                  {"tol", c.options.tol},
                  {"expert_temperature", c.options.expert_temperature},
                  {"goal_cells", goal_cells}};
  j["dataset"] = {{"mode", c.dataset.mode}, {"steps_per_option", c.dataset.steps_per_option}};
  j["n_distilled"] = c.n_distilled;
  const auto& e = c.encoder;
  j["encoder"] = {{"loss", e.loss == LossKind::KL ? "kl" : "huber"},
                  {"kl_direction", e.kl_direction == KLDirection::Forward ? "forward" : "reverse"},
                  {"epsilon_smooth", e.epsilon_smooth},
                  {"huber_delta", e.huber_delta},
                  {"learning_rate", e.learning_rate},
                  {"max_learning_rate", e.max_learning_rate},
                  {"max_iters", e.max_iters},
                  {"grad_tol", e.grad_tol},
                  {"init_scale", e.init_scale},
                  {"encoder_mode", detail::mode_name(e.encoder_mode)},
                  {"decoder_mode", detail::mode_name(e.decoder_mode)}};
  const auto& m = c.mimic;
  j["mimic"] = {{"learning_rate", m.learning_rate}, {"max_iters", m.max_iters}, {"grad_tol", m.grad_tol},
                {"fit_tol", m.fit_tol},             {"tau", m.tau}};
  const auto& t = c.transfer;
  j["transfer"] = {{"termination_limit", t.termination_limit},
                   {"gamma", t.gamma},
                   {"attention_lr", t.attention_lr},
                   {"base_lr", t.base_lr},
                   {"critic_lr", t.critic_lr},
                   {"entropy_bonus", t.entropy_bonus},
                   {"episodes", t.episodes},
                   {"max_env_steps", t.max_env_steps},
                   {"eval_every", t.eval_every},
                   {"eval_episodes", t.eval_episodes},
                   {"bootstrap", t.bootstrap}};
  j["n_goals"] = c.n_goals;
  j["exclude_subgoals"] = c.exclude_subgoals;
  j["goals"] = c.goals;
  j["seed"] = c.seed;
  j["seeds"] = c.seeds;
  j["roster"] = c.roster;
  j["baselines"] = {{"average_policies", c.baselines.average_policies},
                    {"average_per_policy", c.baselines.average_per_policy},
                    {"subset_size", c.baselines.subset_size},
                    {"subset_count", c.baselines.subset_count},
                    {"kmeans_iters", c.baselines.kmeans_iters}};
  j["heatmaps"] = {{"policies", c.heatmaps.policies},
                   {"total_steps", c.heatmaps.total_steps},
                   {"reset_interval", c.heatmaps.reset_interval}};
  return j;
}

inline ExperimentConfig config_from_json(const json& j) {
  using detail::get_opt;
  ExperimentConfig c;
  get_opt(j, "map", c.map_path);
  if (j.contains("env")) {
    const auto& e = j.at("env");
    get_opt(e, "intended_prob", c.env.intended_prob);
    get_opt(e, "episode_cap", c.env.episode_cap);
    get_opt(e, "goal_reward", c.env.goal_reward);
    get_opt(e, "step_reward", c.env.step_reward);
    get_opt(e, "discount", c.env.discount);
  }
  if (j.contains("options")) {
    const auto& o = j.at("options");
    get_opt(o, "source", c.options.source);
    get_opt(o, "n_options", c.options.n_options);
    get_opt(o, "signs", c.options.signs);
    if (o.contains("laplacian")) {
      auto k = o.at("laplacian").get<std::string>();
      if (k == "normalized")
        c.options.laplacian = LaplacianKind::Normalized;
      else if (k == "combinatorial")
        c.options.laplacian = LaplacianKind::Combinatorial;
      else
        throw std::invalid_argument("unknown laplacian kind: " + k);
    }
    get_opt(o, "tol", c.options.tol);
    get_opt(o, "expert_temperature", c.options.expert_temperature);
    if (o.contains("goal_cells"))
      for (const auto& gc : o.at("goal_cells"))
        c.options.goal_cells.push_back({gc.at(0).get<std::size_t>(), gc.at(1).get<std::size_t>()});
  }
  if (j.contains("dataset")) {
    get_opt(j.at("dataset"), "mode", c.dataset.mode);
    get_opt(j.at("dataset"), "steps_per_option", c.dataset.steps_per_option);
  }
  get_opt(j, "n_distilled", c.n_distilled);
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    if (e.contains("loss")) {
      auto l = e.at("loss").get<std::string>();
      if (l != "kl" && l != "huber") throw std::invalid_argument("unknown encoder loss: " + l);
      c.encoder.loss = l == "kl" ? LossKind::KL : LossKind::Huber;
    }
    if (e.contains("kl_direction")) {
      auto d = e.at("kl_direction").get<std::string>();
      if (d != "forward" && d != "reverse") throw std::invalid_argument("unknown kl_direction: " + d);
      c.encoder.kl_direction = d == "reverse" ? KLDirection::Reverse : KLDirection::Forward;
    }
    get_opt(e, "epsilon_smooth", c.encoder.epsilon_smooth);
    get_opt(e, "huber_delta", c.encoder.huber_delta);
    get_opt(e, "learning_rate", c.encoder.learning_rate);
    get_opt(e, "max_learning_rate", c.encoder.max_learning_rate);
    get_opt(e, "max_iters", c.encoder.max_iters);
    get_opt(e, "grad_tol", c.encoder.grad_tol);
    get_opt(e, "init_scale", c.encoder.init_scale);
    if (e.contains("encoder_mode")) c.encoder.encoder_mode = detail::mode_from(e.at("encoder_mode"));
    if (e.contains("decoder_mode")) c.encoder.decoder_mode = detail::mode_from(e.at("decoder_mode"));
  }
  if (j.contains("mimic")) {
    const auto& m = j.at("mimic");
    get_opt(m, "learning_rate", c.mimic.learning_rate);
    get_opt(m, "max_iters", c.mimic.max_iters);
    get_opt(m, "grad_tol", c.mimic.grad_tol);
    get_opt(m, "fit_tol", c.mimic.fit_tol);
    get_opt(m, "tau", c.mimic.tau);
  }
  if (j.contains("transfer")) {
    const auto& t = j.at("transfer");
    get_opt(t, "termination_limit", c.transfer.termination_limit);
    get_opt(t, "gamma", c.transfer.gamma);
    get_opt(t, "attention_lr", c.transfer.attention_lr);
    get_opt(t, "base_lr", c.transfer.base_lr);
    get_opt(t, "critic_lr", c.transfer.critic_lr);
    get_opt(t, "entropy_bonus", c.transfer.entropy_bonus);
    get_opt(t, "episodes", c.transfer.episodes);
    get_opt(t, "max_env_steps", c.transfer.max_env_steps);
    get_opt(t, "eval_every", c.transfer.eval_every);
    get_opt(t, "eval_episodes", c.transfer.eval_episodes);
    get_opt(t, "bootstrap", c.transfer.bootstrap);
  }
  get_opt(j, "n_goals", c.n_goals);
  get_opt(j, "exclude_subgoals", c.exclude_subgoals);
  get_opt(j, "goals", c.goals);
  get_opt(j, "seed", c.seed);
  get_opt(j, "seeds", c.seeds);
  get_opt(j, "roster", c.roster);
  if (j.contains("baselines")) {
    const auto& b = j.at("baselines");
    get_opt(b, "average_policies", c.baselines.average_policies);
    get_opt(b, "average_per_policy", c.baselines.average_per_policy);
    get_opt(b, "subset_size", c.baselines.subset_size);
    get_opt(b, "subset_count", c.baselines.subset_count);
    get_opt(b, "kmeans_iters", c.baselines.kmeans_iters);
  }
  if (j.contains("heatmaps")) {
    get_opt(j.at("heatmaps"), "policies", c.heatmaps.policies);
    get_opt(j.at("heatmaps"), "total_steps", c.heatmaps.total_steps);
    get_opt(j.at("heatmaps"), "reset_interval", c.heatmaps.reset_interval);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  auto c = config_from_json(io::read_json(path));
  if (!c.map_path.empty() && fs::path(c.map_path).is_relative() && !fs::exists(c.map_path)) {
    auto alt = path.parent_path() / c.map_path;
    if (fs::exists(alt)) c.map_path = alt.string();
  }
  return c;
}

// ---- baselines -------------------------------------------------------------

namespace detail {

inline void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

}  // namespace detail

/// Seeded partition of the options into n_sets disjoint sets of `size`.
inline std::vector<OptionSet> random_subset_baseline(const OptionSet& options, std::size_t size,
                                                     std::size_t n_sets, std::uint64_t seed) {
  if (size == 0 || size * n_sets != options.size())
    throw std::invalid_argument("random_subset_baseline: size * n_sets (" + std::to_string(size * n_sets) +
                                ") must equal the number of options (" + std::to_string(options.size()) + ")");
  std::vector<std::size_t> idx(options.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  detail::shuffle(idx, rng);
  std::vector<OptionSet> out(n_sets);
  for (std::size_t k = 0; k < idx.size(); ++k) out[k / size].push_back(options[idx[k]]);
  for (auto& set : out)
    std::sort(set.begin(), set.end(), [](const OptionPolicy& a, const OptionPolicy& b) { return a.id < b.id; });
  return out;
}

/// Each source averages a seeded random subset of `per_policy` distinct
/// options; subsets are drawn independently, so options can recur across sources.
inline std::vector<PolicyTable> random_average_sources(const OptionSet& options, std::size_t n_policies,
                                                       std::size_t per_policy, std::uint64_t seed,
                                                       std::vector<std::vector<std::size_t>>* members = nullptr) {
  if (per_policy < 1 || per_policy > options.size())
    throw std::invalid_argument("random_average_sources: per_policy must be in [1, N]");
  Rng rng(seed);
  std::vector<PolicyTable> out;
  for (std::size_t k = 0; k < n_policies; ++k) {
    std::vector<std::size_t> idx(options.size());
    std::iota(idx.begin(), idx.end(), 0);
    detail::shuffle(idx, rng);
    idx.resize(per_policy);
    std::sort(idx.begin(), idx.end());
    std::vector<const OptionPolicy*> subset;
    for (auto i : idx) subset.push_back(&options[i]);
    out.push_back(average_policies(subset));
    if (members) members->push_back(idx);
  }
  return out;
}

// ---- heatmaps --------------------------------------------------------------

struct Heatmap {
  std::string label;
  std::vector<std::uint64_t> counts;  // per state
  std::uint64_t total_steps = 0;
};

/// Rolls `policy` for total_steps, counting the occupied state at every
/// step and resetting to a uniform random FREE state every reset_interval steps.
inline Heatmap visitation_heatmap(const PolicyTable& policy, const GridMap& map, const EnvConfig& cfg,
                                  std::size_t total_steps, std::size_t reset_interval, Rng& rng,
                                  std::string label = {}) {
  if (policy.n_states != map.num_states())
    throw std::invalid_argument("visitation_heatmap: policy does not cover the map");
  if (reset_interval < 1) throw std::invalid_argument("visitation_heatmap: reset_interval must be >= 1");
  Heatmap h;
  h.label = std::move(label);
  h.counts.assign(map.num_states(), 0);
  StateId s = 0;
  for (std::size_t t = 0; t < total_steps; ++t) {
    if (t % reset_interval == 0) s = rng.index(map.num_states());
    ++h.counts[s];
    ++h.total_steps;
    s = sample_next_state(map, cfg, s, rng.categorical(policy.row(s)), rng);
  }
  return h;
}

/// Visitation fractions in the top-left, top-right, bottom-left, bottom-right quadrants.
inline std::array<double, 4> quadrant_mass(const GridMap& map, const Heatmap& h) {
  std::array<double, 4> q{};
  for (StateId s = 0; s < map.num_states(); ++s) {
    auto [r, c] = map.position(s);
    std::size_t k = (r >= map.height() / 2 ? 2 : 0) + (c >= map.width() / 2 ? 1 : 0);
    q[k] += static_cast<double>(h.counts[s]);
  }
  for (double& v : q) v /= std::max<double>(1.0, static_cast<double>(h.total_steps));
  return q;
}

inline std::string heatmap_csv(const GridMap& map, const Heatmap& h) {
  std::string out;
  for (std::size_t r = 0; r < map.height(); ++r) {
    for (std::size_t c = 0; c < map.width(); ++c) {
      if (c) out += ",";
      auto s = map.state_at(r, c);
      out += s ? std::to_string(h.counts[*s]) : "-1";
    }
    out += "\n";
  }
  return out;
}

/// Plain (P2) 8-bit grayscale image, counts scaled to the maximum; walls are 0.
inline std::string heatmap_pgm(const GridMap& map, const Heatmap& h) {
  std::uint64_t mx = 1;
  for (auto v : h.counts) mx = std::max(mx, v);
  std::string out = "P2\n# " + (h.label.empty() ? std::string("heatmap") : h.label) + "\n" +
                    std::to_string(map.width()) + " " + std::to_string(map.height()) + "\n255\n";
  for (std::size_t r = 0; r < map.height(); ++r) {
    for (std::size_t c = 0; c < map.width(); ++c) {
      if (c) out += " ";
      auto s = map.state_at(r, c);
      std::uint64_t v = s ? (h.counts[*s] * 255 + mx / 2) / mx : 0;
      out += std::to_string(v);
    }
    out += "\n";
  }
  return out;
}

// ---- aggregation -----------------------------------------------------------

/// Left Riemann sum of the step function through the curve points.
inline double curve_auc(const LearningCurve& c) {
  double area = 0.0;
  std::size_t prev = 0;
  for (const auto& p : c) {
    area += p.mean_steps * static_cast<double>(p.env_steps - prev);
    prev = p.env_steps;
  }
  return area;
}

/// Value of the step function at x: the last point at or before x (the first
/// point when x precedes the curve).
inline double step_value(const LearningCurve& c, std::size_t x) {
  if (c.empty()) throw std::invalid_argument("step_value: empty curve");
  double v = c.front().mean_steps;
  for (const auto& p : c) {
    if (p.env_steps > x) break;
    v = p.mean_steps;
  }
  return v;
}

struct AggregateCurve {
  std::string agent;
  std::vector<std::size_t> env_steps;
  std::vector<double> mean;
  std::vector<double> stddev;
  std::size_t n_curves = 0;
};

struct AucRow {
  std::string agent;
  double mean_auc = 0.0;
  double std_auc = 0.0;
  std::size_t n_curves = 0;
};

struct ReportBundle {
  std::vector<AggregateCurve> curves;  // sorted by agent label
  std::vector<AucRow> auc;
  std::vector<Heatmap> heatmaps;

  const AucRow& auc_of(const std::string& agent) const {
    for (const auto& r : auc)
      if (r.agent == agent) return r;
    throw std::out_of_range("no AUC row for agent " + agent);
  }
};

inline ReportBundle aggregate_report(const std::vector<io::LabeledCurve>& curves,
                                     const std::vector<Heatmap>& heatmaps = {}) {
  if (curves.empty() && heatmaps.empty()) throw std::invalid_argument("aggregate_report: no inputs");
  std::map<std::string, std::vector<const io::LabeledCurve*>> by_agent;
  for (const auto& c : curves) {
    if (c.points.empty()) throw std::invalid_argument("aggregate_report: empty curve for " + c.agent);
    by_agent[c.agent].push_back(&c);
  }
  ReportBundle out;
  out.heatmaps = heatmaps;
  for (const auto& [agent, list] : by_agent) {
    std::set<std::size_t> grid;
    for (const auto* c : list)
      for (const auto& p : c->points) grid.insert(p.env_steps);
    AggregateCurve ag;
    ag.agent = agent;
    ag.n_curves = list.size();
    for (std::size_t x : grid) {
      double m = 0.0, sq = 0.0;
      for (const auto* c : list) m += step_value(c->points, x);
      m /= static_cast<double>(list.size());
      for (const auto* c : list) {
        double d = step_value(c->points, x) - m;
        sq += d * d;
      }
      ag.env_steps.push_back(x);
      ag.mean.push_back(m);
      ag.stddev.push_back(std::sqrt(sq / static_cast<double>(list.size())));
    }
    out.curves.push_back(std::move(ag));

    AucRow row;
    row.agent = agent;
    row.n_curves = list.size();
    for (const auto* c : list) row.mean_auc += curve_auc(c->points);
    row.mean_auc /= static_cast<double>(list.size());
    for (const auto* c : list) {
      double d = curve_auc(c->points) - row.mean_auc;
      row.std_auc += d * d;
    }
    row.std_auc = std::sqrt(row.std_auc / static_cast<double>(list.size()));
    out.auc.push_back(row);
  }
  return out;
}

inline void write_report(const fs::path& dir, const ReportBundle& r, const GridMap* map = nullptr) {
  fs::create_directories(dir);
  for (const auto& c : r.curves) {
    std::string text = "env_steps,mean_steps,std_steps,n_curves\n";
    for (std::size_t k = 0; k < c.env_steps.size(); ++k)
      text += std::to_string(c.env_steps[k]) + "," + io::format_double(c.mean[k]) + "," +
              io::format_double(c.stddev[k]) + "," + std::to_string(c.n_curves) + "\n";
    io::write_text(dir / ("aggregate_" + c.agent + ".csv"), text);
  }
  std::string auc = "agent_label,mean_auc,std_auc,n_curves\n";
  for (const auto& a : r.auc)
    auc += a.agent + "," + io::format_double(a.mean_auc) + "," + io::format_double(a.std_auc) + "," +
           std::to_string(a.n_curves) + "\n";
  io::write_text(dir / "auc.csv", auc);
  if (map)
    for (const auto& h : r.heatmaps) {
      io::write_text(dir / "heatmaps" / (h.label + ".csv"), heatmap_csv(*map, h));
      io::write_text(dir / "heatmaps" / (h.label + ".pgm"), heatmap_pgm(*map, h));
    }
}

// ---- pipeline --------------------------------------------------------------

class StageError : public std::runtime_error {
 public:
  StageError(const std::string& stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(stage) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Content-addressed stage cache. A stage reruns when any file it produced
/// is missing or when an upstream stage ran during this invocation.
class StageRunner {
 public:
  struct Record {
    std::string key;
    fs::path dir;
    bool executed = false;
    double seconds = 0.0;
  };

  explicit StageRunner(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

  const fs::path& run(const std::string& name, const json& material, const std::vector<std::string>& deps,
                      const std::function<void(const fs::path&)>& produce) {
    json keyed{{"stage", name}, {"material", material}, {"code_version", kCodeVersion}};
    bool dirty = false;
    json dep_keys = json::object();
    for (const auto& d : deps) {
      const auto& rec = records_.at(d);
      dep_keys[d] = rec.key;
      dirty = dirty || rec.executed;
    }
    keyed["deps"] = dep_keys;
    Record rec;
    rec.key = io::hex64(io::fnv1a(keyed.dump()));
    rec.dir = root_ / (name + "-" + rec.key);
    const auto marker = rec.dir / "stage.json";
    if (dirty || !complete(rec.dir)) {
      auto t0 = std::chrono::steady_clock::now();
      try {
        fs::remove_all(rec.dir);
        fs::create_directories(rec.dir);
        produce(rec.dir);
      } catch (const StageError&) {
        throw;
      } catch (const std::exception& e) {
        throw StageError(name, e.what());
      }
      json files = json::array();
      for (const auto& e : fs::recursive_directory_iterator(rec.dir))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), rec.dir).generic_string());
      std::sort(files.begin(), files.end());
      keyed["files"] = files;
      io::write_json(marker, keyed);
      rec.executed = true;
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    order_.push_back(name);
    return (records_[name] = rec).dir;
  }

  const Record& record(const std::string& name) const { return records_.at(name); }
  const std::vector<std::string>& order() const { return order_; }
  std::vector<std::string> executed() const {
    std::vector<std::string> out;
    for (const auto& n : order_)
      if (records_.at(n).executed) out.push_back(n);
    return out;
  }

 private:
  static bool complete(const fs::path& dir) {
    const auto marker = dir / "stage.json";
    if (!fs::exists(marker)) return false;
    const json stamp = io::read_json(marker);
    for (const auto& f : stamp.at("files"))
      if (!fs::exists(dir / f.get<std::string>())) return false;
    return true;
  }

  fs::path root_;
  std::map<std::string, Record> records_;
  std::vector<std::string> order_;
};

enum class PipelineTarget { Discover, Collect, Distill, Extract, Heatmap, Transfer, All };

struct RunManifest {
  json manifest;                         // deterministic; written to manifest.json
  json run_log;                          // wall-clock and cache activity; run_log.json
  std::vector<std::string> executed_stages;
  std::vector<std::string> curve_files;  // relative to out_dir
  std::vector<StateId> goals;
  std::vector<io::LabeledCurve> curves;
  std::vector<Heatmap> heatmaps;
};

/// Goals drawn uniformly from FREE states outside `excluded`, seeded.
inline std::vector<StateId> sample_goals(const GridMap& map, std::size_t k, const std::set<StateId>& excluded,
                                         std::uint64_t seed) {
  std::vector<std::size_t> cand;
  for (StateId s = 0; s < map.num_states(); ++s)
    if (!excluded.count(s)) cand.push_back(s);
  if (cand.size() < k)
    throw std::invalid_argument("sample_goals: only " + std::to_string(cand.size()) +
                                " eligible goal states for K = " + std::to_string(k));
  Rng rng(seed);
  detail::shuffle(cand, rng);
  cand.resize(k);
  return {cand.begin(), cand.end()};
}

inline std::vector<StateId> goal_states_from_cells(const GridMap& map,
                                                   const std::vector<std::array<std::size_t, 2>>& cells) {
  std::vector<StateId> out;
  for (auto [r, c] : cells) {
    auto s = map.state_at(r, c);
    if (!s)
      throw std::invalid_argument("goal cell (" + std::to_string(r) + "," + std::to_string(c) + ") is not FREE");
    out.push_back(*s);
  }
  return out;
}

namespace detail {

inline std::uint64_t label_salt(const std::string& s) { return io::fnv1a(s); }

inline std::vector<PolicyTable> mimic_tables(const std::vector<MimicFit>& fits) {
  std::vector<PolicyTable> out;
  for (const auto& f : fits) out.push_back(f.policy.table());
  return out;
}

inline void write_params_csv(const fs::path& p, const EncoderParams& e, bool encoder) {
  const auto& v = encoder ? e.encoder_logits : e.decoder_logits;
  const std::size_t K = e.action_slots();
  std::string out = "table,distilled,option,slot,value\n";
  const std::size_t tables = encoder ? e.encoder_tables() : e.decoder_tables();
  for (std::size_t t = 0; t < tables; ++t)
    for (std::size_t i = 0; i < e.n_distilled; ++i)
      for (std::size_t j = 0; j < e.n_options; ++j)
        for (std::size_t k = 0; k < K; ++k)
          out += std::to_string(t) + "," + std::to_string(i) + "," + std::to_string(j) + "," + std::to_string(k) +
                 "," + io::format_double(v[t * e.table_size() + e.slot(i, j, k)]) + "\n";
  io::write_text(p, out);
}

}  // namespace detail

/// Executes discover -> collect -> distill -> extract -> baselines ->
/// transfer -> report, reusing cached stages. Results land in out_dir.
inline RunManifest run_pipeline(const ExperimentConfig& cfg, const fs::path& out_dir, const fs::path& cache_dir,
                                PipelineTarget target = PipelineTarget::All) {
  cfg.validate();
  const auto wall0 = std::chrono::steady_clock::now();
  const std::string map_text = io::read_text(cfg.map_path);
  const GridMap map = load_map(map_text, fs::path(cfg.map_path).filename().string());
  const std::string map_hash = io::hex64(io::fnv1a(map_text));
  const json cj = to_json(cfg);
  StageRunner runner(cache_dir);
  fs::create_directories(out_dir);
  RunManifest rm;

  auto reached = [&](PipelineTarget t) { return static_cast<int>(target) >= static_cast<int>(t); };

  // discover
  json env_dyn{{"intended_prob", cfg.env.intended_prob}, {"discount", cfg.env.discount},
               {"goal_reward", cfg.env.goal_reward}, {"step_reward", cfg.env.step_reward}};
  const auto& discover_dir = runner.run("discover", {{"map", map_hash}, {"env", env_dyn}, {"options", cj["options"]}},
                                        {}, [&](const fs::path& dir) {
    SolveConfig sc;
    sc.tol = cfg.options.tol;
    sc.expert.temperature = cfg.options.expert_temperature;
    OptionSet options;
    if (cfg.options.source == "goals") {
      options = goal_options(map, cfg.env, goal_states_from_cells(map, cfg.options.goal_cells), sc);
    } else {
      DiscoverConfig dc;
      dc.n_options = cfg.options.n_options;
      dc.signs = cfg.options.signs;
      dc.kind = cfg.options.laplacian;
      dc.solve = sc;
      options = discover_options(map, cfg.env, dc);
    }
    io::write_bundle(dir / "options", options, {{"map", map.name}});
  });
  const OptionSet options = io::read_bundle(discover_dir / "options");
  const std::size_t N = options.size();

  std::set<StateId> subgoals;
  if (cfg.exclude_subgoals)
    for (const auto& o : options)
      if (o.subgoal) subgoals.insert(*o.subgoal);
  rm.goals = !cfg.goals.empty() ? cfg.goals : sample_goals(map, cfg.n_goals, subgoals, derive_seed(cfg.seed, {3}));
  for (StateId g : rm.goals)
    if (g >= map.num_states()) throw std::invalid_argument("goal state out of range");

  std::set<std::string> roster(cfg.roster.begin(), cfg.roster.end());
  std::set<std::string> heat(cfg.heatmaps.policies.begin(), cfg.heatmaps.policies.end());
  const bool want_transfer = reached(PipelineTarget::Transfer);
  const bool want_heat = reached(PipelineTarget::Heatmap) && !heat.empty();
  auto needs = [&](const std::string& what) {
    return (want_transfer && roster.count(what)) || (want_heat && heat.count(what));
  };

  std::optional<PolicyDataset> dataset;
  if (reached(PipelineTarget::Collect)) {
    const auto& dir = runner.run("collect", {{"dataset", cj["dataset"]}, {"seed", cfg.seed}}, {"discover"},
                                 [&](const fs::path& out) {
      auto d = cfg.dataset.mode == "rollout"
                   ? collect_rollout_dataset(options, map, cfg.env, cfg.dataset.steps_per_option,
                                             derive_seed(cfg.seed, {1}))
                   : collect_exhaustive_dataset(options, map);
      io::write_dataset(out / "dataset.csv", out / "dataset.json", d);
    });
    dataset = io::read_dataset(dir / "dataset.csv", dir / "dataset.json");
  }

  std::vector<PolicyTable> distilled;
  if (reached(PipelineTarget::Distill) && (target <= PipelineTarget::Extract || needs("distilled"))) {
    runner.run("distill", {{"encoder", cj["encoder"]}, {"M", cfg.n_distilled}, {"seed", cfg.seed}}, {"collect"},
               [&](const fs::path& out) {
      TrainConfig tc = cfg.encoder;
      tc.seed = derive_seed(cfg.seed, {2});
      auto tr = train(*dataset, cfg.n_distilled, tc);
      io::write_bundle(out / "distilled", io::tables_to_options(tr.distilled.policies, Provenance::Kind::Distilled));
      detail::write_params_csv(out / "encoder_logits.csv", tr.params, true);
      detail::write_params_csv(out / "decoder_logits.csv", tr.params, false);
      std::string hist = "iteration,loss\n";
      for (std::size_t k = 0; k < tr.loss_history.size(); ++k)
        hist += std::to_string(k) + "," + io::format_double(tr.loss_history[k]) + "\n";
      io::write_text(out / "loss_history.csv", hist);
      io::write_json(out / "encoder.json", {{"M", cfg.n_distilled},
                                            {"N", N},
                                            {"loss", cj["encoder"]["loss"]},
                                            {"epsilon_smooth", tc.epsilon_smooth},
                                            {"seed", tc.seed},
                                            {"iterations", tr.iterations},
                                            {"converged", tr.converged},
                                            {"final_loss", tr.loss_history.back()},
                                            {"mean_kl", mean_kl(tr.params, *dataset)}});
    });
    if (reached(PipelineTarget::Extract)) {
      const auto& dir = runner.run("extract", {{"mimic", cj["mimic"]}}, {"distill"}, [&](const fs::path& out) {
        auto bundle = io::read_bundle(runner.record("distill").dir / "distilled");
        DistilledSet ds;
        ds.n_distilled = bundle.size();
        ds.policies = io::option_tables(bundle);
        ds.defined.assign(map.num_states(), false);
        for (StateId s : dataset->states) ds.defined[s] = true;
        io::write_bundle(out / "mimic", io::tables_to_options(detail::mimic_tables(extract_distilled(ds, cfg.mimic)),
                                                              Provenance::Kind::Mimic, "distilled"));
      });
      distilled = io::option_tables(io::read_bundle(dir / "mimic"));
    }
  }

  std::vector<PolicyTable> amn, kmeans, averaged;
  std::vector<OptionSet> subsets;
  if (reached(PipelineTarget::Heatmap)) {
    if (needs("amn_single")) {
      const auto& dir = runner.run("amn_single", {{"mimic", cj["mimic"]}}, {"collect"}, [&](const fs::path& out) {
        io::write_bundle(out / "amn", io::tables_to_options({distill_to_single(*dataset, cfg.mimic).policy.table()},
                                                            Provenance::Kind::Mimic, "amn_single"));
      });
      amn = io::option_tables(io::read_bundle(dir / "amn"));
    }
    if (needs("kmeans")) {
      const auto& dir = runner.run("kmeans", {{"M", cfg.n_distilled}, {"seed", cfg.seed}, {"baselines", cj["baselines"]}},
                                   {"collect"}, [&](const fs::path& out) {
        auto km = kmeans_policies(*dataset, cfg.n_distilled, derive_seed(cfg.seed, {4}), cfg.baselines.kmeans_iters);
        io::write_bundle(out / "kmeans", io::tables_to_options(km.centroids, Provenance::Kind::KMeans),
                         {{"assignment", km.assignment}, {"inertia", km.inertia}});
      });
      kmeans = io::option_tables(io::read_bundle(dir / "kmeans"));
    }
    if (needs("random_average")) {
      const auto& dir = runner.run("random_average", {{"seed", cfg.seed}, {"baselines", cj["baselines"]}},
                                   {"discover"}, [&](const fs::path& out) {
        std::vector<std::vector<std::size_t>> members;
        auto tables = random_average_sources(options, cfg.baselines.average_policies, cfg.baselines.average_per_policy,
                                             derive_seed(cfg.seed, {5}), &members);
        io::write_bundle(out / "average", io::tables_to_options(tables, Provenance::Kind::Average),
                         {{"members", members}});
      });
      averaged = io::option_tables(io::read_bundle(dir / "average"));
    }
    if (needs("random_subsets")) {
      const std::size_t size = cfg.baselines.subset_size;
      const std::size_t count = cfg.baselines.subset_count ? cfg.baselines.subset_count : (size ? N / size : 0);
      const auto& dir = runner.run("random_subsets", {{"seed", cfg.seed}, {"baselines", cj["baselines"]}},
                                   {"discover"}, [&](const fs::path& out) {
        json sets = json::array();
        for (const auto& s : random_subset_baseline(options, size, count, derive_seed(cfg.seed, {6}))) {
          json ids = json::array();
          for (const auto& o : s) ids.push_back(o.id);
          sets.push_back(ids);
        }
        io::write_json(out / "partition.json", {{"sets", sets}});
      });
      const json partition = io::read_json(dir / "partition.json");
      for (const auto& ids : partition.at("sets")) {
        OptionSet set;
        for (const auto& id : ids) set.push_back(options.at(id.get<std::size_t>()));
        subsets.push_back(std::move(set));
      }
    }
  }

  // heatmaps
  if (want_heat) {
    std::vector<std::string> deps;
    std::vector<std::pair<std::string, const std::vector<PolicyTable>*>> groups;
    std::vector<PolicyTable> option_tables = io::option_tables(options);
    auto add = [&](const std::string& name, const std::string& stage, const std::vector<PolicyTable>* t) {
      if (!heat.count(name)) return;
      deps.push_back(stage);
      groups.push_back({name, t});
    };
    add("distilled", "extract", &distilled);
    add("amn_single", "amn_single", &amn);
    add("kmeans", "kmeans", &kmeans);
    add("random_average", "random_average", &averaged);
    add("options", "discover", &option_tables);
    const auto& dir = runner.run("heatmaps", {{"heatmaps", cj["heatmaps"]}, {"seed", cfg.seed}, {"env", env_dyn}}, deps,
                                 [&](const fs::path& out) {
      json index = json::array();
      for (const auto& [name, tables] : groups)
        for (std::size_t k = 0; k < tables->size(); ++k) {
          std::string label = name + "_" + std::to_string(k);
          Rng rng(derive_seed(cfg.seed, {7, detail::label_salt(name), k}));
          auto h = visitation_heatmap((*tables)[k], map, cfg.env, cfg.heatmaps.total_steps,
                                      cfg.heatmaps.reset_interval, rng, label);
          io::write_text(out / (label + ".csv"), heatmap_csv(map, h));
          io::write_text(out / (label + ".pgm"), heatmap_pgm(map, h));
          std::string counts = "state,count\n";
          for (StateId s = 0; s < h.counts.size(); ++s)
            counts += std::to_string(s) + "," + std::to_string(h.counts[s]) + "\n";
          io::write_text(out / (label + ".counts.csv"), counts);
          index.push_back(label);
        }
      io::write_json(out / "heatmaps.json", {{"labels", index}});
    });
    const json index = io::read_json(dir / "heatmaps.json");
    for (const auto& label : index.at("labels")) {
      Heatmap h;
      h.label = label.get<std::string>();
      h.counts.assign(map.num_states(), 0);
      for (const auto& row : io::read_csv(dir / (h.label + ".counts.csv"))) {
        h.counts[std::stoull(row[0])] = std::stoull(row[1]);
        h.total_steps += std::stoull(row[1]);
      }
      fs::create_directories(out_dir / "heatmaps");
      for (const char* ext : {".csv", ".pgm"})
        fs::copy_file(dir / (h.label + ext), out_dir / "heatmaps" / (h.label + ext),
                      fs::copy_options::overwrite_existing);
      rm.heatmaps.push_back(std::move(h));
    }
  }

  // transfer
  if (want_transfer) {
    struct Agent {
      std::string label;
      std::string stage;
      std::vector<PolicyTable> sources;
    };
    std::vector<Agent> agents;
    for (const auto& r : cfg.roster) {
      if (r == "distilled") agents.push_back({r, "extract", distilled});
      if (r == "original") agents.push_back({r, "discover", io::option_tables(options)});
      if (r == "amn_single") agents.push_back({r, "amn_single", amn});
      if (r == "kmeans") agents.push_back({r, "kmeans", kmeans});
      if (r == "random_average") agents.push_back({r, "random_average", averaged});
      if (r == "vanilla") agents.push_back({r, "discover", {}});
      if (r == "random_subsets")
        for (std::size_t k = 0; k < subsets.size(); ++k)
          agents.push_back({"random_subset_" + std::to_string(k), "random_subsets", io::option_tables(subsets[k])});
    }
    json env_task{{"episode_cap", cfg.env.episode_cap}, {"dyn", env_dyn}};
    for (const auto& agent : agents) {
      const auto& dir = runner.run("transfer_" + agent.label,
                                   {{"transfer", cj["transfer"]}, {"env", env_task}, {"goals", rm.goals},
                                    {"seeds", cfg.seeds}, {"label", agent.label}},
                                   {agent.stage}, [&](const fs::path& out) {
        std::vector<io::LabeledCurve> curves;
        for (StateId g : rm.goals)
          for (auto seed : cfg.seeds) {
            EnvConfig env = cfg.env;
            env.goal = g;
            TransferConfig tc = cfg.transfer;
            tc.seed = derive_seed(seed, {g, 1});
            tc.eval_seed = derive_seed(seed, {g, 2});
            auto res = agent.label == "vanilla" ? train_actor_critic(map, env, tc)
                                                : train_transfer(agent.sources, map, env, tc);
            curves.push_back({agent.label, g, seed, std::move(res.curve)});
          }
        io::write_text(out / "curves.csv", io::curves_csv(curves));
      });
      std::string rel = "curves/" + agent.label + ".csv";
      fs::create_directories(out_dir / "curves");
      fs::copy_file(dir / "curves.csv", out_dir / rel, fs::copy_options::overwrite_existing);
      rm.curve_files.push_back(rel);
      for (auto& c : io::read_curves(dir / "curves.csv")) rm.curves.push_back(std::move(c));
    }
  }

  if (target == PipelineTarget::All && (!rm.curves.empty() || !rm.heatmaps.empty()))
    write_report(out_dir / "report", aggregate_report(rm.curves, rm.heatmaps), &map);

  // artifacts requested by the partial targets
  auto copy_dir = [&](const fs::path& from, const fs::path& to) {
    fs::remove_all(to);
    fs::create_directories(to);
    fs::copy(from, to, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  };
  if (target == PipelineTarget::Discover) copy_dir(discover_dir / "options", out_dir / "options");
  if (target == PipelineTarget::Collect) copy_dir(runner.record("collect").dir, out_dir / "dataset");
  if (target == PipelineTarget::Distill) copy_dir(runner.record("distill").dir, out_dir / "distill");
  if (target == PipelineTarget::Extract) copy_dir(runner.record("extract").dir / "mimic", out_dir / "mimic");

  json stages = json::array();
  for (const auto& name : runner.order()) stages.push_back({{"name", name}, {"key", runner.record(name).key}});
  rm.executed_stages = runner.executed();
  rm.manifest = {{"code_version", kCodeVersion},
                 {"config", cj},
                 {"map_hash", map_hash},
                 {"goals", rm.goals},
                 {"seeds", cfg.seeds},
                 {"stages", stages},
                 {"curves", rm.curve_files},
                 {"n_curves", rm.curves.size()},
                 {"notes",
                  {{"evaluation_steps_counted_in_budget", false},
                   {"goal_sampling", cfg.goals.empty() ? (cfg.exclude_subgoals ? "uniform over FREE states excluding option subgoals"
                                                                               : "uniform over FREE states")
                                                       : "explicit"}}}};
  io::write_json(out_dir / "manifest.json", rm.manifest);

  json timings = json::object();
  for (const auto& name : runner.order())
    timings[name] = {{"executed", runner.record(name).executed}, {"seconds", runner.record(name).seconds}};
  rm.run_log = {{"stages", timings},
                {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count()}};
  io::write_json(out_dir / "run_log.json", rm.run_log);
  return rm;
}

struct SweepResult {
  std::string param;
  std::vector<std::string> values;
  std::vector<RunManifest> runs;
  std::vector<io::LabeledCurve> curves;  // agent labels suffixed with [param=value]
};

/// Reruns the pipeline once per value of M, T or N_experts, sharing the stage cache.
inline SweepResult sweep(const ExperimentConfig& base, const std::string& param, const std::vector<std::size_t>& values,
                         const fs::path& out_dir, const fs::path& cache_dir) {
  if (param != "M" && param != "T" && param != "N_experts")
    throw std::invalid_argument("sweep: unknown parameter '" + param + "' (expected M, T or N_experts)");
  if (values.empty()) throw std::invalid_argument("sweep: no values");
  SweepResult out;
  out.param = param;
  for (auto v : values) {
    ExperimentConfig cfg = base;
    if (param == "M") cfg.n_distilled = v;
    if (param == "T") cfg.transfer.termination_limit = v;
    if (param == "N_experts") cfg.options.n_options = v;
    std::string tag = param + "=" + std::to_string(v);
    auto rm = run_pipeline(cfg, out_dir / tag, cache_dir);
    for (auto c : rm.curves) {
      c.agent += "[" + tag + "]";
      out.curves.push_back(std::move(c));
    }
    out.values.push_back(tag);
    out.runs.push_back(std::move(rm));
  }
  io::write_text(out_dir / "sweep_curves.csv", io::curves_csv(out.curves));
  write_report(out_dir / "report", aggregate_report(out.curves));
  return out;
}

}  // namespace optenc
