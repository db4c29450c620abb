#pragma once

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "optenc/core.hpp"
#include "optenc/dataset.hpp"
#include "optenc/hierarchy.hpp"
#include "optenc/spectral.hpp"

namespace optenc::io {

namespace fs = std::filesystem;
using nlohmann::json;

/// Shortest text that parses back to exactly the same double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Parses a full field as a double, subnormals included.
inline double parse_double(const std::string& text) {
  const char* begin = text.c_str();
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || (errno == ERANGE && std::abs(v) > 1.0))
    throw std::invalid_argument("not a number: '" + text + "'");
  return v;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }
inline json read_json(const fs::path& p) { return json::parse(read_text(p)); }

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline std::vector<std::vector<std::string>> read_csv(const fs::path& p, bool skip_header = true) {
  std::istringstream in(read_text(p));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first && skip_header) {
      first = false;
      continue;
    }
    first = false;
    rows.push_back(split(line));
  }
  return rows;
}

/// 64-bit FNV-1a; stable across platforms, used for stage cache keys.
inline std::uint64_t fnv1a(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---- policy tables ---------------------------------------------------------

inline std::string policy_csv(const PolicyTable& t) {
  std::string out = "state";
  for (Action a = 0; a < t.n_actions; ++a) out += ",p" + std::to_string(a);
  out += "\n";
  for (StateId s = 0; s < t.n_states; ++s) {
    out += std::to_string(s);
    for (double v : t.row(s)) out += "," + format_double(v);
    out += "\n";
  }
  return out;
}

inline PolicyTable parse_policy_csv(const fs::path& p) {
  auto rows = read_csv(p);
  if (rows.empty()) throw std::runtime_error("empty policy file " + p.string());
  PolicyTable t(rows.size(), rows.front().size() - 1);
  for (const auto& r : rows) {
    auto s = static_cast<StateId>(std::stoull(r.at(0)));
    if (s >= t.n_states || r.size() != t.n_actions + 1)
      throw std::runtime_error("malformed policy row in " + p.string());
    for (Action a = 0; a < t.n_actions; ++a) t.at(s, a) = parse_double(r[a + 1]);
  }
  return t;
}

inline json provenance_json(const Provenance& pv) {
  json j{{"kind", to_string(pv.kind)}, {"index", pv.index}, {"sign", pv.sign}};
  if (!pv.note.empty()) j["note"] = pv.note;
  return j;
}

inline Provenance provenance_from_json(const json& j) {
  Provenance pv;
  pv.kind = provenance_kind_from_string(j.at("kind").get<std::string>());
  pv.index = j.value("index", std::size_t{0});
  pv.sign = j.value("sign", 1);
  pv.note = j.value("note", std::string{});
  return pv;
}

/// Bundle = one CSV per policy plus manifest.json recording provenance.
inline void write_bundle(const fs::path& dir, const OptionSet& options, json extra = json::object()) {
  fs::create_directories(dir);
  json manifest = std::move(extra);
  manifest["count"] = options.size();
  manifest["n_actions"] = options.empty() ? kNumActions : options.front().table.n_actions;
  manifest["n_states"] = options.empty() ? 0 : options.front().table.n_states;
  json list = json::array();
  for (std::size_t k = 0; k < options.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "option_%03zu.csv", k);
    write_text(dir / name, policy_csv(options[k].table));
    json e{{"id", options[k].id}, {"file", name}, {"provenance", provenance_json(options[k].provenance)}};
    if (options[k].subgoal) e["subgoal"] = *options[k].subgoal;
    list.push_back(e);
  }
  manifest["options"] = list;
  write_json(dir / "manifest.json", manifest);
}

inline OptionSet read_bundle(const fs::path& dir) {
  auto manifest = read_json(dir / "manifest.json");
  OptionSet out;
  for (const auto& e : manifest.at("options")) {
    OptionPolicy o;
    o.id = e.at("id").get<std::size_t>();
    o.table = parse_policy_csv(dir / e.at("file").get<std::string>());
    o.provenance = provenance_from_json(e.at("provenance"));
    if (e.contains("subgoal")) o.subgoal = e.at("subgoal").get<StateId>();
    out.push_back(std::move(o));
  }
  return out;
}

inline OptionSet tables_to_options(const std::vector<PolicyTable>& tables, Provenance::Kind kind,
                                   const std::string& note = {}) {
  OptionSet out;
  for (std::size_t k = 0; k < tables.size(); ++k)
    out.push_back({k, tables[k], {kind, k, 1, note}, std::nullopt});
  return out;
}

inline std::vector<PolicyTable> option_tables(const OptionSet& options) {
  std::vector<PolicyTable> out;
  for (const auto& o : options) out.push_back(o.table);
  return out;
}

// ---- dataset ---------------------------------------------------------------

/// Dataset as `state,option,p0..` rows plus a JSON header.
inline void write_dataset(const fs::path& csv_path, const fs::path& header_path, const PolicyDataset& d) {
  std::string out = "state,option";
  for (Action a = 0; a < d.n_actions; ++a) out += ",p" + std::to_string(a);
  out += "\n";
  for (std::size_t r = 0; r < d.rows(); ++r)
    for (std::size_t j = 0; j < d.n_options; ++j) {
      out += std::to_string(d.states[r]) + "," + std::to_string(j);
      for (double v : d.expert(r, j)) out += "," + format_double(v);
      out += "\n";
    }
  write_text(csv_path, out);
  json h{{"n_options", d.n_options}, {"n_actions", d.n_actions}, {"n_states", d.n_states},
         {"rows", d.rows()}, {"mode", d.mode}, {"seed", d.seed}};
  if (!d.weights.empty()) h["weights"] = d.weights;
  write_json(header_path, h);
}

inline PolicyDataset read_dataset(const fs::path& csv_path, const fs::path& header_path) {
  auto h = read_json(header_path);
  PolicyDataset d;
  d.n_options = h.at("n_options").get<std::size_t>();
  d.n_actions = h.at("n_actions").get<std::size_t>();
  d.n_states = h.at("n_states").get<std::size_t>();
  d.mode = h.at("mode").get<std::string>();
  d.seed = h.at("seed").get<std::uint64_t>();
  if (h.contains("weights")) d.weights = h.at("weights").get<std::vector<double>>();
  auto rows = read_csv(csv_path);
  if (rows.size() != h.at("rows").get<std::size_t>() * d.n_options)
    throw std::runtime_error("dataset row count does not match header");
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& r = rows[k];
    if (r.size() != d.n_actions + 2) throw std::runtime_error("malformed dataset row");
    if (k % d.n_options == 0) d.states.push_back(static_cast<StateId>(std::stoull(r[0])));
    for (Action a = 0; a < d.n_actions; ++a) d.experts.push_back(parse_double(r[a + 2]));
  }
  d.validate(1e-9);
  return d;
}

// ---- learning curves -------------------------------------------------------

struct LabeledCurve {
  std::string agent;
  StateId goal = 0;
  std::uint64_t seed = 0;
  LearningCurve points;
};

inline std::string curves_csv(const std::vector<LabeledCurve>& curves) {
  std::string out = "env_steps,mean_steps,std_steps,goal_id,seed,agent_label\n";
  for (const auto& c : curves)
    for (const auto& p : c.points)
      out += std::to_string(p.env_steps) + "," + format_double(p.mean_steps) + "," +
             format_double(p.std_steps) + "," + std::to_string(c.goal) + "," + std::to_string(c.seed) +
             "," + c.agent + "\n";
  return out;
}

inline std::vector<LabeledCurve> read_curves(const fs::path& p) {
  std::vector<LabeledCurve> out;
  for (const auto& r : read_csv(p)) {
    if (r.size() != 6) throw std::runtime_error("malformed curve row in " + p.string());
    StateId goal = std::stoull(r[3]);
    std::uint64_t seed = std::stoull(r[4]);
    if (out.empty() || out.back().goal != goal || out.back().seed != seed || out.back().agent != r[5])
      out.push_back({r[5], goal, seed, {}});
    out.back().points.push_back({static_cast<std::size_t>(std::stoull(r[0])), parse_double(r[1]), parse_double(r[2])});
  }
  return out;
}

}  // namespace optenc::io
