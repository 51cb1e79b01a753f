#pragma once

// JSON descriptions of trees, value processes, drivers, prior families and
// markets. Parsers collect every problem they find instead of stopping at the
// first one.

#include "rbsde/driver.hpp"
#include "rbsde/error.hpp"
#include "rbsde/market.hpp"
#include "rbsde/priors.hpp"
#include "rbsde/reflected.hpp"
#include "rbsde/tree.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace rbsde::io {

using Json = nlohmann::ordered_json;

/// Accumulates "path: message" lines.
class Issues {
 public:
  void add(const std::string& path, const std::string& msg) { list_.push_back(path + ": " + msg); }
  void append(const std::string& path, const std::vector<std::string>& msgs) {
    for (const auto& m : msgs) add(path, m);
  }
  bool empty() const noexcept { return list_.empty(); }
  const std::vector<std::string>& list() const noexcept { return list_; }
  void throw_if_any(Errc code = Errc::ValidationError) const {
    if (!list_.empty()) throw Error(code, list_);
  }

 private:
  std::vector<std::string> list_;
};

// ---------------------------------------------------------------------------
// Formatting

/// %.12g, with negative zero printed as 0.
inline std::string fmt12(double v) {
  if (v == 0.0) v = 0.0;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

/// The double nearest to its 12-significant-digit rendering (for JSON).
inline double round12(double v) {
  if (!std::isfinite(v)) return v;
  return std::stod(fmt12(v));
}

// ---------------------------------------------------------------------------
// Small typed readers

inline std::optional<double> read_number(const Json& j, const std::string& path, Issues& is) {
  if (!j.is_number()) {
    is.add(path, "expected a number");
    return std::nullopt;
  }
  return j.get<double>();
}

inline std::optional<int> read_int(const Json& j, const std::string& path, Issues& is) {
  if (!j.is_number_integer()) {
    is.add(path, "expected an integer");
    return std::nullopt;
  }
  return j.get<int>();
}

inline std::optional<Vec> read_vec(const Json& j, const std::string& path, Issues& is,
                                   std::optional<Eigen::Index> len = std::nullopt) {
  if (!j.is_array()) {
    is.add(path, "expected an array of numbers");
    return std::nullopt;
  }
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) {
      is.add(path + "[" + std::to_string(i) + "]", "expected a number");
      return std::nullopt;
    }
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  if (len && v.size() != *len) {
    is.add(path, "expected " + std::to_string(*len) + " entries, got " + std::to_string(v.size()));
    return std::nullopt;
  }
  return v;
}

inline std::optional<std::string> read_string(const Json& j, const std::string& path, Issues& is) {
  if (!j.is_string()) {
    is.add(path, "expected a string");
    return std::nullopt;
  }
  return j.get<std::string>();
}

// ---------------------------------------------------------------------------
// Trees

inline std::optional<TreeSpec> parse_tree_spec(const Json& j, const std::string& path, Issues& is) {
  if (!j.is_object()) {
    is.add(path, "tree must be an object");
    return std::nullopt;
  }
  if (j.contains("kernel")) {
    KernelSpec k;
    const auto h = j.contains("horizon") ? read_int(j["horizon"], path + ".horizon", is) : std::nullopt;
    if (!j.contains("horizon")) is.add(path, "kernel trees need \"horizon\"");
    if (h) k.horizon = *h;
    const Json& rows = j["kernel"];
    if (!rows.is_array() || rows.empty()) {
      is.add(path + ".kernel", "expected a nonempty array of rows");
      return std::nullopt;
    }
    // A flat array is a single row.
    if (rows[0].is_number()) {
      auto v = read_vec(rows, path + ".kernel", is);
      if (!v) return std::nullopt;
      k.rows.emplace_back(v->data(), v->data() + v->size());
    } else {
      for (std::size_t r = 0; r < rows.size(); ++r) {
        auto v = read_vec(rows[r], path + ".kernel[" + std::to_string(r) + "]", is);
        if (!v) return std::nullopt;
        k.rows.emplace_back(v->data(), v->data() + v->size());
      }
    }
    k.state_count = static_cast<int>(k.rows.front().size());
    if (j.contains("state_count"))
      if (auto m = read_int(j["state_count"], path + ".state_count", is)) k.state_count = *m;
    if (j.contains("initial_state"))
      if (auto s = read_int(j["initial_state"], path + ".initial_state", is)) k.initial_state = *s;
    for (const auto& issue : validate_tree_spec(k)) is.add(path, issue.message);
    return k;
  }
  if (!j.contains("nodes") || !j["nodes"].is_array()) {
    is.add(path, "tree needs \"kernel\" or a \"nodes\" array");
    return std::nullopt;
  }
  ExplicitTreeSpec e;
  if (j.contains("horizon"))
    if (auto h = read_int(j["horizon"], path + ".horizon", is)) e.horizon = *h;
  if (j.contains("state_count"))
    if (auto m = read_int(j["state_count"], path + ".state_count", is)) e.state_count = *m;
  bool ok = true;
  for (std::size_t i = 0; i < j["nodes"].size(); ++i) {
    const Json& n = j["nodes"][i];
    const std::string np = path + ".nodes[" + std::to_string(i) + "]";
    ExplicitNodeSpec ns;
    if (!n.is_object() || !n.contains("id") || !n.contains("time")) {
      is.add(np, "node needs \"id\" and \"time\"");
      ok = false;
      continue;
    }
    auto id = read_string(n["id"], np + ".id", is);
    auto t = read_int(n["time"], np + ".time", is);
    if (!id || !t) {
      ok = false;
      continue;
    }
    ns.id = *id;
    ns.time = *t;
    if (n.contains("children")) {
      for (std::size_t c = 0; c < n["children"].size(); ++c) {
        const Json& cj = n["children"][c];
        const std::string cp = np + ".children[" + std::to_string(c) + "]";
        if (!cj.is_object() || !cj.contains("state") || !cj.contains("prob") || !cj.contains("id")) {
          is.add(cp, "child needs \"state\", \"prob\" and \"id\"");
          ok = false;
          continue;
        }
        auto st = read_int(cj["state"], cp + ".state", is);
        auto pr = read_number(cj["prob"], cp + ".prob", is);
        auto cid = read_string(cj["id"], cp + ".id", is);
        if (!st || !pr || !cid) {
          ok = false;
          continue;
        }
        ns.children.push_back({*st, *pr, *cid});
      }
    }
    e.nodes.push_back(std::move(ns));
  }
  if (!ok) return std::nullopt;
  for (const auto& issue : validate_tree_spec(e)) is.add(path, issue.message);
  return e;
}

// ---------------------------------------------------------------------------
// Per-node values

enum class Scope { Leaves, All, NonTerminal };

/// A number, or an object keyed by node id (with optional "default").
inline std::optional<std::vector<double>> read_node_scalar(const Json& j, const ScenarioTree& tree, Scope scope,
                                                           const std::string& path, Issues& is) {
  if (j.is_number()) return std::vector<double>(tree.size(), j.get<double>());
  if (!j.is_object()) {
    is.add(path, "expected a number or an object keyed by node id");
    return std::nullopt;
  }
  std::optional<double> fallback;
  if (j.contains("default")) fallback = read_number(j["default"], path + ".default", is);
  std::vector<double> out(tree.size(), fallback.value_or(0.0));
  std::vector<char> seen(tree.size(), 0);
  bool ok = true;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "default") continue;
    const auto n = tree.find(it.key());
    if (!n) {
      is.add(path, "unknown node id '" + it.key() + "'");
      ok = false;
      continue;
    }
    if (auto v = read_number(it.value(), path + "." + it.key(), is)) {
      out[*n] = *v;
      seen[*n] = 1;
    } else {
      ok = false;
    }
  }
  if (!fallback) {
    std::vector<std::string> missing;
    for (NodeId n = 0; n < tree.size(); ++n) {
      const bool needed = scope == Scope::All || (scope == Scope::Leaves) == tree.is_terminal(n);
      if (needed && !seen[n]) missing.push_back(tree.node(n).id);
    }
    if (!missing.empty()) {
      std::string list;
      for (std::size_t i = 0; i < missing.size() && i < 8; ++i) list += (i ? ", '" : "'") + missing[i] + "'";
      if (missing.size() > 8) list += ", ...";
      is.add(path, "no value for " + std::to_string(missing.size()) + " node(s): " + list);
      ok = false;
    }
  }
  if (!ok) return std::nullopt;
  return out;
}

/// An array, or an object keyed by node id of arrays.
inline std::optional<std::vector<Vec>> read_node_vector(const Json& j, const ScenarioTree& tree, Eigen::Index len,
                                                        const std::string& path, Issues& is) {
  if (j.is_array()) {
    auto v = read_vec(j, path, is, len);
    if (!v) return std::nullopt;
    return std::vector<Vec>(tree.size(), *v);
  }
  if (!j.is_object()) {
    is.add(path, "expected an array or an object keyed by node id");
    return std::nullopt;
  }
  std::vector<Vec> out(tree.size(), Vec::Zero(len));
  std::vector<char> seen(tree.size(), 0);
  std::optional<Vec> fallback;
  if (j.contains("default")) fallback = read_vec(j["default"], path + ".default", is, len);
  if (fallback) std::fill(out.begin(), out.end(), *fallback);
  bool ok = true;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "default") continue;
    const auto n = tree.find(it.key());
    if (!n) {
      is.add(path, "unknown node id '" + it.key() + "'");
      ok = false;
      continue;
    }
    if (auto v = read_vec(it.value(), path + "." + it.key(), is, len)) {
      out[*n] = *v;
      seen[*n] = 1;
    } else {
      ok = false;
    }
  }
  if (!fallback)
    for (NodeId n = 0; n < tree.size(); ++n)
      if (!tree.is_terminal(n) && !seen[n]) {
        is.add(path, "no value for node '" + tree.node(n).id + "'");
        ok = false;
      }
  if (!ok) return std::nullopt;
  return out;
}

/// Value process: a number, a node table, or
/// {"walk": {"start", "steps": [per state], "mode": "multiplicative"|"additive"},
///  "payoff": "identity"|"call"|"put", "strike"}.
inline std::optional<AdaptedProcess> parse_values(const Json& j, const ScenarioTree& tree, Scope scope,
                                                  const std::string& path, Issues& is) {
  if (j.is_object() && j.contains("walk")) {
    const Json& w = j["walk"];
    const auto start = w.contains("start") ? read_number(w["start"], path + ".walk.start", is) : std::nullopt;
    if (!w.contains("start")) is.add(path + ".walk", "missing \"start\"");
    const auto steps = w.contains("steps") ? read_vec(w["steps"], path + ".walk.steps", is, tree.state_count())
                                           : std::nullopt;
    if (!w.contains("steps")) is.add(path + ".walk", "missing \"steps\"");
    std::string mode = "multiplicative";
    if (w.contains("mode"))
      if (auto s = read_string(w["mode"], path + ".walk.mode", is)) mode = *s;
    if (mode != "multiplicative" && mode != "additive") is.add(path + ".walk.mode", "unknown mode '" + mode + "'");
    std::string payoff = "identity";
    if (j.contains("payoff"))
      if (auto s = read_string(j["payoff"], path + ".payoff", is)) payoff = *s;
    double strike = 0.0;
    if (payoff == "call" || payoff == "put") {
      if (!j.contains("strike"))
        is.add(path, "payoff '" + payoff + "' needs \"strike\"");
      else if (auto k = read_number(j["strike"], path + ".strike", is))
        strike = *k;
    } else if (payoff != "identity") {
      is.add(path + ".payoff", "unknown payoff '" + payoff + "'");
    }
    if (!start || !steps) return std::nullopt;
    AdaptedProcess x(tree.size());
    x[tree.root()] = *start;
    for (NodeId n = 1; n < tree.size(); ++n) {
      const auto& node = tree.node(n);
      const double s = (*steps)(node.state);
      x[n] = mode == "additive" ? x[node.parent] + s : x[node.parent] * s;
    }
    AdaptedProcess out(tree.size());
    for (NodeId n = 0; n < tree.size(); ++n) {
      if (payoff == "call") out[n] = std::max(x[n] - strike, 0.0);
      else if (payoff == "put") out[n] = std::max(strike - x[n], 0.0);
      else out[n] = x[n];
    }
    return out;
  }
  auto v = read_node_scalar(j, tree, scope, path, is);
  if (!v) return std::nullopt;
  return AdaptedProcess(std::move(*v));
}

// ---------------------------------------------------------------------------
// Drivers and prior families

inline std::optional<KappaNorm> parse_norm(const Json& j, const std::string& path, Issues& is) {
  if (!j.contains("norm")) return KappaNorm::M;
  auto s = read_string(j["norm"], path + ".norm", is);
  if (!s) return std::nullopt;
  if (*s == "M") return KappaNorm::M;
  if (*s == "Mplus") return KappaNorm::Mplus;
  is.add(path + ".norm", "expected \"M\" or \"Mplus\"");
  return std::nullopt;
}

inline std::optional<ScenarioSet> parse_scenarios(const Json& j, const ScenarioTree& tree, const std::string& path,
                                                  Issues& is) {
  if (!j.contains("scenarios")) {
    is.add(path, "missing \"scenarios\"");
    return std::nullopt;
  }
  const Json& s = j["scenarios"];
  auto read_list = [&](const Json& arr, const std::string& p) -> std::optional<std::vector<Vec>> {
    if (!arr.is_array()) {
      is.add(p, "expected an array of probability vectors");
      return std::nullopt;
    }
    std::vector<Vec> out;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      auto v = read_vec(arr[i], p + "[" + std::to_string(i) + "]", is, tree.state_count());
      if (!v) return std::nullopt;
      out.push_back(*v);
    }
    return out;
  };
  if (s.is_array()) {
    auto list = read_list(s, path + ".scenarios");
    if (!list) return std::nullopt;
    return constant_scenarios(tree, *list);
  }
  if (!s.is_object()) {
    is.add(path + ".scenarios", "expected an array or an object keyed by node id");
    return std::nullopt;
  }
  ScenarioSet out(tree.size());
  for (auto it = s.begin(); it != s.end(); ++it) {
    const auto n = tree.find(it.key());
    if (!n) {
      is.add(path + ".scenarios", "unknown node id '" + it.key() + "'");
      return std::nullopt;
    }
    auto list = read_list(it.value(), path + ".scenarios." + it.key());
    if (!list) return std::nullopt;
    out[*n] = *list;
  }
  return out;
}

/// {"kind": "kappa", "kappa", "norm"} | {"kind": "scenario", "kappa", "scenarios"}
/// | {"kind": "explicit", "thetas": {node_id: [[...]]}, "baseline": true}.
inline std::optional<PriorFamily> parse_prior(const Json& j, const ScenarioTree& tree, const std::string& path,
                                              Issues& is) {
  if (!j.is_object() || !j.contains("kind")) {
    is.add(path, "prior needs \"kind\"");
    return std::nullopt;
  }
  auto kind = read_string(j["kind"], path + ".kind", is);
  if (!kind) return std::nullopt;
  const std::size_t before = is.list().size();
  if (*kind == "kappa" || *kind == "kappa_ignorance") {
    auto norm = parse_norm(j, path, is);
    std::optional<std::vector<double>> k;
    if (!j.contains("kappa"))
      is.add(path, "missing \"kappa\"");
    else
      k = read_node_scalar(j["kappa"], tree, Scope::NonTerminal, path + ".kappa", is);
    if (!norm || !k) return std::nullopt;
    PriorFamily f = PriorFamily::kappa_ignorance(tree, 0.0, *norm);
    f.kappa = *k;
    for (NodeId n = 0; n < tree.size(); ++n)
      if (!tree.is_terminal(n))
        is.append(path + " at node '" + tree.node(n).id + "'", kappa_issues(tree.stats(n), f.kappa[n], f.norm));
    if (is.list().size() != before) return std::nullopt;
    return f;
  }
  if (*kind == "scenario") {
    const auto k = j.contains("kappa") ? read_number(j["kappa"], path + ".kappa", is) : std::optional<double>(1.0);
    auto scen = parse_scenarios(j, tree, path, is);
    if (!k || !scen) return std::nullopt;
    try {
      validate_scenarios(tree, *k, *scen);
    } catch (const Error& e) {
      is.append(path, e.details());
      return std::nullopt;
    }
    return PriorFamily::scenario(tree, *k, std::move(*scen));
  }
  if (*kind == "explicit") {
    std::vector<std::vector<Vec>> opts(tree.size());
    if (!j.contains("thetas") || !j["thetas"].is_object()) {
      is.add(path, "explicit prior needs a \"thetas\" object keyed by node id");
      return std::nullopt;
    }
    for (auto it = j["thetas"].begin(); it != j["thetas"].end(); ++it) {
      const auto n = tree.find(it.key());
      const std::string p = path + ".thetas." + it.key();
      if (!n || tree.is_terminal(*n)) {
        is.add(p, "not a non-terminal node id");
        continue;
      }
      if (!it.value().is_array()) {
        is.add(p, "expected an array of theta vectors");
        continue;
      }
      for (std::size_t i = 0; i < it.value().size(); ++i) {
        auto v = read_vec(it.value()[i], p + "[" + std::to_string(i) + "]", is, tree.state_count());
        if (!v) continue;
        const auto bad = theta_issues(tree.stats(*n), *v, 1e-12);
        if (!bad.empty()) is.append(p + "[" + std::to_string(i) + "]", bad);
        opts[*n].push_back(*v);
      }
    }
    bool baseline = true;
    if (j.contains("baseline")) {
      if (!j["baseline"].is_boolean())
        is.add(path + ".baseline", "expected a boolean");
      else
        baseline = j["baseline"].get<bool>();
    }
    if (is.list().size() != before) return std::nullopt;
    return PriorFamily::explicit_family(std::move(opts), baseline);
  }
  is.add(path + ".kind", "unknown prior kind '" + *kind + "'");
  return std::nullopt;
}

/// Driver description; built against a tree by `make_driver`.
struct DriverSpec {
  std::string type = "zero";
  std::optional<AffineCoefficients> affine;
  std::optional<PriorFamily> family;
};

/// {"type": "zero"} | {"type": "affine", "alpha", "beta", "gamma"}
/// | {"type": "kappa_ignorance", "kappa", "norm"} | {"type": "scenario", "kappa", "scenarios"}.
inline std::optional<DriverSpec> parse_driver(const Json& j, const ScenarioTree& tree, const std::string& path,
                                              Issues& is) {
  if (!j.is_object() || !j.contains("type")) {
    is.add(path, "driver needs \"type\"");
    return std::nullopt;
  }
  auto type = read_string(j["type"], path + ".type", is);
  if (!type) return std::nullopt;
  DriverSpec d;
  d.type = *type;
  if (*type == "zero") return d;
  if (*type == "affine") {
    auto alpha = j.contains("alpha") ? read_node_scalar(j["alpha"], tree, Scope::NonTerminal, path + ".alpha", is)
                                     : std::optional<std::vector<double>>(std::vector<double>(tree.size(), 0.0));
    auto beta = j.contains("beta") ? read_node_scalar(j["beta"], tree, Scope::NonTerminal, path + ".beta", is)
                                   : std::optional<std::vector<double>>(std::vector<double>(tree.size(), 0.0));
    auto gamma = j.contains("gamma") ? read_node_vector(j["gamma"], tree, tree.state_count(), path + ".gamma", is)
                                     : std::optional<std::vector<Vec>>(
                                           std::vector<Vec>(tree.size(), Vec::Zero(tree.state_count())));
    if (!alpha || !beta || !gamma) return std::nullopt;
    for (NodeId n = 0; n < tree.size(); ++n)
      if (!tree.is_terminal(n) && !((*beta)[n] < 1.0))
        is.add(path + ".beta", "node '" + tree.node(n).id + "': beta >= 1 makes y - f non-increasing");
    d.affine = AffineCoefficients{std::move(*alpha), std::move(*beta), std::move(*gamma)};
    return d;
  }
  if (*type == "kappa_ignorance" || *type == "scenario") {
    Json pj = j;
    pj["kind"] = *type == "scenario" ? "scenario" : "kappa";
    auto f = parse_prior(pj, tree, path, is);
    if (!f) return std::nullopt;
    d.family = std::move(*f);
    return d;
  }
  if (*type == "custom") {
    is.add(path + ".type", "\"custom\" drivers are reserved and cannot be loaded from JSON");
    return std::nullopt;
  }
  is.add(path + ".type", "unknown driver type '" + *type + "'");
  return std::nullopt;
}

inline Driver make_driver(const ScenarioTree& tree, const DriverSpec& d) {
  if (d.type == "zero") return zero_driver();
  if (d.type == "affine") return affine_driver(tree, *d.affine, "affine");
  if (d.family) return family_driver(tree, *d.family);
  throw Error(Errc::ValidationError, "driver type '" + d.type + "' cannot be built");
}

// ---------------------------------------------------------------------------
// Markets

struct ClaimSpec {
  bool american = false;
  AdaptedProcess payoff;
};

struct MarketInput {
  MarketSpec spec;
  std::optional<Json> claim;  // resolved once prices exist
};

/// {"r": number | table, "assets": [{"S0", "b", "sigma"}], "claim": {...}}.
inline std::optional<MarketInput> parse_market(const Json& j, const ScenarioTree& tree, const std::string& path,
                                               Issues& is) {
  if (!j.is_object()) {
    is.add(path, "market must be an object");
    return std::nullopt;
  }
  const std::size_t before = is.list().size();
  auto r = j.contains("r") ? read_node_scalar(j["r"], tree, Scope::NonTerminal, path + ".r", is)
                           : std::optional<std::vector<double>>(std::vector<double>(tree.size(), 0.0));
  if (!j.contains("assets") || !j["assets"].is_array() || j["assets"].empty()) {
    is.add(path, "market needs a nonempty \"assets\" array");
    return std::nullopt;
  }
  const auto k = static_cast<Eigen::Index>(j["assets"].size());
  MarketInput out;
  out.spec.s0 = Vec::Zero(k);
  out.spec.b.assign(tree.size(), Vec::Zero(k));
  out.spec.sigma.assign(tree.size(), Mat::Zero(k, tree.state_count()));
  for (Eigen::Index a = 0; a < k; ++a) {
    const Json& aj = j["assets"][static_cast<std::size_t>(a)];
    const std::string ap = path + ".assets[" + std::to_string(a) + "]";
    if (!aj.is_object()) {
      is.add(ap, "asset must be an object");
      continue;
    }
    if (!aj.contains("S0") || !aj.contains("sigma")) is.add(ap, "asset needs \"S0\" and \"sigma\"");
    if (aj.contains("S0"))
      if (auto s = read_number(aj["S0"], ap + ".S0", is)) out.spec.s0(a) = *s;
    auto b = aj.contains("b") ? read_node_scalar(aj["b"], tree, Scope::NonTerminal, ap + ".b", is)
                              : std::optional<std::vector<double>>(std::vector<double>(tree.size(), 0.0));
    auto sg = aj.contains("sigma") ? read_node_vector(aj["sigma"], tree, tree.state_count(), ap + ".sigma", is)
                                   : std::nullopt;
    if (b)
      for (NodeId n = 0; n < tree.size(); ++n) out.spec.b[n](a) = (*b)[n];
    if (sg)
      for (NodeId n = 0; n < tree.size(); ++n) out.spec.sigma[n].row(a) = (*sg)[n].transpose();
  }
  if (r) out.spec.r = *r;
  if (j.contains("claim")) out.claim = j["claim"];
  if (is.list().size() != before) return std::nullopt;
  return out;
}

/// {"type": "european"|"american", "payoff": "call"|"put"|"table", "strike",
///  "asset": 0, "table": {...}}.
inline std::optional<ClaimSpec> parse_claim(const Json& j, const Market& mkt, const std::string& path, Issues& is) {
  if (!j.is_object()) {
    is.add(path, "claim must be an object");
    return std::nullopt;
  }
  ClaimSpec c;
  std::string type = "european";
  if (j.contains("type"))
    if (auto s = read_string(j["type"], path + ".type", is)) type = *s;
  if (type != "european" && type != "american") is.add(path + ".type", "expected \"european\" or \"american\"");
  c.american = type == "american";
  std::string payoff = "call";
  if (j.contains("payoff"))
    if (auto s = read_string(j["payoff"], path + ".payoff", is)) payoff = *s;
  int asset = 0;
  if (j.contains("asset"))
    if (auto a = read_int(j["asset"], path + ".asset", is)) asset = *a;
  if (asset < 0 || asset >= mkt.spec.asset_count()) {
    is.add(path + ".asset", "asset index out of range");
    return std::nullopt;
  }
  if (payoff == "table") {
    if (!j.contains("table")) {
      is.add(path, "payoff \"table\" needs a \"table\"");
      return std::nullopt;
    }
    auto v = read_node_scalar(j["table"], *mkt.tree, c.american ? Scope::All : Scope::Leaves, path + ".table", is);
    if (!v) return std::nullopt;
    c.payoff = AdaptedProcess(std::move(*v));
    return c;
  }
  if (payoff != "call" && payoff != "put" && payoff != "identity") {
    is.add(path + ".payoff", "unknown payoff '" + payoff + "'");
    return std::nullopt;
  }
  double strike = 0.0;
  if (payoff != "identity") {
    if (!j.contains("strike")) {
      is.add(path, "payoff '" + payoff + "' needs \"strike\"");
      return std::nullopt;
    }
    auto k = read_number(j["strike"], path + ".strike", is);
    if (!k) return std::nullopt;
    strike = *k;
  }
  const PayoffKind kind = payoff == "call" ? PayoffKind::Call : payoff == "put" ? PayoffKind::Put : PayoffKind::Identity;
  c.payoff = vanilla_payoff(mkt, kind, strike, asset);
  return c;
}

}  // namespace rbsde::io
