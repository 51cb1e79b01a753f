#pragma once

// Experiment specs: loading, running and writing reports (one CSV per
// process plus an ordered JSON summary).

#include "rbsde/bsde.hpp"
#include "rbsde/error.hpp"
#include "rbsde/io.hpp"
#include "rbsde/market.hpp"
#include "rbsde/priors.hpp"
#include "rbsde/reflected.hpp"
#include "rbsde/tree.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace rbsde::lab {

using io::Json;
namespace fs = std::filesystem;

enum class Task {
  SolveBsde,
  SolveRbsde,
  Penalization,
  RobustExpectation,
  PriceEuropean,
  PriceAmerican,
  AmbiguityStoppingDemo
};

inline std::optional<Task> parse_task(const std::string& s) {
  if (s == "solve_bsde") return Task::SolveBsde;
  if (s == "solve_rbsde") return Task::SolveRbsde;
  if (s == "penalization") return Task::Penalization;
  if (s == "robust_expectation") return Task::RobustExpectation;
  if (s == "price_european") return Task::PriceEuropean;
  if (s == "price_american") return Task::PriceAmerican;
  if (s == "ambiguity_stopping_demo") return Task::AmbiguityStoppingDemo;
  return std::nullopt;
}

enum class OracleMode { On, Off, Auto };

struct RunOptions {
  double tolerance = 1e-9;
  OracleMode oracle = OracleMode::Auto;
};

struct ExperimentSpec {
  std::string name;
  Task task = Task::SolveBsde;
  std::string task_name;
  std::shared_ptr<const ScenarioTree> tree;

  std::optional<io::DriverSpec> driver;
  std::optional<AdaptedProcess> terminal;
  Obstacle obstacle;
  std::optional<PriorFamily> prior;
  bool take_inf = true;
  double n_max = 16384.0;
  bool audit = false;

  std::shared_ptr<const Market> market;
  std::optional<io::ClaimSpec> claim;

  // ambiguity_stopping_demo
  double mu = 0.0;
  Vec sigma;
  double s0 = 1.0;
  std::vector<std::optional<double>> kappas;  // nullopt = derived
  KappaNorm norm = KappaNorm::M;
};

// ---------------------------------------------------------------------------
// Loading

inline Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ParseError, "cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(Errc::ParseError, path.string() + ": " + e.what());
  }
}

/// Inline object, or a string path relative to `base`.
inline std::optional<Json> resolve_ref(const Json& j, const fs::path& base, const std::string& path, io::Issues& is) {
  if (!j.is_string()) return j;
  const fs::path p = base / j.get<std::string>();
  try {
    return read_json_file(p);
  } catch (const Error& e) {
    is.add(path, e.details().front());
    return std::nullopt;
  }
}

inline const char* kStandardData = "standard data require S_T <= xi on every leaf";

inline ExperimentSpec load_experiment(const Json& j, const fs::path& base, const std::string& path, io::Issues& is) {
  ExperimentSpec spec;
  if (!j.is_object()) {
    is.add(path, "experiment must be an object");
    return spec;
  }
  if (j.contains("name")) {
    if (auto s = io::read_string(j["name"], path + ".name", is)) spec.name = *s;
  } else {
    is.add(path, "missing \"name\"");
  }
  if (spec.name.find_first_of("/\\") != std::string::npos || spec.name == "." || spec.name == "..")
    is.add(path + ".name", "must be a plain file name");
  if (!j.contains("task")) {
    is.add(path, "missing \"task\"");
    return spec;
  }
  auto task_s = io::read_string(j["task"], path + ".task", is);
  if (!task_s) return spec;
  auto task = parse_task(*task_s);
  if (!task) {
    is.add(path + ".task", "unknown task '" + *task_s + "'");
    return spec;
  }
  spec.task = *task;
  spec.task_name = *task_s;
  if (!j.contains("tree")) {
    is.add(path, "missing \"tree\"");
    return spec;
  }
  auto tree_json = resolve_ref(j["tree"], base, path + ".tree", is);
  if (!tree_json) return spec;
  const std::size_t before_tree = is.list().size();
  auto tree_spec = io::parse_tree_spec(*tree_json, path + ".tree", is);
  if (!tree_spec || is.list().size() != before_tree) return spec;
  spec.tree = std::make_shared<const ScenarioTree>(build_tree(*tree_spec));
  const ScenarioTree& tree = *spec.tree;

  const Json params = j.contains("params") ? j["params"] : Json::object();
  const std::string pp = path + ".params";
  auto need = [&](const char* key) -> const Json* {
    if (!params.contains(key)) {
      is.add(pp, std::string("missing \"") + key + "\" for task " + *task_s);
      return nullptr;
    }
    return &params[key];
  };
  auto load_terminal = [&]() {
    if (const Json* t = need("terminal")) spec.terminal = io::parse_values(*t, tree, io::Scope::Leaves, pp + ".terminal", is);
  };
  auto load_obstacle = [&](bool required) {
    if (!params.contains("obstacle")) {
      if (required) is.add(pp, "missing \"obstacle\" for task " + *task_s);
      return;
    }
    if (auto s = io::parse_values(params["obstacle"], tree, io::Scope::All, pp + ".obstacle", is))
      spec.obstacle = Obstacle::of(*s);
  };
  auto load_driver = [&]() {
    if (const Json* d = need("driver")) {
      if (auto dj = resolve_ref(*d, base, pp + ".driver", is)) spec.driver = io::parse_driver(*dj, tree, pp + ".driver", is);
    }
  };
  auto load_mode = [&]() {
    if (!params.contains("mode")) return;
    auto m = io::read_string(params["mode"], pp + ".mode", is);
    if (m && *m != "inf" && *m != "sup") is.add(pp + ".mode", "expected \"inf\" or \"sup\"");
    if (m) spec.take_inf = *m != "sup";
  };
  auto check_standard = [&]() {
    if (!spec.terminal || !spec.obstacle.present()) return;
    for (NodeId leaf : tree.leaves())
      if (spec.obstacle[leaf] > (*spec.terminal)[leaf])
        is.add(pp + ".obstacle", std::string(kStandardData) + ", violated at leaf '" + tree.node(leaf).id + "'");
  };

  switch (spec.task) {
    case Task::SolveBsde:
      load_driver();
      load_terminal();
      if (params.contains("audit") && params["audit"].is_boolean()) spec.audit = params["audit"].get<bool>();
      break;
    case Task::SolveRbsde:
    case Task::Penalization:
      load_driver();
      load_terminal();
      load_obstacle(spec.task == Task::Penalization);
      check_standard();
      if (spec.task == Task::Penalization && params.contains("n_max")) {
        if (auto n = io::read_number(params["n_max"], pp + ".n_max", is)) {
          if (*n < 1.0) is.add(pp + ".n_max", "must be >= 1");
          spec.n_max = *n;
        }
      }
      break;
    case Task::RobustExpectation:
      if (const Json* p = need("prior"))
        if (auto pj = resolve_ref(*p, base, pp + ".prior", is)) spec.prior = io::parse_prior(*pj, tree, pp + ".prior", is);
      load_terminal();
      load_obstacle(false);
      load_mode();
      check_standard();
      break;
    case Task::PriceEuropean:
    case Task::PriceAmerican: {
      const Json* m = need("market");
      if (!m) break;
      auto mj = resolve_ref(*m, base, pp + ".market", is);
      if (!mj) break;
      const std::size_t before = is.list().size();
      auto mi = io::parse_market(*mj, tree, pp + ".market", is);
      if (!mi || is.list().size() != before) break;
      try {
        spec.market = std::make_shared<const Market>(build_market(tree, mi->spec));
      } catch (const Error& e) {
        is.append(pp + ".market (" + std::string(to_string(e.code())) + ")", e.details());
        break;
      }
      Json claim = params.contains("claim") ? params["claim"] : mi->claim.value_or(Json());
      if (claim.is_null()) {
        is.add(pp, "missing \"claim\" (in params or market)");
        break;
      }
      if (!claim.contains("type")) claim["type"] = spec.task == Task::PriceAmerican ? "american" : "european";
      spec.claim = io::parse_claim(claim, *spec.market, pp + ".claim", is);
      if (spec.claim && spec.claim->american != (spec.task == Task::PriceAmerican))
        is.add(pp + ".claim.type", "claim type does not match task " + *task_s);
      if (spec.claim && spec.claim->american && claim.contains("terminal")) {
        // Separate terminal values for an American claim must dominate the exercise payoff.
        auto term = io::parse_values(claim["terminal"], tree, io::Scope::Leaves, pp + ".claim.terminal", is);
        if (term) {
          for (NodeId leaf : tree.leaves())
            if (spec.claim->payoff[leaf] > (*term)[leaf])
              is.add(pp + ".claim.terminal",
                     std::string(kStandardData) + ", violated at leaf '" + tree.node(leaf).id + "'");
          spec.terminal = term;
        }
      }
      break;
    }
    case Task::AmbiguityStoppingDemo: {
      if (const Json* v = need("mu"))
        if (auto x = io::read_number(*v, pp + ".mu", is)) spec.mu = *x;
      if (const Json* v = need("sigma"))
        if (auto x = io::read_vec(*v, pp + ".sigma", is, tree.state_count())) spec.sigma = *x;
      if (params.contains("S0"))
        if (auto x = io::read_number(params["S0"], pp + ".S0", is)) spec.s0 = *x;
      if (spec.s0 <= 0.0) is.add(pp + ".S0", "must be positive");
      if (auto nm = io::parse_norm(params, pp, is)) spec.norm = *nm;
      if (params.contains("kappas")) {
        const Json& ks = params["kappas"];
        if (!ks.is_array()) is.add(pp + ".kappas", "expected an array of numbers or \"derived\"");
        for (std::size_t i = 0; ks.is_array() && i < ks.size(); ++i) {
          if (ks[i].is_string() && ks[i].get<std::string>() == "derived")
            spec.kappas.push_back(std::nullopt);
          else if (auto x = io::read_number(ks[i], pp + ".kappas[" + std::to_string(i) + "]", is))
            spec.kappas.push_back(*x);
        }
      } else {
        spec.kappas = {0.0, std::nullopt};
      }
      break;
    }
  }
  // Building the driver validates kappa/scenario admissibility.
  if (spec.driver) {
    try {
      (void)io::make_driver(tree, *spec.driver);
    } catch (const Error& e) {
      is.append(pp + ".driver (" + std::string(to_string(e.code())) + ")", e.details());
    }
  }
  return spec;
}

/// Loads a single experiment or a batch {"experiments": [...]}; throws
/// ParseError or ValidationError listing every problem.
inline std::vector<ExperimentSpec> load_spec(const fs::path& path) {
  const Json j = read_json_file(path);
  const fs::path base = path.parent_path();
  io::Issues is;
  std::vector<ExperimentSpec> out;
  if (j.is_object() && j.contains("experiments")) {
    const Json& arr = j["experiments"];
    if (!arr.is_array()) throw Error(Errc::ValidationError, "\"experiments\" must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string p = "experiments[" + std::to_string(i) + "]";
      auto ej = resolve_ref(arr[i], base, p, is);
      if (!ej) continue;
      const fs::path sub_base = arr[i].is_string() ? (base / arr[i].get<std::string>()).parent_path() : base;
      out.push_back(load_experiment(*ej, sub_base, p, is));
    }
    std::vector<std::string> names;
    for (const auto& e : out) {
      if (std::find(names.begin(), names.end(), e.name) != names.end())
        is.add("experiments", "duplicate experiment name '" + e.name + "'");
      names.push_back(e.name);
    }
  } else {
    out.push_back(load_experiment(j, base, "$", is));
  }
  is.throw_if_any(Errc::ValidationError);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct CsvTable {
  std::string name;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

struct Report {
  Json summary = Json::object();
  std::vector<CsvTable> tables;
  bool oracle_ok = true;
};

inline CsvTable scalar_table(const ScenarioTree& tree, const std::string& name, const AdaptedProcess& x,
                             bool non_terminal_only = false) {
  CsvTable t{name, {"node", "t", "value"}, {}};
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (non_terminal_only && tree.is_terminal(n)) continue;
    t.rows.push_back({tree.node(n).id, std::to_string(tree.time(n)), io::fmt12(x[n])});
  }
  return t;
}

inline CsvTable vector_table(const ScenarioTree& tree, const std::string& name, const VectorProcess& z) {
  CsvTable t{name, {"node", "t"}, {}};
  for (int i = 0; i < tree.state_count(); ++i) t.header.push_back("c" + std::to_string(i));
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    std::vector<std::string> row{tree.node(n).id, std::to_string(tree.time(n))};
    for (int i = 0; i < tree.state_count(); ++i) row.push_back(io::fmt12(z[n](i)));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline CsvTable rule_table(const ScenarioTree& tree, const std::string& name, const StoppingTime& tau) {
  CsvTable t{name, {"node", "t", "stop"}, {}};
  for (NodeId n = 0; n < tree.size(); ++n)
    t.rows.push_back({tree.node(n).id, std::to_string(tree.time(n)), tau.stops_at(n) ? "1" : "0"});
  return t;
}

/// Earliest and latest stopping time over positive-probability paths.
inline std::pair<int, int> rule_time_range(const ScenarioTree& tree, const StoppingTime& tau) {
  int lo = tree.horizon();
  int hi = 0;
  for (NodeId leaf : tree.leaves()) {
    if (tree.path_probability(tree.root(), leaf) <= 0.0) continue;
    const int t = tree.time(tau.stop_node(tree, tree.root(), leaf));
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  return {lo, hi};
}

class OracleLog {
 public:
  explicit OracleLog(Report& r) : r_(r) { r_.summary["oracles"] = Json::array(); }

  void compare(const std::string& name, double value, double oracle, double allowed) {
    const double diff = std::abs(value - oracle);
    const bool pass = diff <= allowed;
    Json o = Json::object();
    o["check"] = name;
    o["value"] = io::round12(value);
    o["oracle"] = io::round12(oracle);
    o["abs_diff"] = io::round12(diff);
    o["allowed"] = io::round12(allowed);
    o["pass"] = pass;
    r_.summary["oracles"].push_back(o);
    r_.oracle_ok = r_.oracle_ok && pass;
  }
  void check(const std::string& name, bool pass, const std::string& detail = {}) {
    Json o = Json::object();
    o["check"] = name;
    if (!detail.empty()) o["detail"] = detail;
    o["pass"] = pass;
    r_.summary["oracles"].push_back(o);
    r_.oracle_ok = r_.oracle_ok && pass;
  }
  void skipped(const std::string& name, const std::string& why) {
    Json o = Json::object();
    o["check"] = name;
    o["skipped"] = why;
    r_.summary["oracles"].push_back(o);
  }

 private:
  Report& r_;
};

inline Json num(double v) { return io::round12(v); }

// ---------------------------------------------------------------------------
// Tasks

inline void run_solve_bsde(const ExperimentSpec& s, const RunOptions& opt, Report& rep, OracleLog& log) {
  const auto& tree = *s.tree;
  const Driver driver = io::make_driver(tree, *s.driver);
  SolveOptions so;
  so.audit_equivalence = s.audit;
  const auto sol = solve_bsde(tree, *s.terminal, driver, so);
  Json res = Json::object();
  res["driver"] = driver.name();
  res["Y0"] = num(sol.y[tree.root()]);
  res["identity_residual"] = num(bsde_residual(tree, sol, driver));
  rep.summary["results"] = res;
  rep.tables.push_back(scalar_table(tree, "Y", sol.y));
  rep.tables.push_back(vector_table(tree, "Z", sol.z));
  if (opt.oracle == OracleMode::Off) return;
  log.compare("identity_residual", bsde_residual(tree, sol, driver), 0.0, opt.tolerance);
  const auto& d = *s.driver;
  if (d.type == "zero") {
    double expect = 0.0;
    for (NodeId leaf : tree.leaves()) expect += tree.path_probability(tree.root(), leaf) * (*s.terminal)[leaf];
    log.compare("Y0 vs path-sum expectation", sol.y[tree.root()], expect, opt.tolerance);
  } else if (d.family) {
    const auto o = robust_expectation_oracle(tree, *s.terminal, *d.family, true);
    log.compare("Y0 vs robust expectation oracle", sol.y[tree.root()], o.value[tree.root()],
                opt.tolerance + o.gap[tree.root()]);
  } else if (d.type == "affine") {
    bool linear = true;
    for (NodeId n = 0; n < tree.size(); ++n)
      if (!tree.is_terminal(n) && (d.affine->alpha[n] != 0.0 || d.affine->beta[n] != 0.0 ||
                                   !theta_issues(tree.stats(n), d.affine->gamma[n], 1e-12).empty()))
        linear = false;
    if (!linear) {
      log.skipped("Y0 vs change-of-measure expectation", "driver is not a pure measure change");
      return;
    }
    std::vector<std::vector<Vec>> opts(tree.size());
    for (NodeId n = 0; n < tree.size(); ++n)
      if (!tree.is_terminal(n)) opts[n] = {d.affine->gamma[n]};
    const auto o = robust_expectation_oracle(tree, *s.terminal, PriorFamily::explicit_family(opts, false), true);
    log.compare("Y0 vs change-of-measure expectation", sol.y[tree.root()], o.value[tree.root()], opt.tolerance);
  }
}

inline void add_rbsde_tables(const ScenarioTree& tree, const RbsdeSolution& sol, const std::string& prefix,
                             Report& rep) {
  rep.tables.push_back(scalar_table(tree, prefix + "Y", sol.y));
  rep.tables.push_back(vector_table(tree, prefix + "Z", sol.z));
  rep.tables.push_back(scalar_table(tree, prefix + "K", sol.k));
  rep.tables.push_back(scalar_table(tree, prefix + "dK", sol.dk, true));
}

inline std::size_t stopping_cap(const RunOptions& opt) { return opt.oracle == OracleMode::On ? 24 : kStoppingOracleCap; }

inline void stopping_oracle(const ScenarioTree& tree, const RbsdeSolution& sol, const AdaptedProcess& xi,
                            const Driver& driver, const Obstacle& obstacle, const RunOptions& opt, OracleLog& log,
                            const std::string& label) {
  const auto os = optimal_stopping(tree, sol, xi, driver, obstacle, tree.root(), true, stopping_cap(opt));
  if (os.oracle_value) {
    log.compare(label + "Y0 vs sup over all stopping times", os.value, *os.oracle_value, opt.tolerance);
    log.compare(label + "first-hitting rule attains Y0", os.rule_value, os.value, opt.tolerance);
  } else {
    log.skipped(label + "Y0 vs sup over all stopping times", os.oracle_note);
  }
}

inline void run_solve_rbsde(const ExperimentSpec& s, const RunOptions& opt, Report& rep, OracleLog& log) {
  const auto& tree = *s.tree;
  const Driver driver = io::make_driver(tree, *s.driver);
  const auto sol = solve_rbsde(tree, *s.terminal, driver, s.obstacle);
  const auto inv = check_rbsde_invariants(tree, sol, *s.terminal, driver, s.obstacle);
  const auto rule = first_hitting_rule(tree, sol, s.obstacle, tree.root());
  const auto [lo, hi] = rule_time_range(tree, rule);
  Json res = Json::object();
  res["driver"] = driver.name();
  res["obstacle"] = s.obstacle.present();
  res["Y0"] = num(sol.y[tree.root()]);
  res["K_T_max"] = num(*std::max_element(sol.k.values().begin(), sol.k.values().end()));
  res["exercise_time_min"] = lo;
  res["exercise_time_max"] = hi;
  Json ij = Json::object();
  ij["identity_residual"] = num(inv.identity_residual);
  ij["domination_violation"] = num(std::max(inv.domination_violation, 0.0));
  ij["k_decrease"] = num(std::max(inv.k_decrease, 0.0));
  ij["complementarity"] = num(inv.complementarity);
  res["invariants"] = ij;
  rep.summary["results"] = res;
  add_rbsde_tables(tree, sol, "", rep);
  rep.tables.push_back(rule_table(tree, "exercise", rule));
  if (opt.oracle == OracleMode::Off) return;
  log.check("rbsde invariants", inv.ok(opt.tolerance));
  log.compare("K sup-formula discrepancy",
              k_increment_formula(tree, sol, *s.terminal, driver, s.obstacle, tree.root()), 0.0, opt.tolerance);
  stopping_oracle(tree, sol, *s.terminal, driver, s.obstacle, opt, log, "");
}

inline void run_penalization(const ExperimentSpec& s, const RunOptions& opt, Report& rep, OracleLog& log) {
  const auto& tree = *s.tree;
  const Driver driver = io::make_driver(tree, *s.driver);
  const auto pen = solve_penalized(tree, *s.terminal, driver, s.obstacle, s.n_max);
  CsvTable t{"penalization", {"n", "Y0", "sup_distance"}, {}};
  for (const auto& lvl : pen.levels)
    t.rows.push_back({io::fmt12(lvl.n), io::fmt12(lvl.solution.y[tree.root()]), io::fmt12(lvl.distance)});
  rep.tables.push_back(std::move(t));
  Json res = Json::object();
  res["driver"] = driver.name();
  res["Y0_reflected"] = num(pen.limit.y[tree.root()]);
  res["levels"] = pen.levels.size();
  res["n_last"] = num(pen.levels.back().n);
  res["sup_distance_last"] = num(pen.levels.back().distance);
  res["monotone_in_n"] = pen.monotone;
  res["distance_nonincreasing"] = pen.distance_nonincreasing;
  rep.summary["results"] = res;
  add_rbsde_tables(tree, pen.limit, "reflected_", rep);
  if (opt.oracle == OracleMode::Off) return;
  log.check("Y^n nondecreasing in n", pen.monotone);
  // dK^n = n (Y^n - S)^- dominates the reflected dK only in the limit; report
  // the one-step rate bound |Y^n - Y| <= max dK / (n + 1 - beta) at the last level.
  log.check("sup distance nonincreasing in n", pen.distance_nonincreasing);
}

inline void run_robust_expectation(const ExperimentSpec& s, const RunOptions& opt, Report& rep, OracleLog& log) {
  const auto& tree = *s.tree;
  const Driver driver = family_driver(tree, *s.prior, s.take_inf);
  const auto sol = solve_rbsde(tree, *s.terminal, driver, s.obstacle);
  Json res = Json::object();
  res["driver"] = driver.name();
  res["mode"] = s.take_inf ? "inf" : "sup";
  res["obstacle"] = s.obstacle.present();
  res["Y0"] = num(sol.y[tree.root()]);
  rep.tables.push_back(scalar_table(tree, "Y", sol.y));
  rep.tables.push_back(vector_table(tree, "Z", sol.z));
  if (s.obstacle.present()) {
    rep.tables.push_back(scalar_table(tree, "dK", sol.dk, true));
    rep.tables.push_back(rule_table(tree, "exercise", first_hitting_rule(tree, sol, s.obstacle, tree.root())));
  }
  if (opt.oracle != OracleMode::Off) {
    const auto o = robust_expectation_oracle(tree, *s.terminal, *s.prior, s.take_inf, s.obstacle);
    res["oracle_Y0"] = num(o.value[tree.root()]);
    res["oracle_gap_bound"] = num(o.gap[tree.root()]);
    res["oracle_exact"] = o.exact;
    double worst = 0.0;
    for (NodeId n = 0; n < tree.size(); ++n) worst = std::max(worst, std::abs(sol.y[n] - o.value[n]) - o.gap[n]);
    log.compare("Y0 vs robust expectation oracle", sol.y[tree.root()], o.value[tree.root()],
                opt.tolerance + o.gap[tree.root()]);
    log.check("all nodes within oracle gap", worst <= opt.tolerance);
    rep.tables.push_back(scalar_table(tree, "oracle_Y", o.value));
  }
  rep.summary["results"] = res;
}

inline void run_price_european(const ExperimentSpec& s, const RunOptions& opt, Report& rep, OracleLog& log) {
  const auto& mkt = *s.market;
  const auto& tree = *s.tree;
  const auto& xi = s.claim->payoff;
  const auto b = price_european_bounds(mkt, xi);
  Json res = Json::object();
  res["complete"] = mkt.complete();
  res["sub_Y0"] = num(b.sub.y[tree.root()]);
  res["super_Y0"] = num(b.super.y[tree.root()]);
  rep.summary["results"] = res;
  rep.tables.push_back(scalar_table(tree, "sub_Y", b.sub.y));
  rep.tables.push_back(scalar_table(tree, "super_Y", b.super.y));
  rep.tables.push_back(vector_table(tree, "super_Z", b.super.z));
  if (opt.oracle == OracleMode::Off) return;
  bool ordered = true;
  for (NodeId n = 0; n < tree.size(); ++n) ordered = ordered && b.sub.y[n] <= b.super.y[n] + opt.tolerance;
  log.check("sub <= super at every node", ordered);
  const std::size_t cap = opt.oracle == OracleMode::On ? 2000000 : 200000;
  if (auto e = european_bounds_by_enumeration(mkt, xi, cap)) {
    log.compare("sub Y0 vs vertex-selection enumeration", b.sub.y[tree.root()], e->lower[tree.root()], opt.tolerance);
    log.compare("super Y0 vs vertex-selection enumeration", b.super.y[tree.root()], e->upper[tree.root()],
                opt.tolerance);
  } else {
    log.skipped("vertex-selection enumeration", "too many selections");
  }
  if (mkt.complete() && mkt.spec.asset_count() == 1) {
    try {
      const auto crr = crr_oracle(mkt, xi, false);
      log.compare("price vs lattice oracle", b.super.y[tree.root()], crr[tree.root()], opt.tolerance);
    } catch (const Error& e) {
      log.skipped("price vs lattice oracle", e.what());
    }
  }
}

inline void run_price_american(const ExperimentSpec& s, const RunOptions& opt, Report& rep, OracleLog& log) {
  const auto& mkt = *s.market;
  const auto& tree = *s.tree;
  const auto& payoff = s.claim->payoff;
  const AdaptedProcess xi = s.terminal.value_or(payoff);
  const auto obstacle = Obstacle::of(payoff);
  const Driver sub_d = market_driver(mkt, false);
  const Driver sup_d = market_driver(mkt, true);
  RbsdeSolution sub = solve_rbsde(tree, xi, sub_d, obstacle);
  RbsdeSolution sup = solve_rbsde(tree, xi, sup_d, obstacle);
  const auto sub_rule = first_hitting_rule(tree, sub, obstacle, tree.root());
  const auto sup_rule = first_hitting_rule(tree, sup, obstacle, tree.root());
  const auto [lo, hi] = rule_time_range(tree, sup_rule);
  Json res = Json::object();
  res["complete"] = mkt.complete();
  res["sub_Y0"] = num(sub.y[tree.root()]);
  res["super_Y0"] = num(sup.y[tree.root()]);
  res["exercise_at_root"] = sup_rule.stops_at(tree.root());
  res["exercise_time_min"] = lo;
  res["exercise_time_max"] = hi;
  rep.tables.push_back(scalar_table(tree, "payoff", payoff));
  add_rbsde_tables(tree, sub, "sub_", rep);
  add_rbsde_tables(tree, sup, "super_", rep);
  rep.tables.push_back(rule_table(tree, "sub_exercise", sub_rule));
  rep.tables.push_back(rule_table(tree, "super_exercise", sup_rule));
  if (opt.oracle != OracleMode::Off) {
    bool ordered = true;
    for (NodeId n = 0; n < tree.size(); ++n) ordered = ordered && sub.y[n] <= sup.y[n] + opt.tolerance;
    log.check("sub <= super at every node", ordered);
    log.check("sub rbsde invariants", check_rbsde_invariants(tree, sub, xi, sub_d, obstacle).ok(opt.tolerance));
    log.check("super rbsde invariants", check_rbsde_invariants(tree, sup, xi, sup_d, obstacle).ok(opt.tolerance));
    stopping_oracle(tree, sup, xi, sup_d, obstacle, opt, log, "super ");
    const auto pf = self_financing_check(mkt, sup);
    res["identifiable_nodes"] = pf.identifiable;
    if (pf.identifiable > 0)
      log.compare("super-strategy identity residual", pf.residual, 0.0, opt.tolerance);
    if (mkt.complete() && mkt.spec.asset_count() == 1 && !s.terminal) {
      try {
        const auto crr = crr_oracle(mkt, payoff, true);
        res["lattice_Y0"] = num(crr[tree.root()]);
        double worst = 0.0;
        for (NodeId n = 0; n < tree.size(); ++n) worst = std::max(worst, std::abs(crr[n] - sup.y[n]));
        log.compare("price vs lattice oracle", sup.y[tree.root()], crr[tree.root()], opt.tolerance);
        log.compare("every node vs lattice oracle", worst, 0.0, opt.tolerance);
        rep.tables.push_back(scalar_table(tree, "lattice", crr));
      } catch (const Error& e) {
        log.skipped("price vs lattice oracle", e.what());
      }
    }
  }
  rep.summary["results"] = res;
}

inline void run_ambiguity_demo(const ExperimentSpec& s, const RunOptions& opt, Report& rep, OracleLog& log) {
  const auto& tree = *s.tree;
  // S_{t+1} = S_t (1 + mu + sigma^T M_{t+1})
  AdaptedProcess price(tree.size());
  price[tree.root()] = s.s0;
  for (int t = 0; t < tree.horizon(); ++t)
    for (NodeId n : tree.layer(t)) {
      const auto& st = tree.stats(n);
      for (const auto& c : tree.node(n).children) {
        const double m = s.sigma(c.state) - s.sigma.dot(st.p);
        price[c.node] = price[n] * (1.0 + s.mu + m);
        if (c.prob > 0.0 && price[c.node] <= 0.0)
          throw Error(Errc::NegativePrice, "node '" + tree.node(c.node).id + "': nonpositive asset price");
      }
    }
  rep.tables.push_back(scalar_table(tree, "price", price));

  // Smallest kappa that makes the worst-case drift negative at every node.
  double kappa_neg = 0.0;
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    const auto mn = m_norms(tree.stats(n), s.sigma);
    const double w = s.norm == KappaNorm::M ? mn.norm_m : mn.norm_mplus;
    kappa_neg = std::max(kappa_neg, w > 0.0 ? s.mu / w : std::numeric_limits<double>::infinity());
  }
  const double kappa_max = max_admissible_kappa(tree, s.norm);
  Json res = Json::object();
  res["mu"] = num(s.mu);
  res["kappa_threshold"] = num(kappa_neg);
  res["kappa_max_admissible"] = num(kappa_max);
  Json runs = Json::array();
  for (const auto& k_opt : s.kappas) {
    double kappa = 0.0;
    if (k_opt) {
      kappa = *k_opt;
    } else {
      if (!(kappa_neg < kappa_max)) {
        log.skipped("derived kappa", "no admissible kappa makes the worst-case drift negative");
        continue;
      }
      kappa = std::min(2.0 * kappa_neg, kappa_max);
      if (kappa <= kappa_neg) kappa = 0.5 * (kappa_neg + kappa_max);
    }
    const Driver d = kappa_driver(tree, kappa, s.norm);
    const auto obstacle = Obstacle::of(price);
    const auto sol = solve_rbsde(tree, price, d, obstacle);
    const auto rule = first_hitting_rule(tree, sol, obstacle, tree.root());
    const auto [lo, hi] = rule_time_range(tree, rule);
    Json r = Json::object();
    r["kappa"] = num(kappa);
    r["derived"] = !k_opt.has_value();
    r["worst_case_drift"] = num(s.mu - kappa * (kappa_neg > 0.0 ? s.mu / kappa_neg : 0.0));
    r["U0"] = num(sol.y[tree.root()]);
    r["tau_star_min"] = lo;
    r["tau_star_max"] = hi;
    runs.push_back(r);
    const std::string tag = "kappa=" + io::fmt12(kappa);
    rep.tables.push_back(scalar_table(tree, "U_" + tag, sol.y));
    rep.tables.push_back(rule_table(tree, "tau_" + tag, rule));
    if (opt.oracle == OracleMode::Off) continue;
    if (kappa == 0.0 && s.mu > 0.0)
      log.check(tag + ": tau* = T without ambiguity", lo == tree.horizon() && hi == tree.horizon());
    if (kappa > kappa_neg)
      log.check(tag + ": tau* = 0 under negative worst-case drift", lo == 0 && hi == 0);
  }
  res["runs"] = runs;
  rep.summary["results"] = res;
}

inline Report run_experiment(const ExperimentSpec& s, const RunOptions& opt = {}) {
  Report rep;
  rep.summary["name"] = s.name;
  rep.summary["task"] = s.task_name;
  Json tj = Json::object();
  tj["horizon"] = s.tree->horizon();
  tj["state_count"] = s.tree->state_count();
  tj["nodes"] = s.tree->size();
  rep.summary["tree"] = tj;
  rep.summary["tolerance"] = opt.tolerance;
  rep.summary["oracle_mode"] = opt.oracle == OracleMode::On ? "on" : opt.oracle == OracleMode::Off ? "off" : "auto";
  OracleLog log(rep);
  switch (s.task) {
    case Task::SolveBsde: run_solve_bsde(s, opt, rep, log); break;
    case Task::SolveRbsde: run_solve_rbsde(s, opt, rep, log); break;
    case Task::Penalization: run_penalization(s, opt, rep, log); break;
    case Task::RobustExpectation: run_robust_expectation(s, opt, rep, log); break;
    case Task::PriceEuropean: run_price_european(s, opt, rep, log); break;
    case Task::PriceAmerican: run_price_american(s, opt, rep, log); break;
    case Task::AmbiguityStoppingDemo: run_ambiguity_demo(s, opt, rep, log); break;
  }
  rep.summary["status"] = rep.oracle_ok ? "ok" : "oracle_mismatch";
  return rep;
}

inline std::string safe_file_name(std::string s) {
  for (char& c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.' || c == '=')) c = '_';
  return s;
}

/// Writes <dir>/<table>.csv for every table and <dir>/summary.json.
inline void write_report(const Report& rep, const fs::path& dir) {
  fs::create_directories(dir);
  Json files = Json::array();
  for (const auto& t : rep.tables) {
    const std::string file = safe_file_name(t.name) + ".csv";
    std::ofstream out(dir / file, std::ios::binary);
    for (std::size_t i = 0; i < t.header.size(); ++i) out << (i ? "," : "") << t.header[i];
    out << '\n';
    for (const auto& row : t.rows) {
      for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
      out << '\n';
    }
    files.push_back(file);
  }
  Json summary = rep.summary;
  summary["files"] = files;
  std::ofstream out(dir / "summary.json", std::ios::binary);
  out << summary.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Batch execution

enum ExitCode : int { kOk = 0, kValidation = 2, kSolver = 3, kOracleMismatch = 4 };

struct Outcome {
  std::string name;
  int code = kOk;
  std::string message;
};

inline Outcome run_and_write(const ExperimentSpec& s, const RunOptions& opt, const fs::path& out_dir) {
  Outcome o{s.name, kOk, "ok"};
  try {
    const Report rep = run_experiment(s, opt);
    write_report(rep, out_dir / safe_file_name(s.name));
    if (!rep.oracle_ok) {
      o.code = kOracleMismatch;
      o.message = "oracle mismatch beyond tolerance";
    }
  } catch (const Error& e) {
    o.code = e.code() == Errc::ValidationError || e.code() == Errc::ParseError ? kValidation : kSolver;
    o.message = e.what();
  } catch (const std::exception& e) {
    o.code = kSolver;
    o.message = e.what();
  }
  return o;
}

/// Worker count from RBSDE_LAB_THREADS, else the hardware concurrency.
inline unsigned thread_cap() {
  unsigned cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("RBSDE_LAB_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) cap = static_cast<unsigned>(v);
  }
  return cap;
}

inline std::vector<Outcome> run_batch(const std::vector<ExperimentSpec>& specs, const RunOptions& opt,
                                      const fs::path& out_dir, unsigned threads = thread_cap()) {
  std::vector<Outcome> out(specs.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < specs.size(); i = next++) out[i] = run_and_write(specs[i], opt, out_dir);
  };
  const unsigned n = std::min<unsigned>(threads, static_cast<unsigned>(specs.size()));
  std::vector<std::thread> pool;
  for (unsigned k = 1; k < n; ++k) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  return out;
}

inline int combined_exit_code(const std::vector<Outcome>& outcomes) {
  int code = kOk;
  for (const auto& o : outcomes) code = std::max(code, o.code);
  return code;
}

}  // namespace rbsde::lab
