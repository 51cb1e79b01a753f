#pragma once

// Reflected BSDEs with a lower obstacle: one-step projection solver,
// penalization, the increasing process K, optimal stopping and the minimax
// representation for finite affine families.

#include "rbsde/bsde.hpp"
#include "rbsde/driver.hpp"
#include "rbsde/error.hpp"
#include "rbsde/skorohod.hpp"
#include "rbsde/tree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace rbsde {

/// Lower obstacle, or the explicit absence of one.
class Obstacle {
 public:
  static Obstacle none() { return Obstacle(); }
  static Obstacle of(AdaptedProcess s) {
    Obstacle o;
    o.values_ = std::move(s);
    return o;
  }

  bool present() const noexcept { return values_.has_value(); }
  double operator[](NodeId n) const { return (*values_)[n]; }
  const AdaptedProcess& values() const { return *values_; }
  std::optional<AdaptedProcess> as_optional() const { return values_; }

 private:
  std::optional<AdaptedProcess> values_;
};

struct RbsdeSolution {
  AdaptedProcess y;
  VectorProcess z;
  AdaptedProcess k;   // K_t, K_0 = 0
  AdaptedProcess dk;  // K_{t+1} - K_t stored on the F_t node
};

inline SolutionView view_of(const RbsdeSolution& s) { return {s.y, s.z, s.k}; }

inline void check_standard_data(const ScenarioTree& tree, const AdaptedProcess& xi, const Obstacle& s) {
  if (xi.size() != tree.size()) throw Error(Errc::ValidationError, "terminal process must have one entry per node");
  if (!s.present()) return;
  if (s.values().size() != tree.size())
    throw Error(Errc::ValidationError, "obstacle must have one entry per node");
  std::vector<std::string> bad;
  for (NodeId leaf : tree.leaves())
    if (s[leaf] > xi[leaf])
      bad.push_back("leaf '" + tree.node(leaf).id + "': S_T = " + detail::fmt_double(s[leaf]) + " > xi = " +
                    detail::fmt_double(xi[leaf]));
  if (!bad.empty()) throw Error(Errc::ObstacleAboveTerminal, std::move(bad));
}

inline RbsdeSolution solve_rbsde(const ScenarioTree& tree, const AdaptedProcess& xi, const Driver& driver,
                                 const Obstacle& obstacle, const SolveOptions& opt = {}) {
  check_standard_data(tree, xi, obstacle);
  const std::size_t n_nodes = tree.size();
  RbsdeSolution sol{AdaptedProcess(n_nodes), VectorProcess(n_nodes, Vec::Zero(tree.state_count())),
                    AdaptedProcess(n_nodes), AdaptedProcess(n_nodes)};
  for (NodeId leaf : tree.leaves()) sol.y[leaf] = xi[leaf];
  for (int t = tree.horizon() - 1; t >= 0; --t) {
    for (NodeId n : tree.layer(t)) {
      auto step = bsde_step(tree, n, child_values(tree, sol.y, n), driver, opt);
      sol.z[n] = std::move(step.z);
      if (!obstacle.present() || step.y >= obstacle[n]) {
        sol.y[n] = step.y;
        continue;
      }
      const double s = obstacle[n];
      sol.y[n] = s;
      sol.dk[n] = std::max(s - driver(n, s, sol.z[n]) - step.expectation, 0.0);
    }
  }
  for (int t = 0; t < tree.horizon(); ++t)
    for (NodeId n : tree.layer(t))
      for (const auto& c : tree.node(n).children) sol.k[c.node] = sol.k[n] + sol.dk[n];
  return sol;
}

struct RbsdeInvariants {
  double identity_residual = 0.0;     // max over positive-probability edges
  double domination_violation = 0.0;  // max (S - Y)^+
  double k_decrease = 0.0;            // max (-dK)^+
  double k_root = 0.0;                // |K_0|
  double complementarity = 0.0;       // max |(Y - S) dK|
  bool ok(double tol = 1e-9) const {
    return identity_residual < tol && domination_violation < tol && k_decrease < tol && k_root < tol &&
           complementarity < tol;
  }
};

inline RbsdeInvariants check_rbsde_invariants(const ScenarioTree& tree, const RbsdeSolution& sol,
                                              const AdaptedProcess& xi, const Driver& driver,
                                              const Obstacle& obstacle) {
  RbsdeInvariants r;
  r.k_root = std::abs(sol.k[tree.root()]);
  for (NodeId leaf : tree.leaves()) r.identity_residual = std::max(r.identity_residual, std::abs(sol.y[leaf] - xi[leaf]));
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (obstacle.present()) r.domination_violation = std::max(r.domination_violation, obstacle[n] - sol.y[n]);
    if (tree.is_terminal(n)) continue;
    const auto& s = tree.stats(n);
    const double f = driver(n, sol.y[n], sol.z[n]);
    const double zp = sol.z[n].dot(s.p);
    for (const auto& c : tree.node(n).children) {
      const double dk = sol.k[c.node] - sol.k[n];
      r.k_decrease = std::max(r.k_decrease, -dk);
      if (c.prob <= 0.0) continue;
      const double res = sol.y[n] - (sol.y[c.node] + f + dk - (sol.z[n](c.state) - zp));
      r.identity_residual = std::max(r.identity_residual, std::abs(res));
    }
    const double gap = obstacle.present() ? sol.y[n] - obstacle[n] : 0.0;
    r.complementarity = std::max(r.complementarity, std::abs(gap * sol.dk[n]));
    if (!obstacle.present()) r.complementarity = std::max(r.complementarity, std::abs(sol.dk[n]));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Penalization

struct PenaltyLevel {
  double n = 0.0;
  BsdeSolution solution;
  AdaptedProcess dk;       // n (Y^n - S)^- on each node
  double distance = 0.0;   // sup-node |Y^n - Y|
};

struct PenalizationResult {
  std::vector<PenaltyLevel> levels;
  RbsdeSolution limit;
  bool monotone = true;
  bool distance_nonincreasing = true;
};

/// Solves the penalized BSDEs with n = 1, 2, 4, ..., n_max and compares them
/// to the reflected solution. Throws NonMonotone if some Y^n decreases in n.
inline PenalizationResult solve_penalized(const ScenarioTree& tree, const AdaptedProcess& xi, const Driver& driver,
                                          const Obstacle& obstacle, double n_max, double tol = 1e-12) {
  check_standard_data(tree, xi, obstacle);
  PenalizationResult out;
  out.limit = solve_rbsde(tree, xi, driver, obstacle);
  const AdaptedProcess barrier = obstacle.present() ? obstacle.values()
                                                    : AdaptedProcess(tree.size(), -std::numeric_limits<double>::max());
  for (double n = 1.0; n <= n_max; n *= 2.0) {
    PenaltyLevel lvl;
    lvl.n = n;
    const Driver fn = obstacle.present() ? penalized_driver(driver, barrier, n) : driver;
    lvl.solution = solve_bsde(tree, xi, fn);
    lvl.dk = AdaptedProcess(tree.size());
    for (NodeId k = 0; k < tree.size(); ++k) {
      if (!tree.is_terminal(k) && obstacle.present())
        lvl.dk[k] = n * std::max(barrier[k] - lvl.solution.y[k], 0.0);
      lvl.distance = std::max(lvl.distance, std::abs(lvl.solution.y[k] - out.limit.y[k]));
    }
    if (!out.levels.empty()) {
      const auto& prev = out.levels.back();
      for (NodeId k = 0; k < tree.size(); ++k) {
        if (lvl.solution.y[k] < prev.solution.y[k] - tol * std::max(1.0, std::abs(prev.solution.y[k]))) {
          out.monotone = false;
          throw Error(Errc::NonMonotone, "Y^n decreases from n=" + detail::fmt_double(prev.n) + " to n=" +
                                             detail::fmt_double(n) + " at node '" + tree.node(k).id + "'");
        }
      }
      if (lvl.distance > prev.distance + tol) out.distance_nonincreasing = false;
    }
    out.levels.push_back(std::move(lvl));
  }
  return out;
}

// ---------------------------------------------------------------------------
// K via the pathwise sup formula

/// Evaluates K_T - K_t = sup_{t<=u<=T} (xi + sum_{u<=s<T} f - sum Z^T M - S_u)^-
/// on every positive-probability path through `node` and returns the largest
/// discrepancy with the solution's K.
inline double k_increment_formula(const ScenarioTree& tree, const RbsdeSolution& sol, const AdaptedProcess& xi,
                                  const Driver& driver, const Obstacle& obstacle, NodeId node) {
  double worst = 0.0;
  for (NodeId leaf : tree.leaves_below(node)) {
    if (tree.path_probability(node, leaf) <= 0.0) continue;
    const auto path = tree.path(node, leaf);
    // tail = xi + sum_{u<=s<T} (f_s - Z_s^T M_{s+1}), accumulated backwards.
    double tail = xi[leaf];
    double sup = 0.0;
    for (std::size_t j = path.size(); j-- > 0;) {
      const NodeId u = path[j];
      if (j + 1 < path.size()) {
        const NodeId next = path[j + 1];
        const auto& st = tree.stats(u);
        const double zm = sol.z[u](tree.node(next).state) - sol.z[u].dot(st.p);
        tail += driver(u, sol.y[u], sol.z[u]) - zm;
      }
      if (obstacle.present()) sup = std::max(sup, std::max(obstacle[u] - tail, 0.0));
    }
    const double k = sol.k[leaf] - sol.k[node];
    worst = std::max(worst, std::abs(k - sup));
  }
  return worst;
}

/// The same quantity by the deterministic Skorohod map in reversed time: along
/// the path, y(j) = Y_{T-j} - S_{T-j} - (K_T - K_{T-j}) fed to solve_skorohod
/// returns g(last) = K_T - K_t. Used as an independent cross-check.
inline double k_increment_skorohod(const ScenarioTree& tree, const RbsdeSolution& sol, const AdaptedProcess& xi,
                                   const Driver& driver, const Obstacle& obstacle, NodeId leaf, NodeId node) {
  const auto path = tree.path(node, leaf);
  std::vector<double> y;
  double tail = xi[leaf];
  for (std::size_t j = path.size(); j-- > 0;) {
    const NodeId u = path[j];
    if (j + 1 < path.size()) {
      const NodeId next = path[j + 1];
      const double zm = sol.z[u](tree.node(next).state) - sol.z[u].dot(tree.stats(u).p);
      tail += driver(u, sol.y[u], sol.z[u]) - zm;
    }
    y.push_back(obstacle.present() ? tail - obstacle[u] : 0.0);
  }
  if (y.front() < 0.0) y.front() = 0.0;  // S_T <= xi up to rounding
  return solve_skorohod(y).g.back();
}

// ---------------------------------------------------------------------------
// Optimal stopping

inline constexpr std::size_t kStoppingOracleCap = 20;

/// First time at or after `node` where Y meets the obstacle, T if never.
inline StoppingTime first_hitting_rule(const ScenarioTree& tree, const RbsdeSolution& sol, const Obstacle& obstacle,
                                       NodeId node, double rel_tol = 1e-12) {
  std::vector<char> flags(tree.size(), 1);
  for (NodeId n : tree.subtree(node)) {
    if (tree.is_terminal(n)) continue;
    bool hit = false;
    if (obstacle.present()) hit = std::abs(sol.y[n] - obstacle[n]) <= rel_tol * (1.0 + std::abs(obstacle[n]));
    flags[n] = hit ? 1 : 0;
  }
  return StoppingTime(std::move(flags));
}

/// E[sum_{t<=s<tau} f(s, Y_s, Z_s) + S_tau 1{tau<T} + xi 1{tau=T} | node].
inline double stopping_reward(const ScenarioTree& tree, const RbsdeSolution& sol, const AdaptedProcess& xi,
                              const Driver& driver, const Obstacle& obstacle, const StoppingTime& tau, NodeId node) {
  double total = 0.0;
  for (NodeId leaf : tree.leaves_below(node)) {
    const double prob = tree.path_probability(node, leaf);
    if (prob <= 0.0) continue;
    double acc = 0.0;
    for (NodeId n : tree.path(node, leaf)) {
      if (tree.is_terminal(n)) {
        acc += xi[n];
        break;
      }
      if (tau.stops_at(n)) {
        acc += obstacle.present() ? obstacle[n] : -std::numeric_limits<double>::infinity();
        break;
      }
      acc += driver(n, sol.y[n], sol.z[n]);
    }
    total += prob * acc;
  }
  return total;
}

struct OptimalStoppingResult {
  double value = 0.0;            // Y at the node
  StoppingTime rule;             // first hitting of {Y = S}
  double rule_value = 0.0;       // reward of the rule
  std::optional<double> oracle_value;
  std::size_t rules_enumerated = 0;
  std::string oracle_note;       // "OracleTooLarge" when skipped
};

inline OptimalStoppingResult optimal_stopping(const ScenarioTree& tree, const RbsdeSolution& sol,
                                              const AdaptedProcess& xi, const Driver& driver,
                                              const Obstacle& obstacle, NodeId node, bool run_oracle = true,
                                              std::size_t cap = kStoppingOracleCap) {
  OptimalStoppingResult r;
  r.value = sol.y[node];
  r.rule = first_hitting_rule(tree, sol, obstacle, node);
  r.rule_value = stopping_reward(tree, sol, xi, driver, obstacle, r.rule, node);
  if (!run_oracle) return r;
  if (decision_node_count(tree, node) > cap) {
    r.oracle_note = std::string(to_string(Errc::OracleTooLarge));
    return r;
  }
  if (!obstacle.present()) {
    // Only tau = T has a finite reward.
    r.oracle_value = stopping_reward(tree, sol, xi, driver, obstacle, StoppingTime::at_time(tree, tree.horizon()), node);
    r.rules_enumerated = 1;
    return r;
  }
  double best = -std::numeric_limits<double>::infinity();
  r.rules_enumerated = for_each_stopping_time(tree, node, [&](const StoppingTime& tau) {
    best = std::max(best, stopping_reward(tree, sol, xi, driver, obstacle, tau, node));
  });
  r.oracle_value = best;
  return r;
}

// ---------------------------------------------------------------------------
// Minimax representation for finite affine families

/// Checks |beta| < 1 and that gamma is a valid measure change (a Q-vector
/// with 0 <= p + gamma <= 1) at every node.
inline void validate_affine_member(const ScenarioTree& tree, const AffineCoefficients& c, std::size_t index,
                                   double tol = 1e-12) {
  std::vector<std::string> bad;
  const std::string who = "member " + std::to_string(index);
  if (c.alpha.size() != tree.size() || c.beta.size() != tree.size() || c.gamma.size() != tree.size())
    throw Error(Errc::FamilyMemberInvalid, who + ": coefficient arrays must have one entry per node");
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    const std::string at = who + " at node '" + tree.node(n).id + "'";
    if (!(std::abs(c.beta[n]) < 1.0)) bad.push_back(at + ": |beta| = " + detail::fmt_double(std::abs(c.beta[n])) + " >= 1");
    const auto& s = tree.stats(n);
    const Vec& g = c.gamma[n];
    if (std::abs(g.sum()) > tol) bad.push_back(at + ": gamma does not sum to zero");
    for (int i = 0; i < tree.state_count(); ++i) {
      if (s.p(i) == 0.0 && std::abs(g(i)) > tol) bad.push_back(at + ": gamma nonzero off the support");
      if (s.p(i) > 0.0 && (s.p(i) + g(i) < -tol || s.p(i) + g(i) > 1.0 + tol))
        bad.push_back(at + ": p + gamma outside [0, 1] in state " + std::to_string(i));
    }
  }
  if (!bad.empty()) throw Error(Errc::FamilyMemberInvalid, std::move(bad));
}

struct MinimaxResult {
  RbsdeSolution solution;                 // driver = inf (sup) over the family
  std::vector<RbsdeSolution> members;     // each member alone
  std::vector<std::size_t> optimizer;     // per node, member attaining the extremum at (Y, Z)
  RbsdeSolution selection_solution;       // member coefficients switched per node by `optimizer`
  double selection_gap = 0.0;             // sup |Y - Y^{selection}|
  double member_bound_violation = 0.0;    // max (Y - Y^k)^+ (inf) or (Y^k - Y)^+ (sup)
  double exchange_residual = 0.0;         // |S v inf_k y_k - inf_k (S v y_k)| per node
};

inline MinimaxResult minimax_bounds(const ScenarioTree& tree, const AdaptedProcess& xi,
                                    const std::vector<AffineCoefficients>& family, const Obstacle& obstacle,
                                    bool take_inf) {
  if (family.empty()) throw Error(Errc::FamilyMemberInvalid, "empty family");
  for (std::size_t k = 0; k < family.size(); ++k) validate_affine_member(tree, family[k], k);
  std::vector<Driver> drivers;
  for (std::size_t k = 0; k < family.size(); ++k)
    drivers.push_back(affine_driver(tree, family[k], "member" + std::to_string(k)));
  const Driver extremum = extremum_of(drivers, take_inf);

  MinimaxResult r;
  r.solution = solve_rbsde(tree, xi, extremum, obstacle);
  for (const auto& d : drivers) r.members.push_back(solve_rbsde(tree, xi, d, obstacle));

  r.optimizer.assign(tree.size(), 0);
  AffineCoefficients chosen = family[0];
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    const double y = r.solution.y[n];
    const Vec& z = r.solution.z[n];
    std::size_t best = 0;
    double best_v = drivers[0](n, y, z);
    for (std::size_t k = 1; k < drivers.size(); ++k) {
      const double v = drivers[k](n, y, z);
      if (take_inf ? v < best_v : v > best_v) {
        best = k;
        best_v = v;
      }
    }
    r.optimizer[n] = best;
    chosen.alpha[n] = family[best].alpha[n];
    chosen.beta[n] = family[best].beta[n];
    chosen.gamma[n] = family[best].gamma[n];

    // Exchange of the obstacle max with the family extremum at this node.
    const double e = conditional_expectation(tree, r.solution.y, n);
    double inner = take_inf ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    double outer = inner;
    for (const auto& d : drivers) {
      const double root = d.solve_step(n, z, e);
      const double capped = obstacle.present() ? std::max(obstacle[n], root) : root;
      inner = take_inf ? std::min(inner, root) : std::max(inner, root);
      outer = take_inf ? std::min(outer, capped) : std::max(outer, capped);
    }
    const double lhs = obstacle.present() ? std::max(obstacle[n], inner) : inner;
    r.exchange_residual = std::max(r.exchange_residual, std::abs(lhs - outer));
    r.exchange_residual = std::max(r.exchange_residual, std::abs(lhs - y));
  }
  r.selection_solution = solve_rbsde(tree, xi, affine_driver(tree, chosen, "selection"), obstacle);
  for (NodeId n = 0; n < tree.size(); ++n) {
    r.selection_gap = std::max(r.selection_gap, std::abs(r.solution.y[n] - r.selection_solution.y[n]));
    for (const auto& m : r.members) {
      const double v = take_inf ? r.solution.y[n] - m.y[n] : m.y[n] - r.solution.y[n];
      r.member_bound_violation = std::max(r.member_bound_violation, v);
    }
  }
  return r;
}

}  // namespace rbsde
