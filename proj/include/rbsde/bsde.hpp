#pragma once

// Backward induction for BSDEs on a scenario tree, g-expectations and the
// diagnostics built on them.

#include "rbsde/driver.hpp"
#include "rbsde/error.hpp"
#include "rbsde/tree.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace rbsde {

struct BsdeSolution {
  AdaptedProcess y;
  VectorProcess z;  // canonical Q-vector per non-terminal node, zero on leaves
};

struct SolveOptions {
  RootOptions root;
  /// Sampled check that f(y, z) == f(y, z') for z ~_M z' at every node.
  bool audit_equivalence = false;
};

/// Result of one backward step at a node.
struct StepResult {
  double expectation = 0.0;
  Vec z;
  double y = 0.0;
};

/// Throws DriverEquivalenceViolation if f distinguishes z from z shifted by
/// constants or by off-support bumps.
inline void audit_driver_equivalence(const ScenarioTree& tree, const Driver& driver, NodeId node, double y,
                                     const Vec& z, double tol = 1e-9) {
  const auto& s = tree.stats(node);
  const double base = driver(node, y, z);
  std::vector<Vec> probes;
  probes.push_back(z + Vec::Constant(z.size(), 1.0));
  probes.push_back(z - Vec::Constant(z.size(), 0.37));
  Vec bump = z;
  bool any_off = false;
  for (int i = 0; i < tree.state_count(); ++i) {
    if (s.p(i) == 0.0) {
      bump(i) += 1.5 + i;
      any_off = true;
    }
  }
  if (any_off) probes.push_back(bump);
  for (const auto& zz : probes) {
    const double v = driver(node, y, zz);
    if (std::abs(v - base) > tol * std::max(1.0, std::abs(base)))
      throw Error(Errc::DriverEquivalenceViolation,
                  driver.name() + " at node '" + tree.node(node).id + "' changes along a ~_M-null direction");
  }
}

/// One backward step: Z from the centred child values, then the implicit solve.
inline StepResult bsde_step(const ScenarioTree& tree, NodeId node, const Vec& child_vals, const Driver& driver,
                            const SolveOptions& opt = {}) {
  const auto& s = tree.stats(node);
  StepResult r;
  for (int i : s.support) r.expectation += s.p(i) * child_vals(i);
  Vec h = Vec::Zero(tree.state_count());
  for (int i : s.support) h(i) = child_vals(i) - r.expectation;
  r.z = represent_martingale(s, h, 1e-8);
  r.y = driver.solve_step(node, r.z, r.expectation, opt.root);
  if (opt.audit_equivalence) audit_driver_equivalence(tree, driver, node, r.y, r.z);
  return r;
}

inline BsdeSolution solve_bsde(const ScenarioTree& tree, const AdaptedProcess& terminal, const Driver& driver,
                               const SolveOptions& opt = {}) {
  if (terminal.size() != tree.size())
    throw Error(Errc::ValidationError, "terminal process must have one entry per node");
  BsdeSolution sol{AdaptedProcess(tree.size()), VectorProcess(tree.size(), Vec::Zero(tree.state_count()))};
  for (NodeId leaf : tree.leaves()) sol.y[leaf] = terminal[leaf];
  for (int t = tree.horizon() - 1; t >= 0; --t) {
    for (NodeId n : tree.layer(t)) {
      auto step = bsde_step(tree, n, child_values(tree, sol.y, n), driver, opt);
      sol.y[n] = step.y;
      sol.z[n] = std::move(step.z);
    }
  }
  return sol;
}

/// Largest |Y_t - Y_{t+1} - f(t, Y_t, Z_t) + Z_t^T M_{t+1}| over all
/// positive-probability edges.
inline double bsde_residual(const ScenarioTree& tree, const BsdeSolution& sol, const Driver& driver) {
  double worst = 0.0;
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    const auto& s = tree.stats(n);
    const double f = driver(n, sol.y[n], sol.z[n]);
    const double zp = sol.z[n].dot(s.p);
    for (const auto& c : tree.node(n).children) {
      if (c.prob <= 0.0) continue;
      const double zm = sol.z[n](c.state) - zp;
      worst = std::max(worst, std::abs(sol.y[n] - sol.y[c.node] - f + zm));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// g-expectation

inline void require_normalised(const Driver& driver) {
  if (!driver.flags().normalised)
    throw Error(Errc::NotNormalised, driver.name() + " is not declared normalised (f(y, 0) = 0)");
}

/// G(xi | F_t) at every node.
inline AdaptedProcess g_expectation_process(const ScenarioTree& tree, const AdaptedProcess& xi, const Driver& driver,
                                            const SolveOptions& opt = {}) {
  require_normalised(driver);
  return solve_bsde(tree, xi, driver, opt).y;
}

inline double g_expectation(const ScenarioTree& tree, const AdaptedProcess& xi, const Driver& driver, NodeId node,
                            const SolveOptions& opt = {}) {
  return g_expectation_process(tree, xi, driver, opt)[node];
}

/// One-step G(X_{t+1} | F_t) from the child values of `x` at `node`.
inline double g_step(const ScenarioTree& tree, const AdaptedProcess& x, const Driver& driver, NodeId node) {
  return bsde_step(tree, node, child_values(tree, x, node), driver).y;
}

/// A one-step conditional operator: child values indexed by state -> value
/// at the node.
using ConditionalOperator = std::function<double(NodeId, const Vec&)>;

inline ConditionalOperator linear_expectation_operator(const ScenarioTree& tree) {
  return [&tree](NodeId node, const Vec& vals) {
    const auto& s = tree.stats(node);
    double e = 0.0;
    for (int i : s.support) e += s.p(i) * vals(i);
    return e;
  };
}

/// f(node, z) = G(z^T M_{t+1} | F_t).
inline double induced_driver(const ScenarioTree& tree, const ConditionalOperator& g, NodeId node, const Vec& z) {
  const auto& s = tree.stats(node);
  const double zp = z.dot(s.p);
  Vec payoff = Vec::Zero(tree.state_count());
  for (int i : s.support) payoff(i) = z(i) - zp;
  return g(node, payoff);
}

// ---------------------------------------------------------------------------
// Doob-Meyer

enum class Direction { Constant, Increasing, Decreasing, Neither };

constexpr const char* to_string(Direction d) {
  switch (d) {
    case Direction::Constant: return "constant";
    case Direction::Increasing: return "increasing";
    case Direction::Decreasing: return "decreasing";
    case Direction::Neither: return "neither";
  }
  return "?";
}

struct DoobMeyerResult {
  AdaptedProcess k;          // K_t at every node, K_0 = 0
  AdaptedProcess increment;  // K_{t+1} - K_t, stored on the F_t node
  Direction direction = Direction::Constant;
  double martingale_residual = 0.0;  // max |G((X+K)_{t+1}|F_t) - (X+K)_t|
};

/// Predictable K with X + K a g-martingale: K_{t+1} = K_t + X_t - G(X_{t+1}|F_t).
inline DoobMeyerResult doob_meyer(const ScenarioTree& tree, const AdaptedProcess& x, const Driver& driver,
                                  double tol = 1e-12) {
  require_normalised(driver);
  DoobMeyerResult r{AdaptedProcess(tree.size()), AdaptedProcess(tree.size()), Direction::Constant, 0.0};
  bool up = false;
  bool down = false;
  for (int t = 0; t < tree.horizon(); ++t) {
    for (NodeId n : tree.layer(t)) {
      const double inc = x[n] - g_step(tree, x, driver, n);
      r.increment[n] = inc;
      for (const auto& c : tree.node(n).children) r.k[c.node] = r.k[n] + inc;
      const double scale = tol * std::max(1.0, std::abs(x[n]));
      up = up || inc > scale;
      down = down || inc < -scale;
    }
  }
  r.direction = up && down ? Direction::Neither : up ? Direction::Increasing : down ? Direction::Decreasing
                                                                                   : Direction::Constant;
  AdaptedProcess xk(tree.size());
  for (NodeId n = 0; n < tree.size(); ++n) xk[n] = x[n] + r.k[n];
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    r.martingale_residual = std::max(r.martingale_residual, std::abs(g_step(tree, xk, driver, n) - xk[n]));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Comparison diagnostics

/// Data of one (R)BSDE: terminal values, driver, optional obstacle.
struct EquationData {
  AdaptedProcess xi;
  Driver driver;
  std::optional<AdaptedProcess> obstacle;
};

/// Solution triple; K is zero for unreflected equations.
struct SolutionView {
  AdaptedProcess y;
  VectorProcess z;
  AdaptedProcess k;
};

inline SolutionView view_of(const BsdeSolution& s) { return {s.y, s.z, AdaptedProcess(s.y.size())}; }

struct NodeHypotheses {
  NodeId node = kNoNode;
  bool terminal_ok = true;      // xi1 >= xi2 on the leaves
  bool driver_ok = true;        // f1 >= f2 at (Y2, Z2)
  bool obstacle_ok = true;      // S1 >= S2
  bool increment_ok = true;     // f1(Y2, Z1) - f1(Y2, Z2) >= min_i (Z1 - Z2)^T M^i
  bool monotonicity_ok = true;  // y - f1(y, Z1) nondecreasing between Y2 and Y1
};

struct ComparisonReport {
  std::vector<NodeHypotheses> nodes;
  bool terminal_ok = true;
  bool driver_ok = true;
  bool obstacle_ok = true;
  bool increment_ok = true;
  bool monotonicity_ok = true;
  bool dominates = true;              // Y1 >= Y2 everywhere
  std::optional<NodeId> first_violation;
  bool k_monotone_ok = true;          // K1 - K2 nonincreasing where the Y's agree
  bool all_hypotheses() const {
    return terminal_ok && driver_ok && obstacle_ok && increment_ok && monotonicity_ok;
  }
};

/// Checks the comparison hypotheses node by node and whether the
/// conclusion Y1 >= Y2 holds.
inline ComparisonReport comparison_check(const ScenarioTree& tree, const EquationData& d1, const EquationData& d2,
                                         const SolutionView& s1, const SolutionView& s2, double tol = 1e-9) {
  ComparisonReport rep;
  auto slack = [tol](double a) { return tol * std::max(1.0, std::abs(a)); };
  for (NodeId n = 0; n < tree.size(); ++n) {
    NodeHypotheses h;
    h.node = n;
    if (d1.obstacle || d2.obstacle) {
      if (!d1.obstacle)
        h.obstacle_ok = false;  // S1 = -inf below a finite S2
      else if (d2.obstacle)
        h.obstacle_ok = (*d1.obstacle)[n] >= (*d2.obstacle)[n] - slack((*d2.obstacle)[n]);
    }
    if (tree.is_terminal(n)) {
      h.terminal_ok = d1.xi[n] >= d2.xi[n] - slack(d2.xi[n]);
    } else {
      const auto& st = tree.stats(n);
      const double y2 = s2.y[n];
      const double f1_at2 = d1.driver(n, y2, s2.z[n]);
      const double f2_at2 = d2.driver(n, y2, s2.z[n]);
      h.driver_ok = f1_at2 >= f2_at2 - slack(f2_at2);
      const Vec dz = s1.z[n] - s2.z[n];
      const double dzp = dz.dot(st.p);
      double min_jump = std::numeric_limits<double>::infinity();
      for (int i : st.support) min_jump = std::min(min_jump, dz(i) - dzp);
      const double lhs = d1.driver(n, y2, s1.z[n]) - f1_at2;
      h.increment_ok = lhs >= min_jump - slack(min_jump);
      const double y1 = s1.y[n];
      const double a = y1 - d1.driver(n, y1, s1.z[n]);
      const double b = y2 - d1.driver(n, y2, s1.z[n]);
      h.monotonicity_ok = !(a >= b - slack(b)) || y1 >= y2 - slack(y2);
    }
    rep.terminal_ok = rep.terminal_ok && h.terminal_ok;
    rep.driver_ok = rep.driver_ok && h.driver_ok;
    rep.obstacle_ok = rep.obstacle_ok && h.obstacle_ok;
    rep.increment_ok = rep.increment_ok && h.increment_ok;
    rep.monotonicity_ok = rep.monotonicity_ok && h.monotonicity_ok;
    if (s1.y[n] < s2.y[n] - slack(s2.y[n])) {
      rep.dominates = false;
      if (!rep.first_violation) rep.first_violation = n;
    }
    rep.nodes.push_back(h);
  }

  // Along each path, while Y1 = Y2 up to time t, K1 <= K2 and K1 - K2 is
  // nonincreasing up to time t+1.
  for (NodeId leaf : tree.leaves()) {
    const auto p = tree.path(tree.root(), leaf);
    std::size_t agree = 0;
    while (agree < p.size() && std::abs(s1.y[p[agree]] - s2.y[p[agree]]) <= slack(s2.y[p[agree]])) ++agree;
    if (agree == 0) continue;
    const std::size_t last = std::min(agree, p.size() - 1);
    for (std::size_t u = 1; u <= last; ++u) {
      const double prev = s1.k[p[u - 1]] - s2.k[p[u - 1]];
      const double cur = s1.k[p[u]] - s2.k[p[u]];
      if (cur > prev + slack(prev) || s1.k[p[u]] > s2.k[p[u]] + slack(s2.k[p[u]])) rep.k_monotone_ok = false;
    }
  }
  return rep;
}

}  // namespace rbsde
