#pragma once

// Bond-plus-stocks market on a scenario tree: price paths, the polytope of
// risk premia per node, and sub/superreplication prices through BSDEs and
// reflected BSDEs.

#include "rbsde/bsde.hpp"
#include "rbsde/driver.hpp"
#include "rbsde/error.hpp"
#include "rbsde/linalg.hpp"
#include "rbsde/lp.hpp"
#include "rbsde/reflected.hpp"
#include "rbsde/tree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace rbsde {

/// Q-space dimension up to which polytope vertices are enumerated exactly.
inline constexpr int kVertexEnumerationMaxDim = 4;

/// Per-node (predictable) coefficients; k assets, m states.
struct MarketSpec {
  std::vector<double> r;      // short rate per node
  std::vector<Vec> b;         // k-vector per node
  std::vector<Mat> sigma;     // k x m per node
  Vec s0;                     // k initial prices

  static MarketSpec constant(const ScenarioTree& tree, double r, const Vec& b, const Mat& sigma, const Vec& s0) {
    return {std::vector<double>(tree.size(), r), std::vector<Vec>(tree.size(), b),
            std::vector<Mat>(tree.size(), sigma), s0};
  }
  int asset_count() const { return static_cast<int>(s0.size()); }
};

/// {theta : sigma theta = r 1 - b, theta Q-vector, 0 <= p + theta <= 1}.
struct ThetaPolytope {
  std::vector<Vec> vertices;  // empty when the node uses the simplex path
  bool enumerated = true;
  Mat a_eq;                   // constraints on q restricted to the support
  Vec b_eq;
  std::vector<int> support;
};

struct Market {
  const ScenarioTree* tree = nullptr;
  MarketSpec spec;
  VectorProcess prices;    // k-vector per node
  AdaptedProcess bond;     // B_0 = 1, B_{t+1} = B_t (1 + r_t)
  std::vector<ThetaPolytope> polytopes;
  double martingale_residual = 0.0;  // worst vertex check

  bool complete_at(NodeId n) const {
    const auto& p = polytopes[n];
    return p.enumerated && p.vertices.size() == 1;
  }
  bool complete() const {
    for (NodeId n = 0; n < tree->size(); ++n)
      if (!tree->is_terminal(n) && !complete_at(n)) return false;
    return true;
  }
};

inline void validate_market_spec(const ScenarioTree& tree, const MarketSpec& spec) {
  std::vector<std::string> bad;
  const int k = spec.asset_count();
  if (k < 1) bad.emplace_back("at least one asset is required");
  if (spec.r.size() != tree.size() || spec.b.size() != tree.size() || spec.sigma.size() != tree.size())
    bad.emplace_back("r, b and sigma must have one entry per node");
  if (!bad.empty()) throw Error(Errc::ValidationError, std::move(bad));
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    const std::string at = "node '" + tree.node(n).id + "'";
    if (!(spec.r[n] > -1.0)) bad.push_back(at + ": r <= -1");
    if (spec.b[n].size() != k) bad.push_back(at + ": b has wrong length");
    if (spec.sigma[n].rows() != k || spec.sigma[n].cols() != tree.state_count())
      bad.push_back(at + ": sigma must be " + std::to_string(k) + " x " + std::to_string(tree.state_count()));
  }
  if (!bad.empty()) throw Error(Errc::ValidationError, std::move(bad));
}

inline ThetaPolytope build_polytope(const NodeStats& s, double r, const Vec& b, const Mat& sigma) {
  ThetaPolytope poly;
  poly.support = s.support;
  const auto sz = static_cast<Eigen::Index>(s.support.size());
  const auto k = sigma.rows();
  poly.a_eq = Mat::Zero(k + 1, sz);
  poly.b_eq = Vec::Zero(k + 1);
  poly.a_eq.row(0).setOnes();
  poly.b_eq(0) = 1.0;
  // sigma q = r 1 - b + sigma p on the support.
  for (Eigen::Index j = 0; j < sz; ++j) poly.a_eq.block(1, j, k, 1) = sigma.col(s.support[static_cast<std::size_t>(j)]);
  poly.b_eq.tail(k) = Vec::Constant(k, r) - b + sigma * s.p;
  auto to_theta = [&](const Vec& q) {
    Vec th = -s.p;
    for (Eigen::Index j = 0; j < sz; ++j) th(s.support[static_cast<std::size_t>(j)]) += q(j);
    return th;
  };
  if (sz - 1 <= kVertexEnumerationMaxDim) {
    for (const Vec& q : lp::enumerate_vertices(poly.a_eq, poly.b_eq)) poly.vertices.push_back(to_theta(q));
  } else {
    poly.enumerated = false;
    const auto res = lp::minimize(poly.a_eq, poly.b_eq, Vec::Zero(sz));
    if (res.status == lp::Status::Optimal) poly.vertices.push_back(to_theta(res.x));
  }
  return poly;
}

/// Optimum of z^T theta over the node's polytope.
struct ThetaExtreme {
  double value = 0.0;
  Vec theta;
};

inline ThetaExtreme theta_extremes(const Market& mkt, NodeId n, const Vec& z, bool take_inf) {
  const auto& poly = mkt.polytopes.at(n);
  if (poly.vertices.empty())
    throw Error(Errc::EmptyPolytope, "node '" + mkt.tree->node(n).id + "' admits no martingale measure");
  ThetaExtreme best;
  if (poly.enumerated) {
    bool first = true;
    for (const Vec& th : poly.vertices) {
      const double v = z.dot(th);
      if (first || (take_inf ? v < best.value : v > best.value)) {
        best = {v, th};
        first = false;
      }
    }
    return best;
  }
  const auto& s = mkt.tree->stats(n);
  const auto sz = static_cast<Eigen::Index>(poly.support.size());
  Vec c(sz);
  for (Eigen::Index j = 0; j < sz; ++j) c(j) = z(poly.support[static_cast<std::size_t>(j)]);
  if (!take_inf) c = -c;
  const auto res = lp::minimize(poly.a_eq, poly.b_eq, c);
  if (res.status != lp::Status::Optimal)
    throw Error(Errc::EmptyPolytope, "node '" + mkt.tree->node(n).id + "': LP failed");
  Vec th = -s.p;
  for (Eigen::Index j = 0; j < sz; ++j) th(poly.support[static_cast<std::size_t>(j)]) += res.x(j);
  return {z.dot(th), th};
}

/// Largest |E_{Q^theta}[S_{t+1}] - (1 + r) S_t| over the node's cached vertices.
inline double vertex_martingale_residual(const Market& mkt, NodeId n) {
  const auto& s = mkt.tree->stats(n);
  double worst = 0.0;
  for (const Vec& th : mkt.polytopes[n].vertices) {
    Vec e = Vec::Zero(mkt.spec.asset_count());
    for (const auto& c : mkt.tree->node(n).children) e += (s.p(c.state) + th(c.state)) * mkt.prices[c.node];
    const Vec gap = e - (1.0 + mkt.spec.r[n]) * mkt.prices[n];
    worst = std::max(worst, gap.cwiseAbs().maxCoeff() / std::max(1.0, mkt.prices[n].cwiseAbs().maxCoeff()));
  }
  return worst;
}

inline Market build_market(const ScenarioTree& tree, MarketSpec spec) {
  validate_market_spec(tree, spec);
  Market mkt;
  mkt.tree = &tree;
  mkt.prices.assign(tree.size(), Vec::Zero(spec.asset_count()));
  mkt.bond = AdaptedProcess(tree.size(), 1.0);
  std::vector<std::string> negative;
  if (spec.s0.minCoeff() <= 0.0) negative.emplace_back("initial prices must be positive");
  mkt.prices[tree.root()] = spec.s0;
  for (int t = 0; t < tree.horizon(); ++t) {
    for (NodeId n : tree.layer(t)) {
      const auto& s = tree.stats(n);
      for (const auto& c : tree.node(n).children) {
        Vec m = -s.p;
        m(c.state) += 1.0;
        const Vec ret = spec.b[n] + spec.sigma[n] * m;
        mkt.prices[c.node] = mkt.prices[n].cwiseProduct(Vec::Ones(ret.size()) + ret);
        mkt.bond[c.node] = mkt.bond[n] * (1.0 + spec.r[n]);
        if (c.prob > 0.0 && mkt.prices[c.node].minCoeff() <= 0.0)
          negative.push_back("node '" + tree.node(c.node).id + "': nonpositive asset price");
      }
    }
  }
  if (!negative.empty()) throw Error(Errc::NegativePrice, std::move(negative));
  mkt.polytopes.resize(tree.size());
  std::vector<std::string> empty;
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    mkt.polytopes[n] = build_polytope(tree.stats(n), spec.r[n], spec.b[n], spec.sigma[n]);
    if (mkt.polytopes[n].vertices.empty()) empty.push_back("node '" + tree.node(n).id + "': empty risk-premium set");
  }
  if (!empty.empty()) throw Error(Errc::EmptyPolytope, std::move(empty));
  mkt.spec = std::move(spec);
  for (NodeId n = 0; n < tree.size(); ++n)
    if (!tree.is_terminal(n)) mkt.martingale_residual = std::max(mkt.martingale_residual, vertex_martingale_residual(mkt, n));
  if (mkt.martingale_residual > 1e-10)
    throw Error(Errc::ValidationError,
                "risk-premium vertex fails the martingale check by " + detail::fmt_double(mkt.martingale_residual));
  return mkt;
}

/// f(y, z) = -r y + inf_theta z^T theta (sub) or sup (super).
inline Driver market_driver(const Market& mkt, bool super) {
  const Market* m = &mkt;
  Driver d(super ? "market_super" : "market_sub",
           [m, super](NodeId n, double y, const Vec& z) {
             return -m->spec.r[n] * y + theta_extremes(*m, n, z, !super).value;
           },
           DriverFlags{.depends_on_y = true, .depends_on_z = true, .normalised = false, .respects_equivalence = true});
  d.with_affine_slope([m](NodeId n) { return -m->spec.r[n]; });
  return d;
}

/// Driver of the linear price under one fixed theta selection.
inline Driver fixed_theta_driver(const Market& mkt, const VectorProcess& theta) {
  AffineCoefficients c = AffineCoefficients::constant(*mkt.tree, 0.0, 0.0);
  for (NodeId n = 0; n < mkt.tree->size(); ++n) {
    c.beta[n] = -mkt.spec.r[n];
    c.gamma[n] = theta[n];
  }
  return affine_driver(*mkt.tree, std::move(c), "fixed_theta");
}

// ---------------------------------------------------------------------------
// Claims

enum class PayoffKind { Call, Put, Identity };

/// Payoff of a vanilla on asset `asset` at every node.
inline AdaptedProcess vanilla_payoff(const Market& mkt, PayoffKind kind, double strike, int asset = 0) {
  AdaptedProcess out(mkt.tree->size());
  for (NodeId n = 0; n < mkt.tree->size(); ++n) {
    const double s = mkt.prices[n](asset);
    switch (kind) {
      case PayoffKind::Call: out[n] = std::max(s - strike, 0.0); break;
      case PayoffKind::Put: out[n] = std::max(strike - s, 0.0); break;
      case PayoffKind::Identity: out[n] = s; break;
    }
  }
  return out;
}

struct EuropeanBounds {
  BsdeSolution sub;
  BsdeSolution super;
};

inline EuropeanBounds price_european_bounds(const Market& mkt, const AdaptedProcess& xi) {
  return {solve_bsde(*mkt.tree, xi, market_driver(mkt, false)),
          solve_bsde(*mkt.tree, xi, market_driver(mkt, true))};
}

struct EnumerationBounds {
  AdaptedProcess lower;
  AdaptedProcess upper;
  std::size_t selections = 0;
};

/// Min and max over every global vertex selection of the discounted
/// Q-expectation of xi, node by node. Returns nullopt above `cap` selections.
inline std::optional<EnumerationBounds> european_bounds_by_enumeration(const Market& mkt, const AdaptedProcess& xi,
                                                                       std::size_t cap = 200000) {
  const auto& tree = *mkt.tree;
  std::vector<NodeId> decision;
  double count = 1.0;
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    if (!mkt.polytopes[n].enumerated) return std::nullopt;
    decision.push_back(n);
    count *= static_cast<double>(mkt.polytopes[n].vertices.size());
  }
  if (count > static_cast<double>(cap)) return std::nullopt;
  EnumerationBounds out{AdaptedProcess(tree.size(), std::numeric_limits<double>::infinity()),
                        AdaptedProcess(tree.size(), -std::numeric_limits<double>::infinity()), 0};
  std::vector<std::size_t> choice(decision.size(), 0);
  std::vector<std::size_t> slot(tree.size(), 0);
  for (std::size_t k = 0; k < decision.size(); ++k) slot[decision[k]] = k;
  AdaptedProcess v(tree.size());
  while (true) {
    for (NodeId leaf : tree.leaves()) v[leaf] = xi[leaf];
    for (int t = tree.horizon() - 1; t >= 0; --t) {
      for (NodeId n : tree.layer(t)) {
        const auto& s = tree.stats(n);
        const Vec& th = mkt.polytopes[n].vertices[choice[slot[n]]];
        double e = 0.0;
        for (const auto& c : tree.node(n).children) e += (s.p(c.state) + th(c.state)) * v[c.node];
        v[n] = e / (1.0 + mkt.spec.r[n]);
      }
    }
    for (NodeId n = 0; n < tree.size(); ++n) {
      out.lower[n] = std::min(out.lower[n], v[n]);
      out.upper[n] = std::max(out.upper[n], v[n]);
    }
    ++out.selections;
    std::size_t k = 0;
    while (k < decision.size() && ++choice[k] == mkt.polytopes[decision[k]].vertices.size()) choice[k++] = 0;
    if (k == decision.size()) break;
  }
  return out;
}

struct AmericanBounds {
  RbsdeSolution sub;
  RbsdeSolution super;
  StoppingTime sub_exercise;
  StoppingTime super_exercise;
};

/// Obstacle and terminal value are both the payoff process.
inline AmericanBounds price_american_bounds(const Market& mkt, const AdaptedProcess& payoff) {
  const auto obstacle = Obstacle::of(payoff);
  AmericanBounds out;
  out.sub = solve_rbsde(*mkt.tree, payoff, market_driver(mkt, false), obstacle);
  out.super = solve_rbsde(*mkt.tree, payoff, market_driver(mkt, true), obstacle);
  out.sub_exercise = first_hitting_rule(*mkt.tree, out.sub, obstacle, mkt.tree->root());
  out.super_exercise = first_hitting_rule(*mkt.tree, out.super, obstacle, mkt.tree->root());
  return out;
}

/// Classical lattice induction from the price ratios of a complete binomial
/// market: V = max(payoff, E_q[V'] / (1 + r)) if american.
inline AdaptedProcess crr_oracle(const Market& mkt, const AdaptedProcess& payoff, bool american) {
  const auto& tree = *mkt.tree;
  if (mkt.spec.asset_count() != 1) throw Error(Errc::NotComplete, "lattice oracle needs exactly one stock");
  AdaptedProcess v(tree.size());
  for (NodeId leaf : tree.leaves()) v[leaf] = payoff[leaf];
  for (int t = tree.horizon() - 1; t >= 0; --t) {
    for (NodeId n : tree.layer(t)) {
      std::vector<NodeId> kids;
      for (const auto& c : tree.node(n).children)
        if (c.prob > 0.0) kids.push_back(c.node);
      if (kids.size() != 2) throw Error(Errc::NotComplete, "node '" + tree.node(n).id + "' is not binary");
      double su = mkt.prices[kids[0]](0);
      double sd = mkt.prices[kids[1]](0);
      NodeId up = kids[0];
      NodeId down = kids[1];
      if (su < sd) {
        std::swap(su, sd);
        std::swap(up, down);
      }
      if (su == sd) throw Error(Errc::NotComplete, "node '" + tree.node(n).id + "': degenerate branching");
      const double growth = (1.0 + mkt.spec.r[n]) * mkt.prices[n](0);
      const double q = (growth - sd) / (su - sd);
      if (q < 0.0 || q > 1.0) throw Error(Errc::NotComplete, "node '" + tree.node(n).id + "': arbitrage");
      const double cont = (q * v[up] + (1.0 - q) * v[down]) / (1.0 + mkt.spec.r[n]);
      v[n] = american ? std::max(payoff[n], cont) : cont;
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Portfolio recovery

struct PortfolioCheck {
  std::vector<std::optional<Vec>> holdings;  // H per node, nullopt if not identifiable
  std::size_t identifiable = 0;
  double residual = 0.0;  // max |Y' - (1+r) Y - H (S' - (1+r) S) + dK|
};

/// Solves P_Q sigma^T w = Z for w_i = H^i S^i_t and checks the discounted
/// self-financing identity with K on every positive-probability edge.
inline PortfolioCheck self_financing_check(const Market& mkt, const RbsdeSolution& sol, double tol = 1e-10) {
  const auto& tree = *mkt.tree;
  PortfolioCheck out;
  out.holdings.assign(tree.size(), std::nullopt);
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    const auto& s = tree.stats(n);
    Mat a(tree.state_count(), mkt.spec.asset_count());
    for (int j = 0; j < mkt.spec.asset_count(); ++j) a.col(j) = project_q(mkt.spec.sigma[n].row(j).transpose(), s.support);
    const Vec w = a.completeOrthogonalDecomposition().solve(sol.z[n]);
    if ((a * w - sol.z[n]).cwiseAbs().maxCoeff() > tol * std::max(1.0, sol.z[n].cwiseAbs().maxCoeff())) continue;
    const Vec h = w.cwiseQuotient(mkt.prices[n]);
    out.holdings[n] = h;
    ++out.identifiable;
    const double g = 1.0 + mkt.spec.r[n];
    for (const auto& c : tree.node(n).children) {
      if (c.prob <= 0.0) continue;
      const double lhs = sol.y[c.node] - g * sol.y[n];
      const double rhs = h.dot(mkt.prices[c.node] - g * mkt.prices[n]) - sol.dk[n];
      out.residual = std::max(out.residual, std::abs(lhs - rhs));
    }
  }
  return out;
}

}  // namespace rbsde
