#include "support.hpp"

#include <gtest/gtest.h>

using namespace rbsde;
using namespace rbsde::testing;

namespace {

Mat row(std::initializer_list<double> v) {
  const Vec r = vec(v);
  return r.transpose();
}

Market binary_market(const ScenarioTree& tree, double r, double b) {
  return build_market(tree, MarketSpec::constant(tree, r, vec({b}), row({0.2, -0.2}), vec({100})));
}

Market ternary_market(const ScenarioTree& tree, double r = 0.01) {
  return build_market(tree, MarketSpec::constant(tree, r, vec({0.02}), row({0.15, 0.0, -0.15}), vec({100})));
}

/// Discounted Q-expectation of xi under a fixed vertex choice per node.
AdaptedProcess linear_price(const Market& mkt, const AdaptedProcess& xi, const std::vector<std::size_t>& pick,
                            const AdaptedProcess* obstacle) {
  const auto& tree = *mkt.tree;
  AdaptedProcess v(tree.size());
  for (NodeId leaf : tree.leaves()) v[leaf] = xi[leaf];
  for (int t = tree.horizon() - 1; t >= 0; --t)
    for (NodeId n : tree.layer(t)) {
      const auto& s = tree.stats(n);
      const Vec& th = mkt.polytopes[n].vertices[pick[n]];
      double e = 0.0;
      for (const auto& c : tree.node(n).children) e += (s.p(c.state) + th(c.state)) * v[c.node];
      v[n] = e / (1.0 + mkt.spec.r[n]);
      if (obstacle) v[n] = std::max(v[n], (*obstacle)[n]);
    }
  return v;
}

}  // namespace

TEST(Market, BinaryPolytopeIsTheRiskNeutralLaw) {
  const auto tree = build_kernel_tree(1, {0.5, 0.5});
  const auto mkt = binary_market(tree, 0.0, 0.05);
  EXPECT_NEAR(mkt.prices[tree.child(0, 0)](0), 125.0, 1e-12);
  EXPECT_NEAR(mkt.prices[tree.child(0, 1)](0), 85.0, 1e-12);
  ASSERT_EQ(mkt.polytopes[0].vertices.size(), 1u);
  const Vec& th = mkt.polytopes[0].vertices[0];
  EXPECT_NEAR(0.5 + th(0), 0.375, 1e-14);
  EXPECT_TRUE(mkt.complete());
  EXPECT_LT(mkt.martingale_residual, 1e-12);
}

TEST(Market, NoRiskPremiumGivesZeroTheta) {
  const auto tree = build_kernel_tree(2, {0.5, 0.5});
  const auto mkt = binary_market(tree, 0.03, 0.03);
  for (NodeId n = 0; n < tree.size(); ++n)
    if (!tree.is_terminal(n)) {
      EXPECT_LT(mkt.polytopes[n].vertices.at(0).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(Market, TernarySegmentEndpointsAreMartingaleMeasures) {
  const auto tree = build_kernel_tree(2, {0.3, 0.4, 0.3});
  const auto mkt = ternary_market(tree);
  EXPECT_FALSE(mkt.complete());
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    ASSERT_EQ(mkt.polytopes[n].vertices.size(), 2u);
    for (const Vec& th : mkt.polytopes[n].vertices) {
      const Vec q = tree.stats(n).p + th;
      EXPECT_GE(q.minCoeff(), -1e-14);
      EXPECT_NEAR(q.minCoeff(), 0.0, 1e-14);  // an endpoint kills one state
      double e = 0.0;
      for (const auto& c : tree.node(n).children) e += q(c.state) * mkt.prices[c.node](0);
      EXPECT_NEAR(e / (1.0 + mkt.spec.r[n]), mkt.prices[n](0), 1e-10);
    }
  }
}

TEST(Market, ThetaExtremesMatchVertexScan) {
  Rng rng(301);
  const auto tree = build_kernel_tree(1, {0.3, 0.4, 0.3});
  const auto mkt = ternary_market(tree);
  for (int k = 0; k < 50; ++k) {
    const Vec z = vec({uniform(rng, -3, 3), uniform(rng, -3, 3), uniform(rng, -3, 3)});
    double lo = 1e300, hi = -1e300;
    // Dense scan of the segment between the two endpoints.
    const Vec& a = mkt.polytopes[0].vertices[0];
    const Vec& b = mkt.polytopes[0].vertices[1];
    for (int j = 0; j <= 1000; ++j) {
      const double v = z.dot(a + (b - a) * (j / 1000.0));
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    EXPECT_NEAR(theta_extremes(mkt, 0, z, true).value, lo, 1e-12);
    EXPECT_NEAR(theta_extremes(mkt, 0, z, false).value, hi, 1e-12);
  }
}

TEST(Market, InvalidMarketsAreRejected) {
  const auto tree = build_kernel_tree(1, {0.5, 0.5});
  EXPECT_EQ(error_code([&] {
              build_market(tree, MarketSpec::constant(tree, 0.0, vec({0.05}), row({2, -2}), vec({100})));
            }),
            Errc::NegativePrice);
  EXPECT_EQ(error_code([&] { binary_market(tree, 0.0, 0.5); }), Errc::EmptyPolytope);
  const auto ter = build_kernel_tree(1, {0.3, 0.4, 0.3});
  const auto mkt = ternary_market(ter);
  EXPECT_EQ(error_code([&] { crr_oracle(mkt, vanilla_payoff(mkt, PayoffKind::Put, 100), true); }), Errc::NotComplete);
}

// European claims

TEST(European, OneStepCall) {
  const auto tree = build_kernel_tree(1, {0.5, 0.5});
  const auto mkt = binary_market(tree, 0.0, 0.05);
  const auto bounds = price_european_bounds(mkt, vanilla_payoff(mkt, PayoffKind::Call, 100));
  EXPECT_NEAR(bounds.sub.y[0], 9.375, 1e-12);
  EXPECT_NEAR(bounds.super.y[0], 9.375, 1e-12);
}

TEST(European, CompleteMarketMatchesLattice) {
  const auto tree = build_kernel_tree(4, {0.5, 0.5});
  const auto mkt = binary_market(tree, 0.01, 0.04);
  for (auto kind : {PayoffKind::Call, PayoffKind::Put}) {
    const auto xi = vanilla_payoff(mkt, kind, 100);
    const auto bounds = price_european_bounds(mkt, xi);
    const auto lattice = crr_oracle(mkt, xi, false);
    EXPECT_LT(max_abs_diff(bounds.sub.y, lattice), 1e-10);
    EXPECT_LT(max_abs_diff(bounds.super.y, lattice), 1e-10);
  }
}

TEST(European, StockIsReplicableInIncompleteMarket) {
  const auto tree = build_kernel_tree(3, {0.3, 0.4, 0.3});
  const auto mkt = ternary_market(tree, 0.02);
  const auto bounds = price_european_bounds(mkt, vanilla_payoff(mkt, PayoffKind::Identity, 0));
  EXPECT_NEAR(bounds.sub.y[0], 100.0, 1e-10);
  EXPECT_NEAR(bounds.super.y[0], 100.0, 1e-10);
}

TEST(European, IncompleteBoundsMatchEnumeration) {
  const auto tree = build_kernel_tree(2, {0.3, 0.4, 0.3});
  const auto mkt = ternary_market(tree);
  for (auto kind : {PayoffKind::Call, PayoffKind::Put}) {
    const auto xi = vanilla_payoff(mkt, kind, 100);
    const auto bounds = price_european_bounds(mkt, xi);
    const auto en = european_bounds_by_enumeration(mkt, xi);
    ASSERT_TRUE(en.has_value());
    EXPECT_EQ(en->selections, 16u);
    EXPECT_LT(max_abs_diff(bounds.sub.y, en->lower), 1e-10);
    EXPECT_LT(max_abs_diff(bounds.super.y, en->upper), 1e-10);
    EXPECT_LT(bounds.sub.y[0], bounds.super.y[0] - 1e-3);
  }
  EXPECT_FALSE(european_bounds_by_enumeration(mkt, vanilla_payoff(mkt, PayoffKind::Call, 100), 10).has_value());
}

// American claims

TEST(American, PutMatchesLatticeAndExerciseRule) {
  const auto tree = build_kernel_tree(2, {0.5, 0.5});
  const auto mkt = binary_market(tree, 0.0, 0.05);
  const auto payoff = vanilla_payoff(mkt, PayoffKind::Put, 100);
  const auto am = price_american_bounds(mkt, payoff);
  const auto lattice = crr_oracle(mkt, payoff, true);
  EXPECT_NEAR(am.super.y[0], 10.83984375, 1e-12);
  EXPECT_LT(max_abs_diff(am.sub.y, lattice), 1e-12);
  EXPECT_LT(max_abs_diff(am.super.y, lattice), 1e-12);
  // Exercise exactly where the lattice value meets intrinsic value.
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    EXPECT_EQ(am.super_exercise.stops_at(n), std::abs(lattice[n] - payoff[n]) < 1e-12) << tree.node(n).id;
  }
}

TEST(American, CallEqualsEuropeanWithNonnegativeRate) {
  const auto tree = build_kernel_tree(4, {0.5, 0.5});
  const auto mkt = binary_market(tree, 0.01, 0.04);
  const auto payoff = vanilla_payoff(mkt, PayoffKind::Call, 100);
  const auto am = price_american_bounds(mkt, payoff);
  const auto eu = price_european_bounds(mkt, payoff);
  EXPECT_NEAR(am.super.y[0], eu.super.y[0], 1e-10);
  for (NodeId n = 0; n < tree.size(); ++n) EXPECT_NEAR(am.super.k[n], 0.0, 1e-10);
}

TEST(American, FixedVertexPricesLieBetweenBounds) {
  Rng rng(302);
  const auto tree = build_kernel_tree(3, {0.3, 0.4, 0.3});
  const auto mkt = ternary_market(tree);
  const auto payoff = vanilla_payoff(mkt, PayoffKind::Put, 100);
  const auto am = price_american_bounds(mkt, payoff);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> pick(tree.size(), 0);
    VectorProcess theta(tree.size(), Vec::Zero(3));
    for (NodeId n = 0; n < tree.size(); ++n) {
      if (tree.is_terminal(n)) continue;
      pick[n] = static_cast<std::size_t>(uniform_int(rng, 0, 1));
      theta[n] = mkt.polytopes[n].vertices[pick[n]];
    }
    const auto fixed = solve_rbsde(tree, payoff, fixed_theta_driver(mkt, theta), Obstacle::of(payoff));
    EXPECT_LT(max_abs_diff(fixed.y, linear_price(mkt, payoff, pick, &payoff)), 1e-10);
    for (NodeId n = 0; n < tree.size(); ++n) {
      EXPECT_LE(am.sub.y[n], fixed.y[n] + 1e-10);
      EXPECT_GE(am.super.y[n], fixed.y[n] - 1e-10);
    }
  }
}

TEST(American, SelfFinancingPortfolioInCompleteMarket) {
  const auto tree = build_kernel_tree(4, {0.5, 0.5});
  const auto mkt = binary_market(tree, 0.01, 0.04);
  const auto am = price_american_bounds(mkt, vanilla_payoff(mkt, PayoffKind::Put, 100));
  const auto chk = self_financing_check(mkt, am.super);
  std::size_t inner = 0;
  for (NodeId n = 0; n < tree.size(); ++n) inner += tree.is_terminal(n) ? 0 : 1;
  EXPECT_EQ(chk.identifiable, inner);
  EXPECT_LT(chk.residual, 1e-9);
}

TEST(American, IncompleteSuperPriceIsAtLeastTheEuropeanSuperPrice) {
  const auto tree = build_kernel_tree(3, {0.3, 0.4, 0.3});
  const auto mkt = ternary_market(tree);
  const auto payoff = vanilla_payoff(mkt, PayoffKind::Put, 100);
  const auto am = price_american_bounds(mkt, payoff);
  const auto eu = price_european_bounds(mkt, payoff);
  EXPECT_GE(am.super.y[0], eu.super.y[0] - 1e-12);
  EXPECT_GE(am.sub.y[0], eu.sub.y[0] - 1e-12);
  EXPECT_LE(am.sub.y[0], am.super.y[0]);
  EXPECT_TRUE(check_rbsde_invariants(tree, am.super, payoff, market_driver(mkt, true), Obstacle::of(payoff)).ok());
}
