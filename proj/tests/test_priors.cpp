#include "support.hpp"

#include <gtest/gtest.h>

using namespace rbsde;
using namespace rbsde::testing;

namespace {

AdaptedProcess one_step_terminal(const ScenarioTree& tree, std::initializer_list<double> vals) {
  AdaptedProcess xi(tree.size());
  int i = 0;
  for (double v : vals) xi[tree.child(0, i++)] = v;
  return xi;
}

/// A random theta inside the kappa constraint set at a node (rejection on a
/// scaled direction).
Vec random_kappa_theta(const NodeStats& s, const Mat& constraint, double kappa, Rng& rng) {
  Vec th = random_theta(s, rng);
  const double q = th.dot(constraint * th);
  if (q > 0.0) th *= uniform(rng, 0.0, 1.0) * kappa / std::sqrt(q);
  return th;
}

}  // namespace

// Measure change

TEST(MeasureFromTheta, OneStepBinary) {
  const auto tree = build_kernel_tree(1, {0.5, 0.5});
  ThetaSelection sel(tree.size(), Vec::Zero(2));
  sel[0] = vec({0.1, -0.1});
  const auto m = measure_from_theta(tree, sel);
  EXPECT_NEAR(m.q[0](0), 0.6, 1e-15);
  EXPECT_NEAR(m.density[tree.child(0, 0)], 1.2, 1e-15);
  EXPECT_NEAR(m.density[tree.child(0, 1)], 0.8, 1e-15);
  EXPECT_NEAR(m.mean_terminal_density, 1.0, 1e-15);
  EXPECT_LT(m.product_form_gap, 1e-14);
}

TEST(MeasureFromTheta, TernaryTwoSteps) {
  const auto tree = build_kernel_tree(2, {0.2, 0.3, 0.5});
  ThetaSelection sel(tree.size(), Vec::Zero(3));
  for (NodeId n = 0; n < tree.size(); ++n)
    if (!tree.is_terminal(n)) sel[n] = vec({0.1, 0.0, -0.1});
  const auto m = measure_from_theta(tree, sel);
  // Leaf (0, 2): (0.3 / 0.2) (0.4 / 0.5).
  const NodeId leaf = tree.child(tree.child(0, 0), 2);
  EXPECT_NEAR(m.density[leaf], 1.5 * 0.8, 1e-14);
  EXPECT_NEAR(m.mean_terminal_density, 1.0, 1e-14);
  EXPECT_LT(m.product_form_gap, 1e-13);
}

TEST(MeasureFromTheta, RandomSelectionsAreMartingaleDensities) {
  Rng rng(201);
  for (int trial = 0; trial < 50; ++trial) {
    const auto tree = random_explicit_tree(rng, uniform_int(rng, 2, 4), uniform_int(rng, 1, 3));
    const auto sel = random_selection(tree, rng);
    const auto m = measure_from_theta(tree, sel);
    EXPECT_NEAR(m.mean_terminal_density, 1.0, 1e-12);
    EXPECT_LT(m.product_form_gap, 1e-10);
    for (NodeId n = 0; n < tree.size(); ++n) {
      if (tree.is_terminal(n)) continue;
      EXPECT_NEAR(conditional_expectation(tree, m.density, n), m.density[n], 1e-12);
      // Under Q^theta the one-step drift of M is theta.
      EXPECT_LT((theta_drift(tree.stats(n), m.q[n]) - sel[n]).cwiseAbs().maxCoeff(), 1e-14);
    }
  }
}

TEST(MeasureFromTheta, InvalidThetaIsRejected) {
  const auto tree = build_kernel_tree(1, {0.5, 0.5});
  ThetaSelection sel(tree.size(), Vec::Zero(2));
  sel[0] = vec({0.6, -0.6});
  EXPECT_EQ(error_code([&] { measure_from_theta(tree, sel); }), Errc::InvalidTheta);
  sel[0] = vec({0.1, 0.1});
  EXPECT_EQ(error_code([&] { measure_from_theta(tree, sel); }), Errc::InvalidTheta);
  const auto lopsided = build_kernel_tree(1, {1.0, 0.0});
  ThetaSelection off(lopsided.size(), Vec::Zero(2));
  off[0] = vec({-0.1, 0.1});
  EXPECT_EQ(error_code([&] { measure_from_theta(lopsided, off); }), Errc::InvalidTheta);
}

// kappa-ignorance

TEST(KappaDriver, BinaryValues) {
  const auto tree = build_kernel_tree(1, {0.5, 0.5});
  const auto& s = tree.stats(0);
  // z^T psi z = 1 and z^T psi^+ z = 4 for z = (1, -1).
  EXPECT_NEAR(kappa_driver_value(s, 0.3, KappaNorm::M, vec({1, -1})), -0.3, 1e-15);
  EXPECT_NEAR(kappa_driver_value(s, 0.3, KappaNorm::Mplus, vec({1, -1})), -0.6, 1e-14);
  EXPECT_NEAR(kappa_driver_value(s, 0.3, KappaNorm::M, vec({2, 2})), 0.0, 1e-15);
  EXPECT_NEAR(max_admissible_kappa(tree, KappaNorm::M), 1.0, 1e-15);
  EXPECT_NEAR(max_admissible_kappa(tree, KappaNorm::Mplus), 0.5, 1e-15);
}

TEST(KappaDriver, MatchesWorstThetaInConstraintSet) {
  // f(z) = min over theta^T C theta <= kappa^2 of z^T theta: the minimiser
  // is -kappa D z / sqrt(z^T D z) with D the extent matrix.
  Rng rng(202);
  for (int trial = 0; trial < 50; ++trial) {
    const auto tree = random_tree(rng, uniform_int(rng, 2, 4), 1, false);
    const auto& s = tree.stats(0);
    for (KappaNorm norm : {KappaNorm::M, KappaNorm::Mplus}) {
      const double kappa = uniform(rng, 0.0, max_admissible_kappa(tree, norm));
      Vec z(tree.state_count());
      for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = uniform(rng, -3, 3);
      const Mat& d = norm == KappaNorm::M ? s.psi : s.psi_pinv;
      const Mat& c = norm == KappaNorm::M ? s.psi_pinv : s.psi;
      const double q = z.dot(d * z);
      const Vec th = -kappa * (d * z) / std::sqrt(q);
      EXPECT_NEAR(th.dot(c * th), kappa * kappa, 1e-10);
      EXPECT_NEAR(kappa_driver_value(s, kappa, norm, z), z.dot(th), 1e-10);
      for (int k = 0; k < 20; ++k) {
        const Vec other = random_kappa_theta(s, c, kappa, rng);
        EXPECT_LE(kappa_driver_value(s, kappa, norm, z), z.dot(other) + 1e-12);
      }
    }
  }
}

TEST(KappaDriver, InadmissibleKappaIsRejected) {
  const auto tree = build_kernel_tree(2, {0.5, 0.5});
  EXPECT_EQ(error_code([&] { kappa_driver(tree, 1.01, KappaNorm::M); }), Errc::KappaInadmissible);
  EXPECT_EQ(error_code([&] { kappa_driver(tree, 0.6, KappaNorm::Mplus); }), Errc::KappaInadmissible);
  EXPECT_EQ(error_code([&] { kappa_driver(tree, -0.1, KappaNorm::M); }), Errc::KappaInadmissible);
  EXPECT_NO_THROW(kappa_driver(tree, 1.0, KappaNorm::M));
}

// Scenario perturbation

TEST(ScenarioDriver, BinaryValues) {
  const auto tree = build_kernel_tree(1, {0.5, 0.5});
  const auto& s = tree.stats(0);
  const std::vector<Vec> pis{vec({0.6, 0.4})};
  EXPECT_NEAR(scenario_driver_value(s, 0.5, pis, vec({1, -1})), 0.0, 1e-15);
  EXPECT_NEAR(scenario_driver_value(s, 0.5, pis, vec({-1, 1})), -0.1, 1e-15);
  EXPECT_NEAR(scenario_driver_value(s, 0.5, {}, vec({-1, 1})), 0.0, 1e-15);
}

TEST(ScenarioDriver, ValidationErrors) {
  const auto lopsided = build_kernel_tree(1, {1.0, 0.0});
  EXPECT_EQ(error_code([&] { scenario_driver(lopsided, 0.5, constant_scenarios(lopsided, {vec({0.5, 0.5})})); }),
            Errc::ScenarioNotAbsolutelyContinuous);
  const auto tree = build_kernel_tree(1, {0.5, 0.5});
  EXPECT_EQ(error_code([&] { scenario_driver(tree, 1.5, constant_scenarios(tree, {vec({0.6, 0.4})})); }),
            Errc::ValidationError);
  EXPECT_EQ(error_code([&] { scenario_driver(tree, 0.5, constant_scenarios(tree, {vec({0.7, 0.4})})); }),
            Errc::ValidationError);
}

// Robust expectation oracle

TEST(RobustOracle, OneStepExamples) {
  const auto tree = build_kernel_tree(1, {0.5, 0.5});
  const auto xi = one_step_terminal(tree, {2, 0});
  const auto kap = PriorFamily::kappa_ignorance(tree, 0.1, KappaNorm::M);
  const auto lo = robust_expectation_oracle(tree, xi, kap, true);
  const auto hi = robust_expectation_oracle(tree, xi, kap, false);
  EXPECT_TRUE(lo.exact);
  EXPECT_NEAR(lo.value[0], 0.9, 1e-12);
  EXPECT_NEAR(hi.value[0], 1.1, 1e-12);

  const auto scen = PriorFamily::scenario(tree, 1.0, constant_scenarios(tree, {vec({0.6, 0.4})}));
  const auto xi2 = one_step_terminal(tree, {1, 0});
  EXPECT_NEAR(robust_expectation_oracle(tree, xi2, scen, true).value[0], 0.5, 1e-15);
  EXPECT_NEAR(robust_expectation_oracle(tree, xi2, scen, false).value[0], 0.6, 1e-15);
}

TEST(RobustOracle, AgreesWithKappaBsde) {
  Rng rng(203);
  for (int trial = 0; trial < 30; ++trial) {
    const auto tree = random_tree(rng, uniform_int(rng, 2, 3), uniform_int(rng, 1, 3));
    const auto norm = trial % 2 ? KappaNorm::M : KappaNorm::Mplus;
    const double kappa = uniform(rng, 0.0, max_admissible_kappa(tree, norm));
    const auto fam = PriorFamily::kappa_ignorance(tree, kappa, norm);
    const auto xi = random_process(tree, rng);
    for (bool take_inf : {true, false}) {
      const auto y = solve_bsde(tree, xi, family_driver(tree, fam, take_inf)).y;
      const auto o = robust_expectation_oracle(tree, xi, fam, take_inf);
      for (NodeId n = 0; n < tree.size(); ++n) {
        EXPECT_LE(std::abs(y[n] - o.value[n]), o.gap[n] + 1e-10) << "trial " << trial;
        if (take_inf) {
          EXPECT_GE(o.value[n], y[n] - 1e-10);
        } else {
          EXPECT_LE(o.value[n], y[n] + 1e-10);
        }
      }
    }
  }
}

TEST(RobustOracle, AgreesWithScenarioBsdeAndExplicitFamilies) {
  Rng rng(204);
  for (int trial = 0; trial < 30; ++trial) {
    const auto tree = random_tree(rng, uniform_int(rng, 2, 3), uniform_int(rng, 1, 3), false);
    std::vector<Vec> pis;
    for (int k = 0; k < uniform_int(rng, 1, 3); ++k) {
      const auto law = random_law(rng, tree.state_count(), false);
      pis.push_back(Eigen::Map<const Vec>(law.data(), static_cast<Eigen::Index>(law.size())));
    }
    const double kappa = uniform(rng, 0.0, 1.0);
    const auto fam = PriorFamily::scenario(tree, kappa, constant_scenarios(tree, pis));
    const auto xi = random_process(tree, rng);
    for (bool take_inf : {true, false}) {
      const auto o = robust_expectation_oracle(tree, xi, fam, take_inf);
      EXPECT_TRUE(o.exact);
      EXPECT_LT(max_abs_diff(solve_bsde(tree, xi, family_driver(tree, fam, take_inf)).y, o.value), 1e-10);
    }
    std::vector<std::vector<Vec>> opts(tree.size());
    for (NodeId n = 0; n < tree.size(); ++n)
      if (!tree.is_terminal(n)) opts[n] = {random_theta(tree.stats(n), rng), random_theta(tree.stats(n), rng)};
    const auto ex = PriorFamily::explicit_family(opts);
    const auto o = robust_expectation_oracle(tree, xi, ex, true);
    EXPECT_LT(max_abs_diff(solve_bsde(tree, xi, family_driver(tree, ex, true)).y, o.value), 1e-10);
  }
}

// Pasting

TEST(Pasting, KappaSelectionsStayAdmissible) {
  Rng rng(205);
  for (int trial = 0; trial < 30; ++trial) {
    const auto tree = random_tree(rng, uniform_int(rng, 2, 3), uniform_int(rng, 2, 3), false);
    const auto norm = trial % 2 ? KappaNorm::M : KappaNorm::Mplus;
    const double kappa = 0.8 * max_admissible_kappa(tree, norm);
    const auto fam = PriorFamily::kappa_ignorance(tree, kappa, norm);
    ThetaSelection a(tree.size(), Vec::Zero(tree.state_count()));
    ThetaSelection b = a;
    for (NodeId n = 0; n < tree.size(); ++n) {
      if (tree.is_terminal(n)) continue;
      const Mat& c = kappa_constraint_matrix(tree.stats(n), norm);
      a[n] = random_kappa_theta(tree.stats(n), c, kappa, rng);
      b[n] = random_kappa_theta(tree.stats(n), c, kappa, rng);
    }
    ASSERT_TRUE(is_admissible(tree, fam, a));
    ASSERT_TRUE(is_admissible(tree, fam, b));
    const NodeId event = tree.layer(1)[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(tree.layer(1).size()) - 1))];
    const auto pasted = paste(tree, a, b, event);
    EXPECT_TRUE(is_admissible(tree, fam, pasted));
    for (NodeId n = 0; n < tree.size(); ++n) {
      const bool inside = tree.time(n) >= 1 && tree.ancestor_at(n, 1) == event;
      EXPECT_TRUE(pasted[n] == (inside ? b[n] : a[n]));
    }
    // Pasted density: W^a up to the event, then W^b / W^b(event).
    const auto wa = measure_from_theta(tree, a).density;
    const auto wb = measure_from_theta(tree, b).density;
    const auto wp = measure_from_theta(tree, pasted).density;
    for (NodeId leaf : tree.leaves_below(event)) EXPECT_NEAR(wp[leaf], wa[event] * wb[leaf] / wb[event], 1e-12);
  }
}

TEST(Pasting, OutsideThetaIsDetected) {
  const auto tree = build_kernel_tree(1, {0.5, 0.5});
  const auto fam = PriorFamily::kappa_ignorance(tree, 0.1, KappaNorm::M);
  ThetaSelection sel(tree.size(), Vec::Zero(2));
  sel[0] = vec({0.1, -0.1});
  EXPECT_FALSE(is_admissible(tree, fam, sel));
  sel[0] = vec({0.05, -0.05});
  EXPECT_TRUE(is_admissible(tree, fam, sel));
}
