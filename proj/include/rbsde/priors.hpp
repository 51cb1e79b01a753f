#pragma once

// Multiple-prior families generated by per-node theta selections: densities,
// the kappa-ignorance and scenario drivers, and a direct robust-expectation
// recursion over extreme measures.

#include "rbsde/bsde.hpp"
#include "rbsde/driver.hpp"
#include "rbsde/error.hpp"
#include "rbsde/linalg.hpp"
#include "rbsde/reflected.hpp"
#include "rbsde/tree.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace rbsde {

/// A Q-vector theta per node (leaves carry zeros).
using ThetaSelection = VectorProcess;

inline std::vector<std::string> theta_issues(const NodeStats& s, const Vec& theta, double tol = 1e-12) {
  std::vector<std::string> out;
  if (theta.size() != s.p.size()) {
    out.emplace_back("theta has " + std::to_string(theta.size()) + " components, expected " +
                     std::to_string(s.p.size()));
    return out;
  }
  if (std::abs(theta.sum()) > tol) out.emplace_back("theta does not sum to zero");
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    if (s.p(i) == 0.0) {
      if (std::abs(theta(i)) > tol) out.push_back("theta nonzero off the support in state " + std::to_string(i));
    } else if (s.p(i) + theta(i) < -tol || s.p(i) + theta(i) > 1.0 + tol) {
      out.push_back("p + theta outside [0, 1] in state " + std::to_string(i));
    }
  }
  return out;
}

inline void validate_theta_selection(const ScenarioTree& tree, const ThetaSelection& sel, double tol = 1e-12) {
  if (sel.size() != tree.size()) throw Error(Errc::InvalidTheta, "selection must have one entry per node");
  std::vector<std::string> bad;
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    for (auto& msg : theta_issues(tree.stats(n), sel[n], tol)) bad.push_back("node '" + tree.node(n).id + "': " + msg);
  }
  if (!bad.empty()) throw Error(Errc::InvalidTheta, std::move(bad));
}

struct ThetaMeasure {
  VectorProcess q;          // one-step law under Q^theta per non-terminal node
  AdaptedProcess density;   // W_t = dQ/dP on F_t, per node
  double mean_terminal_density = 0.0;  // E_P[W_T]
  double product_form_gap = 0.0;       // max |prod q_i/p_i - prod (1 + theta^T psi^+ M)|
};

inline ThetaMeasure measure_from_theta(const ScenarioTree& tree, const ThetaSelection& sel) {
  validate_theta_selection(tree, sel);
  ThetaMeasure out{VectorProcess(tree.size(), Vec::Zero(tree.state_count())), AdaptedProcess(tree.size(), 1.0), 0.0,
                   0.0};
  AdaptedProcess product_form(tree.size(), 1.0);
  for (int t = 0; t < tree.horizon(); ++t) {
    for (NodeId n : tree.layer(t)) {
      const auto& s = tree.stats(n);
      out.q[n] = s.p + sel[n];
      const Vec w = s.psi_pinv * sel[n];
      for (const auto& c : tree.node(n).children) {
        if (c.prob <= 0.0) continue;
        out.density[c.node] = out.density[n] * out.q[n](c.state) / c.prob;
        // 1 + theta^T psi^+ (e_i - p)
        const double factor = 1.0 + w(c.state) - w.dot(s.p);
        product_form[c.node] = product_form[n] * factor;
        out.product_form_gap = std::max(out.product_form_gap, std::abs(product_form[c.node] - out.density[c.node]));
      }
    }
  }
  for (NodeId leaf : tree.leaves()) out.mean_terminal_density += tree.path_probability(tree.root(), leaf) * out.density[leaf];
  return out;
}

/// E_{Q^theta}[M_{t+1} | F_t] at a node.
inline Vec theta_drift(const NodeStats& s, const Vec& q) {
  Vec out = Vec::Zero(s.p.size());
  for (int i : s.support) {
    Vec m = -s.p;
    m(i) += 1.0;
    out += q(i) * m;
  }
  return out;
}

// ---------------------------------------------------------------------------
// kappa-ignorance

/// M: f = -kappa ||z||_M with constraint theta^T psi^+ theta <= kappa^2.
/// Mplus: f = -kappa sqrt(z^T psi^+ z) with constraint theta^T psi theta <= kappa^2.
enum class KappaNorm { M, Mplus };

constexpr const char* to_string(KappaNorm n) { return n == KappaNorm::M ? "M" : "Mplus"; }

/// Matrix of the quadratic constraint on theta.
inline const Mat& kappa_constraint_matrix(const NodeStats& s, KappaNorm norm) {
  return norm == KappaNorm::M ? s.psi_pinv : s.psi;
}

/// Matrix D with max{theta_i : theta in the constraint set} = kappa sqrt(D_ii).
inline const Mat& kappa_extent_matrix(const NodeStats& s, KappaNorm norm) {
  return norm == KappaNorm::M ? s.psi : s.psi_pinv;
}

inline std::vector<std::string> kappa_issues(const NodeStats& s, double kappa, KappaNorm norm, double tol = 1e-12) {
  std::vector<std::string> out;
  if (!(kappa >= 0.0)) {
    out.emplace_back("kappa must be nonnegative");
    return out;
  }
  const Mat& d = kappa_extent_matrix(s, norm);
  for (int i : s.support) {
    const double half = kappa * std::sqrt(std::max(d(i, i), 0.0));
    if (s.p(i) - half < -tol || s.p(i) + half > 1.0 + tol)
      out.push_back("state " + std::to_string(i) + ": p = " + detail::fmt_double(s.p(i)) + " +/- " +
                    detail::fmt_double(half) + " leaves [0, 1]");
  }
  return out;
}

inline double kappa_driver_value(const NodeStats& s, double kappa, KappaNorm norm, const Vec& z) {
  const auto mn = m_norms(s, z);
  return -kappa * (norm == KappaNorm::M ? mn.norm_m : mn.norm_mplus);
}

/// Largest kappa admissible at every non-terminal node.
inline double max_admissible_kappa(const ScenarioTree& tree, KappaNorm norm) {
  double best = std::numeric_limits<double>::infinity();
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    const auto& s = tree.stats(n);
    const Mat& d = kappa_extent_matrix(s, norm);
    for (int i : s.support) {
      const double w = std::sqrt(std::max(d(i, i), 0.0));
      if (w > 0.0) best = std::min(best, std::min(s.p(i), 1.0 - s.p(i)) / w);
    }
  }
  return best;
}

inline Driver kappa_driver(const ScenarioTree& tree, std::vector<double> kappa, KappaNorm norm) {
  if (kappa.size() != tree.size()) throw Error(Errc::ValidationError, "kappa must have one entry per node");
  std::vector<std::string> bad;
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    for (auto& msg : kappa_issues(tree.stats(n), kappa[n], norm))
      bad.push_back("node '" + tree.node(n).id + "': " + msg);
  }
  if (!bad.empty()) throw Error(Errc::KappaInadmissible, std::move(bad));
  auto k = std::make_shared<const std::vector<double>>(std::move(kappa));
  const ScenarioTree* tp = &tree;
  Driver d(std::string("kappa_ignorance(") + to_string(norm) + ")",
           [k, tp, norm](NodeId n, double, const Vec& z) { return kappa_driver_value(tp->stats(n), (*k)[n], norm, z); },
           DriverFlags{.depends_on_y = false, .depends_on_z = true, .normalised = true, .respects_equivalence = true});
  d.with_affine_slope([](NodeId) { return 0.0; });
  return d;
}

inline Driver kappa_driver(const ScenarioTree& tree, double kappa, KappaNorm norm) {
  return kappa_driver(tree, std::vector<double>(tree.size(), kappa), norm);
}

// ---------------------------------------------------------------------------
// Scenario perturbation

/// Scenario laws pi^1..pi^n per node (pi^0 is the reference law).
using ScenarioSet = std::vector<std::vector<Vec>>;

inline ScenarioSet constant_scenarios(const ScenarioTree& tree, const std::vector<Vec>& pis) {
  return ScenarioSet(tree.size(), pis);
}

inline void validate_scenarios(const ScenarioTree& tree, double kappa, const ScenarioSet& scen, double tol = 1e-9) {
  std::vector<std::string> bad;
  std::vector<std::string> not_ac;
  if (!(kappa >= 0.0 && kappa <= 1.0)) bad.push_back("kappa = " + detail::fmt_double(kappa) + " outside [0, 1]");
  if (scen.size() != tree.size()) bad.emplace_back("scenario set must have one entry per node");
  if (!bad.empty()) throw Error(Errc::ValidationError, std::move(bad));
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    const auto& s = tree.stats(n);
    for (std::size_t k = 0; k < scen[n].size(); ++k) {
      const Vec& pi = scen[n][k];
      const std::string at = "node '" + tree.node(n).id + "', scenario " + std::to_string(k + 1);
      if (pi.size() != s.p.size()) {
        bad.push_back(at + ": wrong length");
        continue;
      }
      if (pi.minCoeff() < 0.0 || std::abs(pi.sum() - 1.0) > tol) bad.push_back(at + ": not a probability vector");
      for (Eigen::Index i = 0; i < pi.size(); ++i)
        if (s.p(i) == 0.0 && pi(i) != 0.0) not_ac.push_back(at + ": mass on null state " + std::to_string(i));
    }
  }
  if (!not_ac.empty()) throw Error(Errc::ScenarioNotAbsolutelyContinuous, std::move(not_ac));
  if (!bad.empty()) throw Error(Errc::ValidationError, std::move(bad));
}

/// f(z) = kappa min_{i >= 0} z^T (pi^i - pi^0), with pi^0 = p.
inline double scenario_driver_value(const NodeStats& s, double kappa, const std::vector<Vec>& pis, const Vec& z) {
  double best = 0.0;
  for (const Vec& pi : pis) best = std::min(best, z.dot(pi - s.p));
  return kappa * best;
}

inline Driver scenario_driver(const ScenarioTree& tree, double kappa, ScenarioSet scen) {
  validate_scenarios(tree, kappa, scen);
  auto sp = std::make_shared<const ScenarioSet>(std::move(scen));
  const ScenarioTree* tp = &tree;
  Driver d("scenario",
           [sp, tp, kappa](NodeId n, double, const Vec& z) {
             return scenario_driver_value(tp->stats(n), kappa, (*sp)[n], z);
           },
           DriverFlags{.depends_on_y = false, .depends_on_z = true, .normalised = true, .respects_equivalence = true});
  d.with_affine_slope([](NodeId) { return 0.0; });
  return d;
}

/// The scenario driver as a finite inf of affine members: gamma = 0 and
/// gamma = kappa (pi^i - p).
inline std::vector<AffineCoefficients> scenario_members(const ScenarioTree& tree, double kappa,
                                                        const ScenarioSet& scen) {
  validate_scenarios(tree, kappa, scen);
  std::size_t count = 0;
  for (NodeId n = 0; n < tree.size(); ++n)
    if (!tree.is_terminal(n)) count = std::max(count, scen[n].size());
  std::vector<AffineCoefficients> out;
  for (std::size_t k = 0; k <= count; ++k) {
    auto c = AffineCoefficients::constant(tree, 0.0, 0.0);
    for (NodeId n = 0; n < tree.size(); ++n) {
      if (tree.is_terminal(n) || k == 0) continue;
      // Nodes with fewer scenarios repeat their last one.
      const auto& list = scen[n];
      if (list.empty()) continue;
      const Vec& pi = list[std::min(k - 1, list.size() - 1)];
      c.gamma[n] = kappa * (pi - tree.stats(n).p);
    }
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prior families and the direct oracle

enum class PriorKind { KappaIgnorance, Scenario, Explicit };

struct PriorFamily {
  PriorKind kind = PriorKind::Explicit;
  // kappa_ignorance
  std::vector<double> kappa;  // per node; scenario kind uses kappa[0]
  KappaNorm norm = KappaNorm::M;
  // scenario
  ScenarioSet scenarios;
  // explicit: options per node; empty list means {0}
  std::vector<std::vector<Vec>> options;
  bool include_baseline = true;

  static PriorFamily kappa_ignorance(const ScenarioTree& tree, double k, KappaNorm norm) {
    PriorFamily f;
    f.kind = PriorKind::KappaIgnorance;
    f.kappa.assign(tree.size(), k);
    f.norm = norm;
    return f;
  }
  static PriorFamily scenario(const ScenarioTree& tree, double k, ScenarioSet scen) {
    PriorFamily f;
    f.kind = PriorKind::Scenario;
    f.kappa.assign(tree.size(), k);
    f.scenarios = std::move(scen);
    return f;
  }
  static PriorFamily explicit_family(std::vector<std::vector<Vec>> opts, bool baseline = true) {
    PriorFamily f;
    f.kind = PriorKind::Explicit;
    f.options = std::move(opts);
    f.include_baseline = baseline;
    return f;
  }
};

struct OracleOptions {
  int circle_directions = 64;
  int random_directions = 500;
  std::uint64_t seed = 20240611;
};

/// Finite theta options at a node, plus the worst angular distance from the
/// kappa-sphere optimum for the given pairing direction (0 when exact).
struct NodeOptions {
  std::vector<Vec> thetas;
  Mat basis;       // Q-space basis B
  Mat whitening;   // A^{-1/2}, A = B^T D B
  bool sphere = false;
};

inline NodeOptions kappa_node_options(const NodeStats& s, double kappa, KappaNorm norm, const OracleOptions& opt) {
  NodeOptions out;
  out.thetas.push_back(Vec::Zero(s.p.size()));
  const int m = static_cast<int>(s.p.size());
  out.basis = q_basis(m, s.support);
  const auto d = out.basis.cols();
  if (d == 0 || kappa == 0.0) return out;
  out.sphere = true;
  const Mat a = out.basis.transpose() * kappa_constraint_matrix(s, norm) * out.basis;
  Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (a + a.transpose()));
  out.whitening = eig.eigenvectors() * eig.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                  eig.eigenvectors().transpose();
  auto push = [&](const Vec& w) { out.thetas.push_back(kappa * out.basis * (out.whitening * w)); };
  if (d == 1) {
    push(Vec::Constant(1, 1.0));
    push(Vec::Constant(1, -1.0));
  } else if (d == 2) {
    for (int k = 0; k < opt.circle_directions; ++k) {
      const double ang = 2.0 * std::numbers::pi * k / opt.circle_directions;
      Vec w(2);
      w << std::cos(ang), std::sin(ang);
      push(w);
    }
  } else {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> gauss;
    for (int k = 0; k < opt.random_directions; ++k) {
      Vec w(d);
      for (Eigen::Index j = 0; j < d; ++j) w(j) = gauss(rng);
      push(w / w.norm());
    }
  }
  return out;
}

inline NodeOptions node_options(const ScenarioTree& tree, const PriorFamily& f, NodeId n, const OracleOptions& opt) {
  const auto& s = tree.stats(n);
  NodeOptions out;
  switch (f.kind) {
    case PriorKind::KappaIgnorance: return kappa_node_options(s, f.kappa.at(n), f.norm, opt);
    case PriorKind::Scenario:
      out.thetas.push_back(Vec::Zero(s.p.size()));
      for (const Vec& pi : f.scenarios.at(n)) out.thetas.push_back(f.kappa.at(n) * (pi - s.p));
      return out;
    case PriorKind::Explicit:
      if (f.include_baseline || f.options.at(n).empty()) out.thetas.push_back(Vec::Zero(s.p.size()));
      for (const Vec& th : f.options.at(n)) out.thetas.push_back(th);
      return out;
  }
  return out;
}

struct RobustOracleResult {
  AdaptedProcess value;
  AdaptedProcess gap;  // bound on |value - exact| from the sphere discretization
  bool exact = true;
};

/// V_t = opt over the node's theta options of sum_i (p_i + theta_i) V_{t+1},
/// floored by the obstacle when present.
inline RobustOracleResult robust_expectation_oracle(const ScenarioTree& tree, const AdaptedProcess& xi,
                                                    const PriorFamily& family, bool take_inf,
                                                    const Obstacle& obstacle = Obstacle::none(),
                                                    const OracleOptions& opt = {}) {
  if (family.kind == PriorKind::Scenario) validate_scenarios(tree, family.kappa.at(0), family.scenarios);
  RobustOracleResult r{AdaptedProcess(tree.size()), AdaptedProcess(tree.size()), true};
  for (NodeId leaf : tree.leaves()) r.value[leaf] = xi[leaf];
  for (int t = tree.horizon() - 1; t >= 0; --t) {
    for (NodeId n : tree.layer(t)) {
      const auto& s = tree.stats(n);
      const Vec vals = child_values(tree, r.value, n);
      const NodeOptions no = node_options(tree, family, n, opt);
      double best = 0.0;
      bool first = true;
      Vec best_theta = Vec::Zero(s.p.size());
      for (const Vec& th : no.thetas) {
        if (!theta_issues(s, th, 1e-9).empty())
          throw Error(Errc::InvalidTheta, "option at node '" + tree.node(n).id + "' is not a valid measure change");
        double v = 0.0;
        for (int i : s.support) v += (s.p(i) + th(i)) * vals(i);
        if (first || (take_inf ? v < best : v > best)) {
          best = v;
          best_theta = th;
          first = false;
        }
      }
      double child_gap = 0.0;
      for (const auto& c : tree.node(n).children)
        if (c.prob > 0.0) child_gap = std::max(child_gap, r.gap[c.node]);
      double local = 0.0;
      if (no.sphere && no.basis.cols() >= 2) {
        r.exact = false;
        // Optimal whitened direction is +/- A^{-1/2} B^T z; measure the
        // angle to the nearest sampled direction.
        Vec h = Vec::Zero(s.p.size());
        double e = 0.0;
        for (int i : s.support) e += s.p(i) * vals(i);
        for (int i : s.support) h(i) = vals(i) - e;
        const Vec z = represent_martingale(s, h, 1e-8);
        const Vec u = no.whitening * (no.basis.transpose() * z);
        const double radius = family.kappa.at(n) * u.norm();
        if (radius > 0.0) {
          double cos_best;
          if (no.basis.cols() == 2) {
            cos_best = std::cos(std::numbers::pi / opt.circle_directions);
          } else {
            const Vec target = (take_inf ? -1.0 : 1.0) * u / u.norm();
            cos_best = -1.0;
            // theta = kappa B A^{-1/2} w  =>  w = A^{1/2} B^T theta / kappa
            const Mat unwhiten = no.whitening.inverse();
            for (std::size_t k = 1; k < no.thetas.size(); ++k) {
              Vec w = unwhiten * (no.basis.transpose() * no.thetas[k]) / family.kappa.at(n);
              cos_best = std::max(cos_best, w.normalized().dot(target));
            }
          }
          local = radius * (1.0 - cos_best);
        }
      }
      r.gap[n] = local + child_gap;
      r.value[n] = obstacle.present() ? std::max(obstacle[n], best) : best;
    }
  }
  return r;
}

/// G over the family as a one-step conditional operator (for induced_driver).
inline ConditionalOperator robust_operator(const ScenarioTree& tree, const PriorFamily& family, bool take_inf,
                                           const OracleOptions& opt = {}) {
  return [&tree, family, take_inf, opt](NodeId n, const Vec& vals) {
    const auto& s = tree.stats(n);
    const NodeOptions no = node_options(tree, family, n, opt);
    double best = 0.0;
    bool first = true;
    for (const Vec& th : no.thetas) {
      double v = 0.0;
      for (int i : s.support) v += (s.p(i) + th(i)) * vals(i);
      if (first || (take_inf ? v < best : v > best)) best = v;
      first = false;
    }
    return best;
  };
}

/// f(z) = opt over the node's finite theta options of z^T theta.
inline Driver option_driver(const ScenarioTree& tree, const PriorFamily& family, bool take_inf,
                            const OracleOptions& opt = {}) {
  auto thetas = std::make_shared<std::vector<std::vector<Vec>>>(tree.size());
  for (NodeId n = 0; n < tree.size(); ++n)
    if (!tree.is_terminal(n)) (*thetas)[n] = node_options(tree, family, n, opt).thetas;
  Driver d(take_inf ? "option_inf" : "option_sup",
           [thetas, take_inf](NodeId n, double, const Vec& z) {
             double best = 0.0;
             bool first = true;
             for (const Vec& th : (*thetas)[n]) {
               const double v = z.dot(th);
               if (first || (take_inf ? v < best : v > best)) best = v;
               first = false;
             }
             return best;
           },
           DriverFlags{.depends_on_y = false, .depends_on_z = true, .normalised = true, .respects_equivalence = true});
  d.with_affine_slope([](NodeId) { return 0.0; });
  return d;
}

/// Driver whose g-expectation is the inf (or sup) over the family. The sup
/// form is z -> -f_inf(-z).
inline Driver family_driver(const ScenarioTree& tree, const PriorFamily& f, bool take_inf = true) {
  if (f.kind == PriorKind::Explicit) return option_driver(tree, f, take_inf);
  Driver base = f.kind == PriorKind::KappaIgnorance ? kappa_driver(tree, f.kappa, f.norm)
                                                    : scenario_driver(tree, f.kappa.at(0), f.scenarios);
  if (take_inf) return base;
  Driver d(base.name() + "_sup", [base](NodeId n, double y, const Vec& z) { return -base(n, y, -z); }, base.flags());
  d.with_affine_slope([](NodeId) { return 0.0; });
  return d;
}

// ---------------------------------------------------------------------------
// Pasting

/// sel1 outside the subtree of `event`, sel2 on it.
inline ThetaSelection paste(const ScenarioTree& tree, const ThetaSelection& sel1, const ThetaSelection& sel2,
                            NodeId event) {
  ThetaSelection out = sel1;
  for (NodeId n : tree.subtree(event)) out[n] = sel2[n];
  return out;
}

/// Whether every node's theta belongs to the family's option set.
inline bool is_admissible(const ScenarioTree& tree, const PriorFamily& f, const ThetaSelection& sel,
                          double tol = 1e-12) {
  if (sel.size() != tree.size()) return false;
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    const auto& s = tree.stats(n);
    const Vec& th = sel[n];
    if (!theta_issues(s, th, tol).empty()) return false;
    switch (f.kind) {
      case PriorKind::KappaIgnorance: {
        const double q = th.dot(kappa_constraint_matrix(s, f.norm) * th);
        const double k = f.kappa.at(n);
        if (q > k * k * (1.0 + 1e-9) + tol) return false;
        break;
      }
      case PriorKind::Scenario: {
        bool found = th.cwiseAbs().maxCoeff() <= tol;
        for (const Vec& pi : f.scenarios.at(n)) {
          const Vec dir = pi - s.p;
          const double dd = dir.squaredNorm();
          if (dd == 0.0) continue;
          const double lambda = th.dot(dir) / dd;
          if (lambda >= -tol && lambda <= f.kappa.at(n) + tol && (th - lambda * dir).cwiseAbs().maxCoeff() <= 1e-9)
            found = true;
        }
        if (!found) return false;
        break;
      }
      case PriorKind::Explicit: {
        bool found = f.include_baseline && th.cwiseAbs().maxCoeff() <= tol;
        for (const Vec& o : f.options.at(n))
          if ((o - th).cwiseAbs().maxCoeff() <= tol) found = true;
        if (!found) return false;
        break;
      }
    }
  }
  return true;
}

}  // namespace rbsde
