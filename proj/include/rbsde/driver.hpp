#pragma once

// Drivers (generators) f(node, y, z) and the implicit one-step solve
// y - f(node, y, z) = target.

#include "rbsde/error.hpp"
#include "rbsde/linalg.hpp"
#include "rbsde/tree.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace rbsde {

struct DriverFlags {
  bool depends_on_y = true;
  bool depends_on_z = true;
  bool normalised = false;
  bool respects_equivalence = true;
};

/// Bisection settings for drivers without a closed-form step.
struct RootOptions {
  double tolerance = 1e-12;
  int max_doublings = 200;
  int max_bisections = 400;
};

class Driver {
 public:
  using Eval = std::function<double(NodeId, double, const Vec&)>;
  /// Slope beta(node) for drivers of the form c(node, z) + beta(node) * y.
  using Slope = std::function<double(NodeId)>;
  /// Root of y - f(node, y, z) = target, supplied by structured drivers.
  using StepSolver = std::function<double(NodeId, const Vec&, double)>;

  Driver() = default;
  Driver(std::string name, Eval eval, DriverFlags flags = {})
      : name_(std::move(name)), eval_(std::move(eval)), flags_(flags) {}

  double operator()(NodeId node, double y, const Vec& z) const { return eval_(node, y, z); }

  const std::string& name() const noexcept { return name_; }
  const DriverFlags& flags() const noexcept { return flags_; }
  DriverFlags& flags() noexcept { return flags_; }

  Driver& with_affine_slope(Slope slope) {
    slope_ = std::move(slope);
    return *this;
  }
  Driver& with_step_solver(StepSolver solver) {
    solver_ = std::move(solver);
    return *this;
  }
  bool affine_in_y() const noexcept { return static_cast<bool>(slope_); }
  double slope(NodeId node) const { return slope_ ? slope_(node) : 0.0; }

  /// Unique y with y - f(node, y, z) = target.
  double solve_step(NodeId node, const Vec& z, double target, const RootOptions& opt = {}) const {
    if (solver_) return solver_(node, z, target);
    if (slope_) {
      const double beta = slope_(node);
      if (!(beta < 1.0))
        throw Error(Errc::RootNotBracketed, name_ + ": slope in y is " + detail::fmt_double(beta) +
                                                " (y - f must be strictly increasing)");
      const double c = eval_(node, 0.0, z);
      return (target + c) / (1.0 - beta);
    }
    return bisect_step(node, z, target, opt);
  }

  double bisect_step(NodeId node, const Vec& z, double target, const RootOptions& opt = {}) const {
    auto g = [&](double y) { return y - eval_(node, y, z) - target; };
    double half = 1.0;
    double lo = target - half;
    double hi = target + half;
    double glo = g(lo);
    double ghi = g(hi);
    int doublings = 0;
    while (!(glo <= 0.0 && ghi >= 0.0)) {
      if (std::isnan(glo) || std::isnan(ghi) || ++doublings > opt.max_doublings)
        throw Error(Errc::RootNotBracketed, name_ + ": no sign change around target " + detail::fmt_double(target));
      half *= 2.0;
      lo = target - half;
      hi = target + half;
      glo = g(lo);
      ghi = g(hi);
    }
    if (glo == 0.0) return lo;
    if (ghi == 0.0) return hi;
    for (int i = 0; i < opt.max_bisections; ++i) {
      const double mid = 0.5 * (lo + hi);
      if (hi - lo <= opt.tolerance * std::max(1.0, std::abs(mid))) break;
      const double gm = g(mid);
      if (gm == 0.0) return mid;
      if (gm < 0.0)
        lo = mid;
      else
        hi = mid;
    }
    return 0.5 * (lo + hi);
  }

 private:
  std::string name_;
  Eval eval_;
  DriverFlags flags_;
  Slope slope_;
  StepSolver solver_;
};

// ---------------------------------------------------------------------------
// Standard drivers

inline Driver zero_driver() {
  Driver d("zero", [](NodeId, double, const Vec&) { return 0.0; },
           DriverFlags{.depends_on_y = false, .depends_on_z = false, .normalised = true, .respects_equivalence = true});
  d.with_affine_slope([](NodeId) { return 0.0; });
  return d;
}

/// Per-node coefficients of f(node, y, z) = alpha + beta * y + <gamma, z>.
struct AffineCoefficients {
  std::vector<double> alpha;
  std::vector<double> beta;
  VectorProcess gamma;

  static AffineCoefficients constant(const ScenarioTree& tree, double alpha, double beta, const Vec& gamma) {
    return {std::vector<double>(tree.size(), alpha), std::vector<double>(tree.size(), beta),
            VectorProcess(tree.size(), gamma)};
  }
  static AffineCoefficients constant(const ScenarioTree& tree, double alpha, double beta) {
    return constant(tree, alpha, beta, Vec::Zero(tree.state_count()));
  }
};

/// True when gamma is a Q-vector at every non-terminal node.
inline bool gamma_is_q_vector(const ScenarioTree& tree, const VectorProcess& gamma, double tol = 1e-12) {
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    const auto& s = tree.stats(n);
    if ((project_q(gamma[n], s.support) - gamma[n]).cwiseAbs().maxCoeff() > tol) return false;
  }
  return true;
}

inline Driver affine_driver(const ScenarioTree& tree, AffineCoefficients coeffs, std::string name = "affine") {
  if (coeffs.alpha.size() != tree.size() || coeffs.beta.size() != tree.size() || coeffs.gamma.size() != tree.size())
    throw Error(Errc::ValidationError, name + ": coefficient arrays must have one entry per node");
  bool has_beta = false;
  bool has_alpha = false;
  bool has_gamma = false;
  for (NodeId n = 0; n < tree.size(); ++n) {
    has_alpha = has_alpha || coeffs.alpha[n] != 0.0;
    has_beta = has_beta || coeffs.beta[n] != 0.0;
    has_gamma = has_gamma || coeffs.gamma[n].cwiseAbs().maxCoeff() != 0.0;
  }
  DriverFlags flags{.depends_on_y = has_beta,
                    .depends_on_z = has_gamma,
                    .normalised = !has_alpha && !has_beta,
                    .respects_equivalence = gamma_is_q_vector(tree, coeffs.gamma)};
  auto c = std::make_shared<const AffineCoefficients>(std::move(coeffs));
  Driver d(std::move(name),
           [c](NodeId n, double y, const Vec& z) { return c->alpha[n] + c->beta[n] * y + c->gamma[n].dot(z); },
           flags);
  d.with_affine_slope([c](NodeId n) { return c->beta[n]; });
  return d;
}

/// Pointwise inf (or sup) of a finite driver family. The one-step root is the
/// min (max) of the members' roots since y - f is then the max (min) of
/// increasing maps.
inline Driver extremum_of(std::vector<Driver> members, bool take_inf, std::string name = {}) {
  if (members.empty()) throw Error(Errc::FamilyMemberInvalid, "empty driver family");
  DriverFlags flags{.depends_on_y = false, .depends_on_z = false, .normalised = true, .respects_equivalence = true};
  for (const auto& m : members) {
    flags.depends_on_y = flags.depends_on_y || m.flags().depends_on_y;
    flags.depends_on_z = flags.depends_on_z || m.flags().depends_on_z;
    flags.normalised = flags.normalised && m.flags().normalised;
    flags.respects_equivalence = flags.respects_equivalence && m.flags().respects_equivalence;
  }
  if (name.empty()) name = take_inf ? "inf_family" : "sup_family";
  auto fam = std::make_shared<const std::vector<Driver>>(std::move(members));
  Driver d(std::move(name),
           [fam, take_inf](NodeId n, double y, const Vec& z) {
             double best = (*fam)[0](n, y, z);
             for (std::size_t k = 1; k < fam->size(); ++k) {
               const double v = (*fam)[k](n, y, z);
               best = take_inf ? std::min(best, v) : std::max(best, v);
             }
             return best;
           },
           flags);
  d.with_step_solver([fam, take_inf](NodeId n, const Vec& z, double target) {
    double best = (*fam)[0].solve_step(n, z, target);
    for (std::size_t k = 1; k < fam->size(); ++k) {
      const double r = (*fam)[k].solve_step(n, z, target);
      best = take_inf ? std::min(best, r) : std::max(best, r);
    }
    return best;
  });
  return d;
}

/// f + n (y - S)^- used by the penalization scheme.
inline Driver penalized_driver(const Driver& base, const AdaptedProcess& obstacle, double n) {
  DriverFlags flags = base.flags();
  flags.depends_on_y = true;
  flags.normalised = false;
  auto b = std::make_shared<const Driver>(base);
  auto s = std::make_shared<const AdaptedProcess>(obstacle);
  Driver d(base.name() + "+penalty",
           [b, s, n](NodeId node, double y, const Vec& z) {
             return (*b)(node, y, z) + n * std::max((*s)[node] - y, 0.0);
           },
           flags);
  d.with_step_solver([b, s, n](NodeId node, const Vec& z, double target) {
    const double free = b->solve_step(node, z, target);
    const double barrier = (*s)[node];
    if (free >= barrier) return free;
    // Below the barrier: y - f(y) + n (y - S) = target, strictly increasing.
    if (b->affine_in_y()) {
      const double beta = b->slope(node);
      const double c = (*b)(node, 0.0, z);
      return (target + c + n * barrier) / (1.0 - beta + n);
    }
    Driver below("penalty-branch", [b, barrier, n](NodeId k, double y, const Vec& zz) {
      return (*b)(k, y, zz) + n * (barrier - y);
    });
    return below.bisect_step(node, z, target);
  });
  return d;
}

}  // namespace rbsde
