#pragma once

// Random instance generators and independent oracles shared by the tests.

#include "rbsde.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <random>
#include <vector>

namespace rbsde::testing {

using Rng = std::mt19937_64;

inline Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

/// Error code thrown by `fn`; records a failure when nothing is thrown.
template <class Fn>
Errc error_code(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::ValidationError;
}


inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

/// Random probability vector of length m; with `allow_zero` some entries
/// (never all) are zero.
inline std::vector<double> random_law(Rng& rng, int m, bool allow_zero) {
  std::vector<double> p(static_cast<std::size_t>(m));
  for (auto& x : p) x = uniform(rng, 0.1, 1.0);
  if (allow_zero && m > 2 && uniform(rng, 0, 1) < 0.3) p[static_cast<std::size_t>(uniform_int(rng, 0, m - 1))] = 0.0;
  double s = 0.0;
  for (double x : p) s += x;
  for (auto& x : p) x /= s;
  return p;
}

/// Markov kernel tree with random rows (one per state).
inline ScenarioTree random_tree(Rng& rng, int m, int horizon, bool allow_zero = true) {
  KernelSpec k;
  k.horizon = horizon;
  k.state_count = m;
  for (int i = 0; i < m; ++i) k.rows.push_back(random_law(rng, m, allow_zero));
  k.initial_state = uniform_int(rng, 0, m - 1);
  return build_tree(k);
}

/// Random explicit tree with per-node laws (not homogeneous).
inline ScenarioTree random_explicit_tree(Rng& rng, int m, int horizon, bool allow_zero = true) {
  ExplicitTreeSpec e;
  e.horizon = horizon;
  e.state_count = m;
  std::vector<std::pair<std::string, int>> frontier{{"r", 0}};
  while (!frontier.empty()) {
    auto [id, t] = frontier.back();
    frontier.pop_back();
    ExplicitNodeSpec node{id, t, {}};
    if (t < horizon) {
      const auto p = random_law(rng, m, allow_zero);
      for (int i = 0; i < m; ++i) {
        const std::string cid = id + "." + std::to_string(i);
        node.children.push_back({i, p[static_cast<std::size_t>(i)], cid});
        frontier.emplace_back(cid, t + 1);
      }
    }
    e.nodes.push_back(node);
  }
  return build_tree(e);
}

inline AdaptedProcess random_process(const ScenarioTree& tree, Rng& rng, double lo = -5.0, double hi = 5.0) {
  return tree.make_process([&](NodeId) { return uniform(rng, lo, hi); });
}

/// Integer-valued process (exact arithmetic in tests that need it).
inline AdaptedProcess random_int_process(const ScenarioTree& tree, Rng& rng, int lo, int hi) {
  return tree.make_process([&](NodeId) { return static_cast<double>(uniform_int(rng, lo, hi)); });
}

/// A random valid measure change at a node: gamma = lambda (q - p) for a
/// random law q on the support, so p + gamma stays in [0, 1].
inline Vec random_theta(const NodeStats& s, Rng& rng, double max_scale = 1.0) {
  const int m = static_cast<int>(s.p.size());
  Vec q = Vec::Zero(m);
  double tot = 0.0;
  for (int i : s.support) {
    q(i) = uniform(rng, 0.05, 1.0);
    tot += q(i);
  }
  q /= tot;
  return uniform(rng, 0.0, max_scale) * (q - s.p);
}

inline ThetaSelection random_selection(const ScenarioTree& tree, Rng& rng, double max_scale = 1.0) {
  ThetaSelection sel(tree.size(), Vec::Zero(tree.state_count()));
  for (NodeId n = 0; n < tree.size(); ++n)
    if (!tree.is_terminal(n)) sel[n] = random_theta(tree.stats(n), rng, max_scale);
  return sel;
}

/// Random affine coefficients: |beta| <= beta_max, gamma a valid measure change.
inline AffineCoefficients random_affine(const ScenarioTree& tree, Rng& rng, double beta_max = 0.9) {
  auto c = AffineCoefficients::constant(tree, 0.0, 0.0);
  for (NodeId n = 0; n < tree.size(); ++n) {
    if (tree.is_terminal(n)) continue;
    c.alpha[n] = uniform(rng, -1.0, 1.0);
    c.beta[n] = uniform(rng, -beta_max, beta_max);
    c.gamma[n] = random_theta(tree.stats(n), rng);
  }
  return c;
}

/// Obstacle below xi at the leaves, sometimes binding inside.
inline AdaptedProcess random_obstacle(const ScenarioTree& tree, const AdaptedProcess& xi, Rng& rng) {
  AdaptedProcess s = random_process(tree, rng, -3.0, 4.0);
  for (NodeId leaf : tree.leaves()) s[leaf] = xi[leaf] - uniform(rng, 0.0, 1.0);
  return s;
}

// ---------------------------------------------------------------------------
// Oracles

/// Plain dynamic programming over child laws, without Z: for f = alpha +
/// beta y + gamma^T z one step reads (1 - beta) y = alpha + sum (p + gamma)_i
/// Y'_i, and the obstacle floors y.
inline AdaptedProcess affine_rbsde_oracle(const ScenarioTree& tree, const AdaptedProcess& xi,
                                          const AffineCoefficients& c, const AdaptedProcess* obstacle) {
  AdaptedProcess y(tree.size());
  for (NodeId leaf : tree.leaves()) y[leaf] = xi[leaf];
  for (int t = tree.horizon() - 1; t >= 0; --t)
    for (NodeId n : tree.layer(t)) {
      double acc = c.alpha[n];
      for (const auto& ch : tree.node(n).children) acc += (ch.prob + c.gamma[n](ch.state)) * y[ch.node];
      y[n] = acc / (1.0 - c.beta[n]);
      if (obstacle) y[n] = std::max(y[n], (*obstacle)[n]);
    }
  return y;
}

/// E[xi | node] by summing over leaves below the node.
inline double path_expectation(const ScenarioTree& tree, const AdaptedProcess& xi, NodeId node) {
  double e = 0.0;
  for (NodeId leaf : tree.leaves_below(node)) e += tree.path_probability(node, leaf) * xi[leaf];
  return e;
}

/// A copy of `x` with every value at times > t replaced by its F_t version
/// (constant below each time-t node).
inline AdaptedProcess freeze_at(const ScenarioTree& tree, const AdaptedProcess& x, int t) {
  AdaptedProcess out = x;
  for (NodeId n = 0; n < tree.size(); ++n)
    if (tree.time(n) > t) out[n] = x[tree.ancestor_at(n, t)];
  return out;
}

inline double max_abs_diff(const AdaptedProcess& a, const AdaptedProcess& b) {
  double w = 0.0;
  for (NodeId i = 0; i < a.size(); ++i) w = std::max(w, std::abs(a[i] - b[i]));
  return w;
}

}  // namespace rbsde::testing
