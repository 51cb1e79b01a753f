#pragma once

// Small dense linear programs over {x >= 0, A x = b}: exact vertex
// enumeration through basic solutions, and a two-phase simplex with Bland's
// rule for larger instances.

#include "rbsde/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace rbsde::lp {

inline constexpr double kFeasTol = 1e-10;

/// Vertices of {x >= 0, A x = b}. Every basic solution over a column subset
/// whose size equals rank(A) is tried; duplicates are merged.
inline std::vector<Vec> enumerate_vertices(const Mat& a, const Vec& b, double tol = kFeasTol) {
  const auto n = a.cols();
  std::vector<Vec> out;
  if (n == 0) return out;
  Eigen::FullPivLU<Mat> lu(a);
  lu.setThreshold(1e-12);
  const auto r = lu.rank();
  auto push_unique = [&](const Vec& x) {
    for (const auto& v : out)
      if ((v - x).cwiseAbs().maxCoeff() <= 1e-9) return;
    out.push_back(x);
  };
  std::vector<int> pick(static_cast<std::size_t>(r));
  // Iterate over all r-subsets of {0..n-1} in lexicographic order.
  for (Eigen::Index k = 0; k < r; ++k) pick[static_cast<std::size_t>(k)] = static_cast<int>(k);
  while (true) {
    Mat sub(a.rows(), r);
    for (Eigen::Index k = 0; k < r; ++k) sub.col(k) = a.col(pick[static_cast<std::size_t>(k)]);
    Eigen::ColPivHouseholderQR<Mat> qr(sub);
    qr.setThreshold(1e-12);
    if (qr.rank() == r) {
      const Vec xb = r > 0 ? Vec(qr.solve(b)) : Vec();
      Vec x = Vec::Zero(n);
      for (Eigen::Index k = 0; k < r; ++k) x(pick[static_cast<std::size_t>(k)]) = xb(k);
      const double resid = (a * x - b).cwiseAbs().maxCoeff();
      if (resid <= tol * std::max(1.0, b.cwiseAbs().maxCoeff()) && (x.size() == 0 || x.minCoeff() >= -tol)) {
        x = x.cwiseMax(0.0);
        push_unique(x);
      }
    }
    // next combination
    Eigen::Index i = r - 1;
    while (i >= 0 && pick[static_cast<std::size_t>(i)] == static_cast<int>(n - r + i)) --i;
    if (i < 0) break;
    ++pick[static_cast<std::size_t>(i)];
    for (Eigen::Index j = i + 1; j < r; ++j)
      pick[static_cast<std::size_t>(j)] = pick[static_cast<std::size_t>(j - 1)] + 1;
  }
  return out;
}

enum class Status { Optimal, Infeasible, Unbounded };

struct Result {
  Status status = Status::Infeasible;
  double value = 0.0;
  Vec x;
};

namespace detail {

/// Tableau simplex on rows [A | b] with an objective row; Bland's rule.
/// `basis[i]` is the basic column of row i. Minimizes the objective row.
inline bool run_simplex(Mat& tab, std::vector<int>& basis, int n_cols, double tol) {
  const auto rows = tab.rows() - 1;
  const auto rhs = tab.cols() - 1;
  for (int iter = 0; iter < 10000; ++iter) {
    int enter = -1;
    for (int j = 0; j < n_cols; ++j)
      if (tab(rows, j) < -tol) {
        enter = j;
        break;
      }
    if (enter < 0) return true;
    int leave = -1;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (tab(i, enter) > tol) {
        const double ratio = tab(i, rhs) / tab(i, enter);
        if (ratio < best - tol || (std::abs(ratio - best) <= tol && leave >= 0 && basis[i] < basis[leave])) {
          best = ratio;
          leave = static_cast<int>(i);
        }
      }
    }
    if (leave < 0) return false;
    tab.row(leave) /= tab(leave, enter);
    for (Eigen::Index i = 0; i <= rows; ++i)
      if (i != leave && tab(i, enter) != 0.0) tab.row(i) -= tab(i, enter) * tab.row(leave);
    basis[static_cast<std::size_t>(leave)] = enter;
  }
  return false;
}

}  // namespace detail

/// min c^T x subject to A x = b, x >= 0.
inline Result minimize(const Mat& a, const Vec& b, const Vec& c, double tol = 1e-11) {
  const auto m = a.rows();
  const auto n = a.cols();
  Mat aa = a;
  Vec bb = b;
  for (Eigen::Index i = 0; i < m; ++i)
    if (bb(i) < 0.0) {
      aa.row(i) *= -1.0;
      bb(i) *= -1.0;
    }
  // Phase 1 with artificials n..n+m-1.
  Mat tab = Mat::Zero(m + 1, n + m + 1);
  tab.topLeftCorner(m, n) = aa;
  tab.block(0, n, m, m) = Mat::Identity(m, m);
  tab.col(n + m).head(m) = bb;
  std::vector<int> basis(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) basis[static_cast<std::size_t>(i)] = static_cast<int>(n + i);
  for (Eigen::Index i = 0; i < m; ++i) tab.row(m) -= tab.row(i);
  detail::run_simplex(tab, basis, static_cast<int>(n + m), tol);
  Result out;
  if (tab(m, n + m) < -1e-9 * std::max(1.0, bb.cwiseAbs().maxCoeff())) return out;
  // Drive remaining artificials out of the basis where possible.
  for (Eigen::Index i = 0; i < m; ++i) {
    if (basis[static_cast<std::size_t>(i)] < n) continue;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (std::abs(tab(i, j)) > 1e-9) {
        tab.row(i) /= tab(i, j);
        for (Eigen::Index k = 0; k <= m; ++k)
          if (k != i) tab.row(k) -= tab(k, j) * tab.row(i);
        basis[static_cast<std::size_t>(i)] = static_cast<int>(j);
        break;
      }
    }
  }
  // Phase 2: drop artificial columns (redundant rows keep an artificial at 0).
  Mat t2 = Mat::Zero(m + 1, n + 1);
  t2.topLeftCorner(m, n) = tab.topLeftCorner(m, n);
  t2.col(n).head(m) = tab.col(n + m).head(m);
  t2.row(m).head(n) = c.transpose();
  for (Eigen::Index i = 0; i < m; ++i) {
    const int bcol = basis[static_cast<std::size_t>(i)];
    if (bcol < n) t2.row(m) -= c(bcol) * t2.row(i);
  }
  if (!detail::run_simplex(t2, basis, static_cast<int>(n), tol)) {
    out.status = Status::Unbounded;
    return out;
  }
  out.status = Status::Optimal;
  out.x = Vec::Zero(n);
  for (Eigen::Index i = 0; i < m; ++i) {
    const int bcol = basis[static_cast<std::size_t>(i)];
    if (bcol < n) out.x(bcol) = std::max(t2(i, n), 0.0);
  }
  out.value = c.dot(out.x);
  return out;
}

}  // namespace rbsde::lp
