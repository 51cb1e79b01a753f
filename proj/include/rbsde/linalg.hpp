#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace rbsde {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Relative eigenvalue cutoff used by the symmetric pseudoinverse.
inline constexpr double kPinvCutoff = 1e-12;

/// Moore-Penrose pseudoinverse of a symmetric positive semidefinite matrix by
/// spectral decomposition. Eigenvalues at or below `cutoff * lambda_max` are
/// treated as zero; an all-zero matrix maps to the zero matrix.
inline Mat symmetric_pinv(const Mat& a, double cutoff = kPinvCutoff) {
  const Eigen::Index n = a.rows();
  Mat out = Mat::Zero(n, n);
  if (n == 0) return out;
  Eigen::SelfAdjointEigenSolver<Mat> eig(a);
  const Vec& lambda = eig.eigenvalues();
  const double top = lambda.cwiseAbs().maxCoeff();
  if (top <= 0.0) return out;
  const double floor = cutoff * top;
  const Mat& v = eig.eigenvectors();
  for (Eigen::Index k = 0; k < n; ++k) {
    if (lambda(k) > floor) out.noalias() += (1.0 / lambda(k)) * v.col(k) * v.col(k).transpose();
  }
  return 0.5 * (out + out.transpose());
}

/// Orthogonal projection onto the Q-vectors of a node: zero sum and zero off
/// `support`.
inline Vec project_q(const Vec& z, std::span<const int> support) {
  Vec out = Vec::Zero(z.size());
  if (support.empty()) return out;
  double mean = 0.0;
  for (int i : support) mean += z(i);
  mean /= static_cast<double>(support.size());
  for (int i : support) out(i) = z(i) - mean;
  return out;
}

/// Orthonormal basis (columns) of the Q-vector subspace, dimension |support|-1.
inline Mat q_basis(int m, std::span<const int> support) {
  const auto s = static_cast<Eigen::Index>(support.size());
  if (s <= 1) return Mat::Zero(m, 0);
  // Gram-Schmidt on e_{s_0} - e_{s_k} is enough here; use a QR for stability.
  Mat gen = Mat::Zero(m, s - 1);
  for (Eigen::Index k = 1; k < s; ++k) {
    gen(support[0], k - 1) = 1.0;
    gen(support[static_cast<std::size_t>(k)], k - 1) = -1.0;
  }
  Eigen::HouseholderQR<Mat> qr(gen);
  Mat q = qr.householderQ() * Mat::Identity(m, s - 1);
  return q;
}

}  // namespace rbsde
