#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "adl/error.hpp"

namespace adl {

using DenseMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Eigenpairs of a symmetric matrix; columns of `eigenvectors` pair with
/// `eigenvalues`, which are sorted in non-increasing order.
struct EigenDecomposition {
  DenseMatrix eigenvectors;
  Vector eigenvalues;
};

/// log(sum(exp(logits))) with the max shifted out. Entries equal to -inf are
/// excluded; returns -inf when every entry is excluded.
inline double log_sum_exp(std::span<const double> logits) {
  double peak = -std::numeric_limits<double>::infinity();
  for (double l : logits) {
    if (std::isnan(l) || l == std::numeric_limits<double>::infinity())
      throw NumericalError("log_sum_exp: non-finite logit");
    peak = std::max(peak, l);
  }
  if (peak == -std::numeric_limits<double>::infinity()) return peak;
  double total = 0.0;
  for (double l : logits) total += std::exp(l - peak);
  return peak + std::log(total);
}

/// Normalized exponentials. -inf marks an excluded entry.
inline Vector stable_softmax(std::span<const double> logits) {
  double peak = -std::numeric_limits<double>::infinity();
  for (double l : logits) {
    if (std::isnan(l) || l == std::numeric_limits<double>::infinity())
      throw NumericalError("stable_softmax: non-finite logit");
    peak = std::max(peak, l);
  }
  if (peak == -std::numeric_limits<double>::infinity())
    throw NumericalError("stable_softmax: empty support");
  Vector out(static_cast<Eigen::Index>(logits.size()));
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] = std::exp(logits[i] - peak);
    total += out[static_cast<Eigen::Index>(i)];
  }
  out /= total;
  return out;
}

inline Vector stable_softmax(const Vector& logits) {
  return stable_softmax(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())));
}

namespace detail {

// Flip each eigenvector so its largest-magnitude entry is positive; the
// lowest index wins ties. Makes eigenvector output reproducible.
inline void canonicalize_signs(DenseMatrix& vecs) {
  for (Eigen::Index c = 0; c < vecs.cols(); ++c) {
    Eigen::Index best = 0;
    double best_abs = -1.0;
    for (Eigen::Index r = 0; r < vecs.rows(); ++r) {
      const double a = std::abs(vecs(r, c));
      if (a > best_abs + 1e-12) {
        best_abs = a;
        best = r;
      }
    }
    if (vecs.rows() > 0 && vecs(best, c) < 0.0) vecs.col(c) *= -1.0;
  }
}

}  // namespace detail

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
/// The input is symmetrized as (m + m^T) / 2 first.
inline EigenDecomposition sym_eigen(const DenseMatrix& m) {
  if (m.rows() != m.cols())
    throw ConfigError("sym_eigen: matrix is " + std::to_string(m.rows()) + "x" +
                      std::to_string(m.cols()) + ", expected square");
  if (!m.allFinite()) throw NumericalError("sym_eigen: non-finite entry");
  const Eigen::Index n = m.rows();
  EigenDecomposition out;
  if (n == 0) return out;
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
  if (solver.info() != Eigen::Success) throw NumericalError("sym_eigen: solver did not converge");
  // Eigen returns ascending order; reverse it.
  out.eigenvalues = solver.eigenvalues().reverse();
  out.eigenvectors = solver.eigenvectors().rowwise().reverse();
  detail::canonicalize_signs(out.eigenvectors);
  return out;
}

/// sym_eigen for matrices that are positive semidefinite by construction.
/// Eigenvalues down to -1e-10 * max(1, largest) are clamped to zero; anything
/// more negative is reported as a numerical error.
inline EigenDecomposition psd_eigen(const DenseMatrix& m) {
  EigenDecomposition e = sym_eigen(m);
  if (e.eigenvalues.size() == 0) return e;
  const double scale = std::max(1.0, e.eigenvalues[0]);
  for (Eigen::Index i = 0; i < e.eigenvalues.size(); ++i) {
    double& v = e.eigenvalues[i];
    if (v < 0.0) {
      if (v < -1e-10 * scale)
        throw NumericalError("psd_eigen: eigenvalue " + std::to_string(v) + " is significantly negative");
      v = 0.0;
    }
  }
  return e;
}

/// Orthogonal projector onto the row space of `a`, i.e. A^T (A A^T)^+ A.
/// Computed from the right singular vectors with nonzero singular values.
inline DenseMatrix row_space_projection(const DenseMatrix& a) {
  if (!a.allFinite()) throw NumericalError("row_space_projection: non-finite entry");
  const Eigen::Index n = a.cols();
  DenseMatrix p = DenseMatrix::Zero(n, n);
  if (a.size() == 0) return p;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv[0] == 0.0) return p;
  const double tol = static_cast<double>(std::max(a.rows(), a.cols())) *
                     std::numeric_limits<double>::epsilon() * sv[0];
  for (Eigen::Index k = 0; k < sv.size(); ++k) {
    if (sv[k] <= tol) break;
    const Eigen::VectorXd v = svd.matrixV().col(k);
    p.noalias() += v * v.transpose();
  }
  return p;
}

}  // namespace adl
