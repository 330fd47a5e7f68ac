#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "vintk/tensor.hpp"

namespace vintk {

struct SymEigen {
  std::vector<double> values;  // ascending
  Matrix vectors;              // column k is the eigenvector of values[k]
};

struct JacobiOptions {
  /// Stop when the off-diagonal Frobenius norm drops below tol * ||m||_F.
  double tol = 1e-12;
  int max_sweeps = 100;
  /// Input asymmetry accepted before the matrix is rejected.
  double symmetry_tol = 1e-9;
};

namespace detail {

inline double off_diagonal_norm(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

}  // namespace detail

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// The matrix is symmetrized before rotating; anything further than
/// `symmetry_tol` (relative to the largest entry) from symmetric is rejected.
/// Throws NumericError when the sweep cap is reached, with the residual
/// off-diagonal mass and the diagonal range in the message.
inline SymEigen sym_eigendecompose(const Matrix& m, const JacobiOptions& opt = {}) {
  if (!m.square()) throw ShapeError("eigendecomposition needs a square matrix");
  const std::size_t n = m.rows();
  for (double v : m.data())
    if (!std::isfinite(v)) throw NumericError("eigendecomposition input has non-finite entries");

  double scale = 0.0;
  for (double v : m.data()) scale = std::max(scale, std::abs(v));
  if (m.asymmetry() > opt.symmetry_tol * std::max(1.0, scale)) {
    std::ostringstream os;
    os << "matrix is not symmetric (max asymmetry " << m.asymmetry() << ")";
    throw ShapeError(os.str());
  }

  Matrix a = m;
  a.symmetrize();
  Matrix v = Matrix::identity(n);
  const double norm = a.frobenius();
  const double target = opt.tol * (norm > 0.0 ? norm : 1.0);

  int sweep = 0;
  while (detail::off_diagonal_norm(a) > target) {
    if (sweep++ >= opt.max_sweeps) {
      double dmin = a(0, 0), dmax = a(0, 0);
      for (std::size_t i = 0; i < n; ++i) {
        dmin = std::min(dmin, a(i, i));
        dmax = std::max(dmax, a(i, i));
      }
      std::ostringstream os;
      os << "Jacobi eigensolver did not converge after " << opt.max_sweeps
         << " sweeps: off-diagonal norm " << detail::off_diagonal_norm(a) << ", ||m||_F " << norm
         << ", diagonal range [" << dmin << ", " << dmax << "]";
      throw NumericError(os.str());
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) < a(j, j); });
  SymEigen out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, k) = v(r, order[k]);
  }
  return out;
}

/// Q diag(values) Q^T.
inline Matrix reconstruct(const SymEigen& e) {
  const std::size_t n = e.values.size();
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += e.vectors(i, k) * e.values[k] * e.vectors(j, k);
      out(i, j) = s;
    }
  return out;
}

}  // namespace vintk
