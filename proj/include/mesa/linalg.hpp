#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/QR>
#include <Eigen/SVD>

#include "mesa/matrix.hpp"
#include "mesa/rng.hpp"

namespace mesa {

inline constexpr double kSpdAsymmetryTol = 1e-10;

// Lower-triangular Cholesky factor of the symmetric part of `a`.
// Throws NotSPD when `a` is not square, asymmetric beyond tolerance, or not
// positive definite.
inline Matrix cholesky(const Matrix& a) {
  if (a.rows() != a.cols()) throw NotSPD("matrix is not square: " + a.shape_str());
  const std::size_t n = a.rows();
  const double scale = std::max(max_abs(a), 1e-300);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(a(i, j) - a(j, i)) > kSpdAsymmetryTol * scale) {
        throw NotSPD("asymmetry exceeds tolerance at (" + std::to_string(i) + "," +
                     std::to_string(j) + ")");
      }
    }
  }
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) throw NotSPD("non-positive pivot at column " + std::to_string(j));
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.5 * (a(i, j) + a(j, i));
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

// Solves a x = b for symmetric positive-definite a via Cholesky.
inline Matrix solve_spd(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeMismatch("solve_spd " + a.shape_str() + " vs rhs " + b.shape_str());
  }
  const Matrix l = cholesky(a);
  const std::size_t n = a.rows();
  Matrix x = b;
  for (std::size_t c = 0; c < b.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = x(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
      x(i, c) = s / l(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = x(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, c);
      x(ii, c) = s / l(ii, ii);
    }
  }
  return x;
}

inline Matrix inverse_spd(const Matrix& a) { return solve_spd(a, Matrix::identity(a.rows())); }

// Solves a general square system; throws SingularSystem when `a` is
// numerically rank deficient.
inline Matrix solve_general(const Matrix& a, const Matrix& b) {
  if (a.rows() != a.cols() || a.rows() != b.rows()) {
    throw ShapeMismatch("solve_general " + a.shape_str() + " vs " + b.shape_str());
  }
  Eigen::FullPivLU<EigenRowMajor> lu(a.eigen());
  lu.setThreshold(1e-12);
  if (!lu.isInvertible()) throw SingularSystem("system matrix is singular");
  return Matrix::from_eigen(EigenRowMajor(lu.solve(b.eigen())));
}

// Moore-Penrose pseudoinverse through an SVD with the usual
// max(m, n) * eps * sigma_max cutoff.
inline Matrix pinv(const Matrix& a) {
  if (a.empty()) throw ShapeMismatch("pinv of empty matrix");
  Eigen::JacobiSVD<EigenRowMajor> svd(a.eigen(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double cutoff = static_cast<double>(std::max(a.rows(), a.cols())) *
                        std::numeric_limits<double>::epsilon() * (s.size() ? s(0) : 0.0);
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > cutoff) inv(i) = 1.0 / s(i);
  }
  EigenRowMajor p = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
  return Matrix::from_eigen(p);
}

// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the signs
// of R's diagonal folded into Q.
inline Matrix random_orthogonal(std::size_t n, Rng& rng) {
  if (n == 0) throw InvalidSpec("random_orthogonal requires n >= 1");
  const Matrix g = rng.normal_matrix(n, n);
  Eigen::HouseholderQR<EigenRowMajor> qr(g.eigen());
  EigenRowMajor q = qr.householderQ();
  const EigenRowMajor r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(n); ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  return Matrix::from_eigen(q);
}

// Power-iteration estimate of the largest eigenvalue of a symmetric PSD
// matrix. The Rayleigh quotient of a unit vector never exceeds the true value.
inline double operator_norm(const Matrix& a, int iters = 30) {
  if (a.rows() != a.cols()) throw ShapeMismatch("operator_norm needs a square matrix");
  const std::size_t n = a.rows();
  if (n == 0 || max_abs(a) == 0.0) return 0.0;
  Matrix v(n, 1);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i % 7);
  double estimate = 0.0;
  for (int it = 0; it < std::max(iters, 1); ++it) {
    const double nv = frobenius_norm(v);
    if (nv == 0.0) break;
    v *= 1.0 / nv;
    Matrix av = matmul(a, v);
    estimate = dot(v.data(), av.data());
    v = std::move(av);
  }
  return std::max(estimate, 0.0);
}

// Regularized least-squares regressor V K^T (K K^T + I / lambda)^{-1}, with
// keys and values stored as columns.
inline Matrix ridge_regressor(const Matrix& k, const Matrix& v, double lambda) {
  if (!(lambda > 0.0)) throw NonPositiveLambda("ridge_regressor requires lambda > 0");
  if (k.cols() != v.cols()) {
    throw ShapeMismatch("ridge_regressor keys " + k.shape_str() + " values " + v.shape_str());
  }
  Matrix gram = matmul_nt(k, k);
  for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) += 1.0 / lambda;
  // (V K^T X^{-1})^T = X^{-1} K V^T since X is symmetric.
  return transpose(solve_spd(gram, matmul_nt(k, v)));
}

// Rescales eigenvalue magnitudes of a general real matrix affinely onto
// [lo, hi], keeping eigenvectors and eigenvalue phases. Conjugate pairs share
// a magnitude, so the result stays real.
inline Matrix rescale_spectrum(const Matrix& w, double lo, double hi) {
  Eigen::EigenSolver<EigenRowMajor> es(w.eigen());
  if (es.info() != Eigen::Success) throw SingularSystem("eigendecomposition failed");
  const Eigen::VectorXcd mu = es.eigenvalues();
  const Eigen::MatrixXcd vecs = es.eigenvectors();
  double mn = std::numeric_limits<double>::infinity();
  double mx = 0.0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    mn = std::min(mn, std::abs(mu(i)));
    mx = std::max(mx, std::abs(mu(i)));
  }
  Eigen::VectorXcd scaled(mu.size());
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    const double mag = std::abs(mu(i));
    const double target = (mx - mn) > 1e-12 ? lo + (hi - lo) * (mag - mn) / (mx - mn) : hi;
    scaled(i) = mag > 0.0 ? mu(i) * (target / mag) : std::complex<double>(target, 0.0);
  }
  const Eigen::MatrixXcd rebuilt = vecs * scaled.asDiagonal() * vecs.inverse();
  EigenRowMajor real = rebuilt.real();
  return Matrix::from_eigen(real);
}

inline std::vector<std::complex<double>> eigenvalues(const Matrix& w) {
  Eigen::EigenSolver<EigenRowMajor> es(w.eigen(), false);
  std::vector<std::complex<double>> out;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) out.push_back(es.eigenvalues()(i));
  return out;
}

// Logarithmic grid lo..hi with n points (inclusive).
inline std::vector<double> log_grid(double lo, double hi, int n) {
  std::vector<double> g;
  for (int i = 0; i < n; ++i) {
    const double f = n > 1 ? static_cast<double>(i) / (n - 1) : 0.0;
    g.push_back(std::exp(std::log(lo) + f * (std::log(hi) - std::log(lo))));
  }
  return g;
}

}  // namespace mesa
