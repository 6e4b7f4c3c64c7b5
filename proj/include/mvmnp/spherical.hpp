#pragma once

// Spherical parameterization of one choice's covariance block. The vector
// psi_k = (vec(B_k), d_k) of factor loadings and idiosyncratic scales lives
// on the radius-sqrt(J_k) sphere, which pins trace(Sigma_kk) = J_k. Angles
// kappa chart the sphere; a probit map sends each angle to an unconstrained
// real coordinate xi.
//
// With n = dim(psi) and prefix products over sines,
//   psi_1 = sqrt(J) cos k_1
//   psi_l = sqrt(J) cos k_l * prod_{s<l} sin k_s,   1 < l < n
//   psi_n = sqrt(J) prod_{s<n} sin k_s.
// The first n - J angles range over [0, pi); the last J - 1 range over
// [0, pi/2), which keeps the trailing d block positive.

#include "mvmnp/normal.hpp"
#include "mvmnp/types.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace mvmnp {

// Upper bound of angle l (0-based) for a psi vector of length n_k.
inline double angle_upper_bound(int l, int n_k, int J_k) {
  return (l < n_k - J_k) ? std::numbers::pi : 0.5 * std::numbers::pi;
}

template <typename Derived>
DenseVector<typename Derived::Scalar> spherical_forward(const Eigen::MatrixBase<Derived>& kappa,
                                                        int J_k) {
  using Scalar = typename Derived::Scalar;
  const int n_k = static_cast<int>(kappa.size()) + 1;
  if (J_k < 1 || n_k < J_k)
    throw DimensionError("spherical_forward: angle count inconsistent with J_k");
  for (int l = 0; l < n_k - 1; ++l) {
    const double up = angle_upper_bound(l, n_k, J_k);
    const double v = static_cast<double>(kappa[l]);
    if (!(v >= 0.0) || !(v < up))
      throw DomainError("spherical_forward: angle " + std::to_string(l) + " = " +
                        std::to_string(v) + " outside [0, " + std::to_string(up) + ")");
  }
  const Scalar radius = std::sqrt(static_cast<Scalar>(J_k));
  DenseVector<Scalar> psi(n_k);
  Scalar sin_prefix = Scalar(1);
  for (int l = 0; l < n_k - 1; ++l) {
    using std::cos;
    using std::sin;
    psi[l] = radius * cos(kappa[l]) * sin_prefix;
    sin_prefix *= sin(kappa[l]);
  }
  psi[n_k - 1] = radius * sin_prefix;
  return psi;
}

// Inverse chart without domain validation; used after the checks below and
// directly testable on inputs the constrained pipeline cannot produce.
template <typename Derived>
DenseVector<typename Derived::Scalar> spherical_inverse_raw(
    const Eigen::MatrixBase<Derived>& psi) {
  using Scalar = typename Derived::Scalar;
  const int n_k = static_cast<int>(psi.size());
  DenseVector<Scalar> kappa(n_k - 1);
  // tail[l] = sum_{j >= l} psi_j^2
  DenseVector<Scalar> tail(n_k + 1);
  tail[n_k] = Scalar(0);
  for (int l = n_k - 1; l >= 0; --l) tail[l] = tail[l + 1] + psi[l] * psi[l];
  for (int l = 0; l < n_k - 1; ++l) {
    using std::acos;
    using std::sqrt;
    if (tail[l + 1] == Scalar(0)) {
      // Exhausted tail: the angle is determined only up to the sign of psi_l.
      kappa[l] = (psi[l] < Scalar(0)) ? Scalar(std::numbers::pi) : Scalar(0);
      continue;
    }
    Scalar c = psi[l] / sqrt(tail[l]);
    if (c > Scalar(1)) c = Scalar(1);
    if (c < Scalar(-1)) c = Scalar(-1);
    Scalar a = acos(c);
    if (l == n_k - 2 && psi[n_k - 1] < Scalar(0)) a = Scalar(2 * std::numbers::pi) - a;
    kappa[l] = a;
  }
  return kappa;
}

template <typename Derived>
DenseVector<typename Derived::Scalar> spherical_inverse(const Eigen::MatrixBase<Derived>& psi,
                                                        int J_k) {
  const int n_k = static_cast<int>(psi.size());
  if (J_k < 1 || n_k < J_k) throw DimensionError("spherical_inverse: psi shorter than its d block");
  const double norm2 = static_cast<double>(psi.squaredNorm());
  if (std::abs(norm2 - J_k) > 1e-8 * std::max(1.0, static_cast<double>(J_k)))
    throw DomainError("spherical_inverse: squared norm " + std::to_string(norm2) +
                      " violates the trace restriction " + std::to_string(J_k));
  for (int j = n_k - J_k; j < n_k; ++j) {
    if (!(psi[j] > 0))
      throw DomainError("spherical_inverse: d entry at position " + std::to_string(j) +
                        " must be strictly positive");
  }
  return spherical_inverse_raw(psi);
}

// d psi / d kappa, n_k x (n_k - 1). Row l, column j (0-based):
//   j >  l                    : 0
//   j == l, l <= n_k - 2      : -sqrt(J) prod_{s<=l} sin k_s
//   j <  l, l <  n_k - 1      : sqrt(J) cos k_j cos k_l prod_{s<l, s!=j} sin k_s
//   j <  l, l == n_k - 1      : sqrt(J) cos k_j prod_{s<l, s!=j} sin k_s
template <typename Derived>
DenseMatrix<typename Derived::Scalar> psi_jacobian(const Eigen::MatrixBase<Derived>& kappa,
                                                   int J_k) {
  using Scalar = typename Derived::Scalar;
  using std::cos;
  using std::sin;
  const int n_k = static_cast<int>(kappa.size()) + 1;
  const Scalar radius = std::sqrt(static_cast<Scalar>(J_k));
  DenseVector<Scalar> sin_prefix(n_k);  // sin_prefix[j] = prod_{s <= j} sin k_s
  {
    Scalar acc = Scalar(1);
    for (int j = 0; j < n_k - 1; ++j) {
      acc *= sin(kappa[j]);
      sin_prefix[j] = acc;
    }
  }
  DenseMatrix<Scalar> jac = DenseMatrix<Scalar>::Zero(n_k, n_k - 1);
  for (int j = 0; j < n_k - 1; ++j) {
    jac(j, j) = -radius * sin_prefix[j];
    const Scalar head = (j > 0) ? sin_prefix[j - 1] : Scalar(1);
    const Scalar common = radius * cos(kappa[j]) * head;
    Scalar running = Scalar(1);  // prod_{s in (j, l)} sin k_s
    for (int l = j + 1; l < n_k; ++l) {
      jac(l, j) = (l < n_k - 1) ? common * cos(kappa[l]) * running : common * running;
      if (l < n_k - 1) running *= sin(kappa[l]);
    }
  }
  return jac;
}

// Probit chart between angles and unconstrained coordinates.
inline Vector angles_to_real(const Eigen::Ref<const Vector>& kappa, int J_k) {
  const int n_k = static_cast<int>(kappa.size()) + 1;
  Vector xi(n_k - 1);
  for (int l = 0; l < n_k - 1; ++l) {
    const double up = angle_upper_bound(l, n_k, J_k);
    if (!(kappa[l] > 0.0) || !(kappa[l] < up))
      throw DomainError("angles_to_real: angle " + std::to_string(l) +
                        " on the chart boundary has no finite coordinate");
    xi[l] = norm_quantile(kappa[l] / up);
  }
  return xi;
}

inline Vector real_to_angles(const Eigen::Ref<const Vector>& xi, int J_k) {
  const int n_k = static_cast<int>(xi.size()) + 1;
  Vector kappa(n_k - 1);
  for (int l = 0; l < n_k - 1; ++l)
    kappa[l] = angle_upper_bound(l, n_k, J_k) * norm_cdf(xi[l]);
  return kappa;
}

// Diagonal of d kappa / d xi.
inline Vector dkappa_dxi(const Eigen::Ref<const Vector>& xi, int J_k) {
  const int n_k = static_cast<int>(xi.size()) + 1;
  Vector d(n_k - 1);
  for (int l = 0; l < n_k - 1; ++l) d[l] = angle_upper_bound(l, n_k, J_k) * norm_pdf(xi[l]);
  return d;
}

}  // namespace mvmnp
