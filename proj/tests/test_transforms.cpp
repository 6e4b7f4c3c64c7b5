#include <doctest.h>

#include "mvmnp/covariance.hpp"
#include "mvmnp/rng.hpp"
#include "mvmnp/spherical.hpp"
#include "mvmnp/yeo_johnson.hpp"

#include <cmath>
#include <numbers>

using namespace mvmnp;
using std::numbers::pi;

namespace {

// Random interior angle vector for a psi of length n_k.
Vector random_angles(Rng& rng, int n_k, int J_k) {
  Vector kappa(n_k - 1);
  for (int l = 0; l < n_k - 1; ++l)
    kappa[l] = angle_upper_bound(l, n_k, J_k) * rng.uniform(0.05, 0.95);
  return kappa;
}

}  // namespace

TEST_CASE("spherical forward: two-coordinate example and norm preservation") {
  Vector kappa(1);
  kappa << pi / 3.0;
  const Vector psi = spherical_forward(kappa, 1);
  CHECK(psi[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(psi[1] == doctest::Approx(std::sqrt(3.0) / 2.0).epsilon(1e-14));

  Rng rng(31, 0);
  for (int rep = 0; rep < 200; ++rep) {
    const int J_k = 1 + static_cast<int>(rng.uniform() * 3);
    const int p = static_cast<int>(rng.uniform() * 3);
    const int n_k = J_k * (p + 1);
    if (n_k < 2) continue;
    const Vector k = random_angles(rng, n_k, J_k);
    const Vector ps = spherical_forward(k, J_k);
    CHECK(std::abs(ps.squaredNorm() - J_k) < 1e-10);
    // d block positive for interior angles
    for (int j = n_k - J_k; j < n_k; ++j) CHECK(ps[j] > 0.0);
  }
}

TEST_CASE("spherical forward: bound violations are rejected") {
  Vector kappa(3);
  kappa << 0.3, 0.4, 0.2;  // n_k = 4, J_k = 2: angles 0,1 wide, angle 2 in [0, pi/2)
  CHECK_NOTHROW(spherical_forward(kappa, 2));
  kappa[2] = 0.5 * pi;  // at the d-block bound
  CHECK_THROWS_AS(spherical_forward(kappa, 2), DomainError);
  kappa[2] = 0.2;
  kappa[0] = -0.001;
  CHECK_THROWS_AS(spherical_forward(kappa, 2), DomainError);
  kappa[0] = pi;  // at the wide bound
  CHECK_THROWS_AS(spherical_forward(kappa, 2), DomainError);
}

TEST_CASE("spherical inverse: round-trips, validation, and conventions") {
  Rng rng(32, 0);
  for (int rep = 0; rep < 300; ++rep) {
    const int J_k = 1 + static_cast<int>(rng.uniform() * 3);
    const int p = static_cast<int>(rng.uniform() * 3);
    const int n_k = J_k * (p + 1);
    if (n_k < 2) continue;
    const Vector k = random_angles(rng, n_k, J_k);
    const Vector ps = spherical_forward(k, J_k);
    const Vector k2 = spherical_inverse(ps, J_k);
    const Vector ps2 = spherical_forward(k2, J_k);
    CHECK((k2 - k).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((ps2 - ps).cwiseAbs().maxCoeff() < 1e-10);
  }

  // Norm violation and nonpositive d entries are domain errors.
  Vector bad(2);
  bad << 1.0, 1.0;  // squared norm 2 for J_k = 1
  CHECK_THROWS_AS(spherical_inverse(bad, 1), DomainError);
  Vector negd(2);
  negd << std::sqrt(2.0), 0.0;  // J_k = 1, p = 1: d entry is the last coordinate
  CHECK_THROWS_AS(spherical_inverse(negd, 1), DomainError);

  // Zero-tail conventions on the unvalidated chart.
  Vector zt(3);
  zt << 2.0, 0.0, 0.0;
  Vector kz = spherical_inverse_raw(zt);
  CHECK(kz[0] == doctest::Approx(0.0));
  CHECK(kz[1] == doctest::Approx(0.0));
  zt << -2.0, 0.0, 0.0;
  kz = spherical_inverse_raw(zt);
  CHECK(kz[0] == doctest::Approx(pi));

  // Final-coordinate sign branch: unreachable through the validated chart,
  // exercised directly.
  Vector wrap(2);
  wrap << 1.0, -1.0;
  kz = spherical_inverse_raw(wrap);
  CHECK(kz[0] == doctest::Approx(2.0 * pi - std::acos(1.0 / std::sqrt(2.0))).epsilon(1e-14));
}

TEST_CASE("psi jacobian matches central differences") {
  Rng rng(33, 0);
  for (int rep = 0; rep < 40; ++rep) {
    const int J_k = 1 + static_cast<int>(rng.uniform() * 3);
    const int p = static_cast<int>(rng.uniform() * 3);
    const int n_k = J_k * (p + 1);
    if (n_k < 2) continue;
    const Vector k = random_angles(rng, n_k, J_k);
    const Matrix jac = psi_jacobian(k, J_k);
    const double h = 1e-6;
    for (int j = 0; j < n_k - 1; ++j) {
      Vector kp = k, km = k;
      kp[j] += h;
      km[j] -= h;
      const Vector fd = (spherical_forward(kp, J_k) - spherical_forward(km, J_k)) / (2 * h);
      for (int l = 0; l < n_k; ++l) {
        CHECK(std::abs(jac(l, j) - fd[l]) < 1e-7 * std::max(1.0, std::abs(fd[l])));
      }
    }
    // Columns are tangent to the sphere: psi^T (dpsi/dkappa_j) = 0.
    const Vector ps = spherical_forward(k, J_k);
    for (int j = 0; j < n_k - 1; ++j) CHECK(std::abs(ps.dot(jac.col(j))) < 1e-9);
  }
}

TEST_CASE("angle chart: probit map and its round-trip") {
  // xi = 0 maps to the chart midpoint.
  Vector xi0 = Vector::Zero(3);  // n_k = 4, J_k = 2
  Vector mid = real_to_angles(xi0, 2);
  CHECK(mid[0] == doctest::Approx(pi / 2).epsilon(1e-14));
  CHECK(mid[1] == doctest::Approx(pi / 2).epsilon(1e-14));
  CHECK(mid[2] == doctest::Approx(pi / 4).epsilon(1e-14));

  // Positive coordinates saturate the cdf ratio toward the upper bound, so
  // the attainable round-trip error grows like ulp(1)/phi(xi); 1e-12 holds
  // on [-4, 4] and 1e-10 out to [-5, 5].
  Rng rng(34, 0);
  for (int rep = 0; rep < 1000; ++rep) {
    const int J_k = 1 + static_cast<int>(rng.uniform() * 3);
    const int p = static_cast<int>(rng.uniform() * 3);
    const int n_k = J_k * (p + 1);
    if (n_k < 2) continue;
    const bool wide = (rep % 4 == 0);
    const double span = wide ? 5.0 : 3.5;
    Vector xi(n_k - 1);
    for (int l = 0; l < n_k - 1; ++l) xi[l] = rng.uniform(-span, span);
    const Vector kappa = real_to_angles(xi, J_k);
    for (int l = 0; l < n_k - 1; ++l) {
      CHECK(kappa[l] > 0.0);
      CHECK(kappa[l] < angle_upper_bound(l, n_k, J_k));
    }
    const Vector xi2 = angles_to_real(kappa, J_k);
    CHECK((xi2 - xi).cwiseAbs().maxCoeff() < (wide ? 1e-10 : 1e-12));
  }

  // Chart boundary has no finite coordinate.
  Vector boundary(1);
  boundary << 0.0;
  CHECK_THROWS_AS(angles_to_real(boundary, 1), DomainError);

  // d kappa / d xi is the chart-scaled normal density. With J_k = 2 and
  // p = 1 (n_k = 4), angles 0 and 1 are wide and angle 2 sits in the d block.
  Vector xi3(3);
  xi3 << 0.3, -1.1, 0.8;
  const Vector dk = dkappa_dxi(xi3, 2);
  CHECK(dk[0] == doctest::Approx(pi * norm_pdf(0.3)).epsilon(1e-14));
  CHECK(dk[1] == doctest::Approx(pi * norm_pdf(-1.1)).epsilon(1e-14));
  CHECK(dk[2] == doctest::Approx(0.5 * pi * norm_pdf(0.8)).epsilon(1e-14));
  // With one utility per choice the trailing psi coordinate is a pure sine
  // product, so every angle is wide.
  Vector xi1(2);
  xi1 << 0.0, 0.0;
  const Vector mid1 = real_to_angles(xi1, 1);
  CHECK(mid1[0] == doctest::Approx(pi / 2).epsilon(1e-14));
  CHECK(mid1[1] == doctest::Approx(pi / 2).epsilon(1e-14));
}

TEST_CASE("covariance assembly: identity point, traces, and cross blocks") {
  // K=1, J=2, p=1: psi = (0, 0, 1, 1) gives B = 0 and Sigma = I.
  auto sc = ChoiceStructure::make({2}, 0, 0, 1);
  Vector psi(4);
  psi << 0.0, 0.0, 1.0, 1.0;
  const auto fc = covariance_from_psi(sc, psi);
  CHECK((fc.sigma - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(fc.B.cwiseAbs().maxCoeff() == doctest::Approx(0.0));

  // The same point through the unconstrained chart.
  const Vector kappa0 = spherical_inverse(psi, 2);
  const Vector xi0 = angles_to_real(kappa0, 2);
  const auto fc2 = assemble_covariance(sc, xi0);
  CHECK((fc2.sigma - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);

  // Diagonal block traces equal J_k for random unconstrained points, and
  // cross blocks are pure loading products.
  Rng rng(35, 0);
  auto sc2 = ChoiceStructure::make({3, 2}, 1, 1, 2);
  for (int rep = 0; rep < 200; ++rep) {
    Vector xi(sc2.n_angles);
    for (int l = 0; l < sc2.n_angles; ++l) xi[l] = rng.uniform(-2.5, 2.5);
    const auto f = assemble_covariance(sc2, xi);
    for (int k = 0; k < sc2.K; ++k) {
      const double tr =
          f.sigma.block(sc2.util_offset[k], sc2.util_offset[k], sc2.J[k], sc2.J[k]).trace();
      CHECK(std::abs(tr - sc2.J[k]) < 1e-10);
    }
    const Matrix cross = f.sigma.block(0, 3, 3, 2);
    const Matrix bb = f.B.topRows(3) * f.B.bottomRows(2).transpose();
    CHECK((cross - bb).cwiseAbs().maxCoeff() < 1e-12);
    // d entries strictly positive
    CHECK(f.d.minCoeff() > 0.0);
  }
}

TEST_CASE("covariance normalization recovers the trace restriction") {
  auto sc = ChoiceStructure::make({2, 1}, 0, 0, 1);
  Rng rng(36, 0);
  Matrix a(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) a(i, j) = rng.normal();
  Matrix sigma = a * a.transpose() + 3.0 * Matrix::Identity(3, 3);
  const auto norm = normalize_covariance(sc, sigma);
  for (int k = 0; k < sc.K; ++k) {
    const double tr =
        norm.sigma.block(sc.util_offset[k], sc.util_offset[k], sc.J[k], sc.J[k]).trace();
    CHECK(tr == doctest::Approx(sc.J[k]).epsilon(1e-12));
    CHECK(norm.scale[k] > 0.0);
  }
  // Rescaling back recovers the input.
  Matrix back = norm.sigma;
  for (int k = 0; k < sc.K; ++k)
    for (int l = 0; l < sc.K; ++l)
      back.block(sc.util_offset[k], sc.util_offset[l], sc.J[k], sc.J[l]) *=
          norm.scale[k] * norm.scale[l];
  CHECK((back - sigma).cwiseAbs().maxCoeff() < 1e-12);

  const Matrix corr = implied_correlations(sigma);
  CHECK(corr.diagonal().isApprox(Vector::Ones(3)));
  CHECK(corr.cwiseAbs().maxCoeff() <= 1.0 + 1e-12);
}

TEST_CASE("yeo-johnson: identity at eta 1, limits, and derivative checks") {
  // eta = 1 is the identity.
  for (double x : {-2.0, -0.5, 0.0, 0.7, 3.0}) {
    const auto e = yeo_johnson(x, 1.0);
    CHECK(e.value == doctest::Approx(x).epsilon(1e-14));
    CHECK(e.d1 == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(std::abs(e.d2) < 1e-14);
  }
  // t(0) = 0 and t'(0) = 1 for any eta.
  for (double eta : {0.0, 0.3, 1.0, 1.7, 2.0}) {
    const auto e = yeo_johnson(0.0, eta);
    CHECK(e.value == doctest::Approx(0.0));
    CHECK(e.d1 == doctest::Approx(1.0).epsilon(1e-14));
  }
  // Limit branches agree with the neighboring parameterization.
  CHECK(yeo_johnson(1.5, 0.0).value == doctest::Approx(std::log1p(1.5)).epsilon(1e-14));
  CHECK(yeo_johnson(-1.5, 2.0).value == doctest::Approx(-std::log1p(1.5)).epsilon(1e-14));
  CHECK(yeo_johnson(1.5, 1e-12).value == doctest::Approx(std::log1p(1.5)).epsilon(1e-9));
  CHECK(yeo_johnson(-1.5, 2.0 - 1e-12).value == doctest::Approx(-std::log1p(1.5)).epsilon(1e-9));

  // First and second derivatives against central differences; t' > 0 and
  // t'' continuous at 0.
  const double h = 1e-6;
  const double h2 = 1e-4;  // second difference needs a coarser step for roundoff
  for (double eta : {0.1, 0.5, 1.0, 1.5, 1.9}) {
    for (double x = -3.0; x <= 3.0; x += 0.31) {
      const auto e = yeo_johnson(x, eta);
      const double fd1 =
          (yeo_johnson_value(x + h, eta) - yeo_johnson_value(x - h, eta)) / (2 * h);
      const double fd2 = (yeo_johnson_value(x + h2, eta) - 2 * e.value +
                          yeo_johnson_value(x - h2, eta)) /
                         (h2 * h2);
      CHECK(e.d1 > 0.0);
      CHECK(std::abs(e.d1 - fd1) < 1e-6 * std::max(1.0, std::abs(fd1)));
      CHECK(std::abs(e.d2 - fd2) < 1e-5 * std::max(1.0, std::abs(fd2)));
    }
    const auto left = yeo_johnson(-1e-12, eta);
    const auto right = yeo_johnson(1e-12, eta);
    CHECK(left.d2 == doctest::Approx(right.d2).epsilon(1e-6));
    CHECK(left.d2 == doctest::Approx(eta - 1.0).epsilon(1e-6));
  }
}
