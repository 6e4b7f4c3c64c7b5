#include "doctest.h"

#include "mvmnp/covariance.hpp"
#include "mvmnp/gradient.hpp"
#include "mvmnp/model.hpp"
#include "mvmnp/parallel.hpp"
#include "mvmnp/prior.hpp"
#include "mvmnp/rng.hpp"
#include "mvmnp/spherical.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

using namespace mvmnp;

namespace {

AnglePrior synthetic_prior(const ChoiceStructure& sc) {
  AnglePrior prior;
  prior.mu.resize(sc.K);
  prior.tau.resize(sc.K);
  prior.eta.resize(sc.K);
  int t = 0;
  const double mus[] = {0.2, -0.4, 0.1, 0.5, -0.2, 0.3};
  const double taus[] = {0.9, 1.2, 0.8, 1.1, 1.0, 0.7};
  const double etas[] = {0.8, 1.3, 1.0, 0.6, 1.5, 0.9};
  for (int k = 0; k < sc.K; ++k) {
    const int na = sc.angles_k(k);
    prior.mu[k].resize(na);
    prior.tau[k].resize(na);
    prior.eta[k].resize(na);
    for (int l = 0; l < na; ++l, ++t) {
      prior.mu[k][l] = mus[t % 6];
      prior.tau[k][l] = taus[t % 6];
      prior.eta[k][l] = etas[t % 6];
    }
  }
  return prior;
}

Dataset random_dataset(const ChoiceStructure& sc, int N, Rng& rng) {
  Dataset data;
  data.N = N;
  data.y.resize(N, sc.K);
  data.x_d.resize(N, sc.n_d);
  data.x_a.resize(sc.K);
  for (int k = 0; k < sc.K; ++k) data.x_a[k].resize(N, (sc.J[k] + 1) * sc.n_a);
  for (int i = 0; i < N; ++i) {
    for (int k = 0; k < sc.K; ++k)
      data.y(i, k) = std::min(sc.J[k], static_cast<int>(rng.uniform() * (sc.J[k] + 1)));
    for (int d = 0; d < sc.n_d; ++d) data.x_d(i, d) = rng.normal();
    for (int k = 0; k < sc.K; ++k)
      for (int c = 0; c < (sc.J[k] + 1) * sc.n_a; ++c) data.x_a[k](i, c) = rng.normal();
  }
  return data;
}

Vector random_theta(const ChoiceStructure& sc, Rng& rng) {
  Vector theta(sc.theta_dim);
  for (int j = 0; j < sc.r; ++j) theta[j] = 0.3 * rng.normal();
  for (int j = sc.r; j < sc.theta_dim; ++j) theta[j] = 0.5 * rng.normal();
  return theta;
}

Matrix random_latents(const ChoiceStructure& sc, int N, Rng& rng) {
  Matrix z(sc.J_total, N);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < sc.J_total; ++j) z(j, i) = rng.normal();
  return z;
}

std::vector<int> iota_subsample(int N) {
  std::vector<int> all(N);
  std::iota(all.begin(), all.end(), 0);
  return all;
}

// Central finite differences of a scalar function of theta.
template <typename F>
Vector fd_gradient(const F& f, const Vector& theta, double h) {
  Vector g(theta.size());
  Vector t = theta;
  for (int j = 0; j < theta.size(); ++j) {
    const double orig = t[j];
    t[j] = orig + h;
    const double up = f(t);
    t[j] = orig - h;
    const double down = f(t);
    t[j] = orig;
    g[j] = (up - down) / (2.0 * h);
  }
  return g;
}

double max_rel_err(const Vector& a, const Vector& b) {
  double worst = 0.0;
  for (int j = 0; j < a.size(); ++j) {
    const double denom = std::max({1.0, std::abs(a[j]), std::abs(b[j])});
    worst = std::max(worst, std::abs(a[j] - b[j]) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("analytic score matches central finite differences across structures") {
  // The instance sweep covers one and two choices, block sizes 1..3, and
  // factor counts 0..2, with and without shared/alternative covariates.
  struct Instance {
    std::vector<int> J;
    int n_d, n_a, p;
  };
  std::vector<Instance> instances;
  int pick = 0;
  for (int J1 = 1; J1 <= 3; ++J1)
    for (int p = 0; p <= 2; ++p) instances.push_back({{J1}, (pick++) % 2, pick % 3, p});
  const std::vector<std::vector<int>> pairs = {{1, 1}, {2, 1}, {1, 3}, {2, 2}, {3, 2},
                                               {2, 3}, {3, 3}, {3, 1}, {1, 2}};
  for (std::size_t t = 0; t < pairs.size(); ++t)
    instances.push_back(
        {pairs[t], static_cast<int>(t) % 2, static_cast<int>(t + 1) % 3, static_cast<int>(t) % 3});
  instances.push_back({{3}, 2, 2, 2});
  instances.push_back({{2, 2}, 2, 0, 1});
  instances.push_back({{3, 3}, 0, 2, 2});
  instances.push_back({{1, 1}, 0, 0, 0});
  REQUIRE(instances.size() >= 20);

  const int N = 5;
  const double h = 1e-5;
  int checked_coords = 0;
  for (std::size_t t = 0; t < instances.size(); ++t) {
    const auto& ins = instances[t];
    const ChoiceStructure sc = ChoiceStructure::make(ins.J, ins.n_d, ins.n_a, ins.p);
    Rng rng(1000 + static_cast<std::uint64_t>(t), 0);
    const Dataset data = random_dataset(sc, N, rng);
    const DesignMatrix design = build_design(sc, data);
    const Matrix z = random_latents(sc, N, rng);
    const AnglePrior prior = synthetic_prior(sc);
    const Vector theta = random_theta(sc, rng);
    const std::vector<int> all = iota_subsample(N);

    const Vector analytic = grad_log_g(sc, design, theta, z, all, N, prior);
    const Vector fd = fd_gradient(
        [&](const Vector& th) { return log_g(sc, design, th, z, all, N, prior); }, theta, h);
    CAPTURE(t);
    CHECK(max_rel_err(analytic, fd) < 1e-5);
    checked_coords += sc.theta_dim;
  }
  CHECK(checked_coords > 100);
}

TEST_CASE("subsampled score averaged over every subset equals the full-data score") {
  const ChoiceStructure sc = ChoiceStructure::make({2, 1}, 1, 1);
  const int N = 6, M = 2;
  Rng rng(77, 0);
  const Dataset data = random_dataset(sc, N, rng);
  const DesignMatrix design = build_design(sc, data);
  const Matrix z = random_latents(sc, N, rng);
  const AnglePrior prior = synthetic_prior(sc);
  const Vector theta = random_theta(sc, rng);

  const Vector full = grad_log_g(sc, design, theta, z, iota_subsample(N), N, prior);
  const double full_val = log_g(sc, design, theta, z, iota_subsample(N), N, prior);

  Vector grad_sum = Vector::Zero(sc.theta_dim);
  double val_sum = 0.0;
  int count = 0;
  for (int a = 0; a < N; ++a)
    for (int b = a + 1; b < N; ++b) {
      const std::vector<int> sub = {a, b};
      grad_sum += grad_log_g(sc, design, theta, z, sub, N, prior);
      val_sum += log_g(sc, design, theta, z, sub, N, prior);
      ++count;
    }
  REQUIRE(count == 15);
  const Vector mean = grad_sum / count;
  CHECK((mean - full).cwiseAbs().maxCoeff() < 1e-10 * std::max(1.0, full.cwiseAbs().maxCoeff()));
  CHECK(val_sum / count == doctest::Approx(full_val).epsilon(1e-12));

  // The identity variant obeys the same exact average.
  const Vector beta = theta.head(sc.r);
  const Vector full_id = grad_log_g_identity(sc, design, beta, z, iota_subsample(N), N);
  Vector id_sum = Vector::Zero(sc.r);
  for (int a = 0; a < N; ++a)
    for (int b = a + 1; b < N; ++b)
      id_sum += grad_log_g_identity(sc, design, beta, z, {a, b}, N);
  CHECK((id_sum / count - full_id).cwiseAbs().maxCoeff() <
        1e-10 * std::max(1.0, full_id.cwiseAbs().maxCoeff()));
}

TEST_CASE("random-subset score estimates are unbiased within Monte Carlo error") {
  const ChoiceStructure sc = ChoiceStructure::make({2, 1}, 1, 1);
  const int N = 200, M = 20, reps = 10000;
  Rng rng(78, 0);
  const Dataset data = random_dataset(sc, N, rng);
  const DesignMatrix design = build_design(sc, data);
  const Matrix z = random_latents(sc, N, rng);
  const AnglePrior prior = synthetic_prior(sc);
  const Vector theta = random_theta(sc, rng);

  const Vector full = grad_log_g(sc, design, theta, z, iota_subsample(N), N, prior);

  std::vector<int> order(N);
  std::iota(order.begin(), order.end(), 0);
  Vector sum = Vector::Zero(sc.theta_dim);
  Vector sumsq = Vector::Zero(sc.theta_dim);
  for (int rep = 0; rep < reps; ++rep) {
    for (int j = 0; j < M; ++j) {
      const int pick = j + static_cast<int>(rng.uniform() * (N - j));
      std::swap(order[j], order[std::min(pick, N - 1)]);
    }
    const std::vector<int> sub(order.begin(), order.begin() + M);
    const Vector g = grad_log_g(sc, design, theta, z, sub, N, prior);
    sum += g;
    sumsq += g.cwiseProduct(g);
  }
  const Vector mean = sum / reps;
  for (int j = 0; j < sc.theta_dim; ++j) {
    const double var = (sumsq[j] / reps - mean[j] * mean[j]) / (reps - 1);
    const double se = std::sqrt(std::max(var, 0.0));
    CAPTURE(j);
    CHECK(std::abs(mean[j] - full[j]) <= 4.0 * se + 1e-9);
  }
}

TEST_CASE("identity-covariance score: finite differences and agreement at Sigma = I") {
  const ChoiceStructure sc = ChoiceStructure::make({2, 2}, 1, 1);
  const int N = 40;
  Rng rng(91, 0);
  const Dataset data = random_dataset(sc, N, rng);
  const DesignMatrix design = build_design(sc, data);
  const Matrix z = random_latents(sc, N, rng);
  Vector beta(sc.r);
  for (int j = 0; j < sc.r; ++j) beta[j] = 0.4 * rng.normal();
  const std::vector<int> all = iota_subsample(N);
  const std::vector<int> sub = {3, 17, 29, 8, 31};

  // Finite differences on a strict subsample (exercises the N/M scaling).
  const Vector analytic = grad_log_g_identity(sc, design, beta, z, sub, N);
  const Vector fd = fd_gradient(
      [&](const Vector& b) { return log_g_identity(sc, design, b, z, sub, N); }, beta, 1e-5);
  CHECK(max_rel_err(analytic, fd) < 1e-6);

  // Angles that put the chart exactly at Sigma = I: the loading block is
  // zeroed by right angles (interior, since those coordinates allow (0, pi)),
  // and the scale block walks the equal-coordinate recursion
  // cos kappa = 1/sqrt(J - j).
  const AnglePrior prior = synthetic_prior(sc);
  Vector theta(sc.theta_dim);
  theta.head(sc.r) = beta;
  for (int k = 0; k < sc.K; ++k) {
    const int Jk = sc.J[k];
    const int nk = sc.n_k[k];
    Vector kappa(nk - 1);
    for (int l = 0; l < nk - 1 - (Jk - 1); ++l) kappa[l] = 0.5 * std::numbers::pi;
    for (int j = 0; j + 1 < Jk; ++j)
      kappa[nk - Jk + j] = std::acos(1.0 / std::sqrt(static_cast<double>(Jk - j)));
    theta.segment(sc.r + sc.angle_offset[k], nk - 1) = angles_to_real(kappa, Jk);
  }
  const FactorCovariance fc = assemble_covariance(sc, theta.tail(sc.n - sc.K));
  REQUIRE((fc.sigma - Matrix::Identity(sc.J_total, sc.J_total)).cwiseAbs().maxCoeff() < 1e-12);

  const Vector general = grad_log_g(sc, design, theta, z, all, N, prior);
  const Vector identity = grad_log_g_identity(sc, design, beta, z, all, N);
  CHECK((general.head(sc.r) - identity).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("score reductions are identical across thread counts") {
  const ChoiceStructure sc = ChoiceStructure::make({2, 1}, 1, 1);
  const int N = 600;
  Rng rng(55, 0);
  const Dataset data = random_dataset(sc, N, rng);
  const DesignMatrix design = build_design(sc, data);
  const Matrix z = random_latents(sc, N, rng);
  const AnglePrior prior = synthetic_prior(sc);
  const Vector theta = random_theta(sc, rng);
  std::vector<int> sub(300);
  std::iota(sub.begin(), sub.end(), 100);

  const Vector serial = grad_log_g(sc, design, theta, z, sub, N, prior);
  const Vector serial_id = grad_log_g_identity(sc, design, theta.head(sc.r), z, sub, N);
  WorkerPool pool(3);
  const Vector pooled = grad_log_g(sc, design, theta, z, sub, N, prior, &pool);
  const Vector pooled_id = grad_log_g_identity(sc, design, theta.head(sc.r), z, sub, N, &pool);
  CHECK((serial - pooled).cwiseAbs().maxCoeff() == 0.0);
  CHECK((serial_id - pooled_id).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("score evaluation rejects malformed inputs") {
  const ChoiceStructure sc = ChoiceStructure::make({2}, 0, 1);
  const int N = 4;
  Rng rng(12, 0);
  const Dataset data = random_dataset(sc, N, rng);
  const DesignMatrix design = build_design(sc, data);
  const Matrix z = random_latents(sc, N, rng);
  const AnglePrior prior = synthetic_prior(sc);
  const Vector theta = random_theta(sc, rng);

  CHECK_THROWS_AS(log_g(sc, design, theta, z, {}, N, prior), DomainError);
  CHECK_THROWS_AS(grad_log_g(sc, design, theta, z, {0, 1, 2, 3}, 2, prior), DomainError);
  CHECK_THROWS_AS(log_g(sc, design, theta, z, {0, 4}, N, prior), DimensionError);
  CHECK_THROWS_AS(log_g(sc, design, theta, z, {-1}, N, prior), DimensionError);
  CHECK_THROWS_AS(log_g(sc, design, Vector::Zero(sc.theta_dim + 1), z, {0}, N, prior),
                  DimensionError);
  const Matrix bad_z = Matrix::Zero(sc.J_total + 1, N);
  CHECK_THROWS_AS(grad_log_g(sc, design, theta, bad_z, {0}, N, prior), DimensionError);
  CHECK_THROWS_AS(grad_log_g_identity(sc, design, Vector::Zero(sc.r + 2), z, {0}, N),
                  DimensionError);
}
