#include "doctest.h"

#include "mvmnp/covariance.hpp"
#include "mvmnp/gradient.hpp"
#include "mvmnp/model.hpp"
#include "mvmnp/parallel.hpp"
#include "mvmnp/prior.hpp"
#include "mvmnp/rng.hpp"
#include "mvmnp/vb.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
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

VariationalParams example_lambda(int m, int s, Rng& rng) {
  VariationalParams lam = VariationalParams::zero(m, s);
  for (int j = 0; j < m; ++j) lam.mu[j] = 0.4 * rng.normal();
  for (int j = 0; j < lam.vech_c.size(); ++j) lam.vech_c[j] = 0.3 * rng.normal();
  for (int j = 0; j < m; ++j) lam.e[j] = 0.4 + 0.3 * rng.uniform();
  return lam;
}

}  // namespace

TEST_CASE("vech storage bookkeeping round-trips") {
  CHECK(vech_length(5, 0) == 0);
  CHECK(vech_length(5, 2) == 9);
  CHECK(vech_offset(5, 0) == 0);
  CHECK(vech_offset(5, 1) == 5);
  CHECK(vech_offset(5, 2) == 9);
  Rng rng(3, 0);
  const VariationalParams lam = example_lambda(7, 3, rng);
  CHECK(lam.m() == 7);
  CHECK(lam.s() == 3);
  const Vector packed = pack_lambda(lam);
  CHECK(packed.size() == 7 + vech_length(7, 3) + 7);
  const VariationalParams back = unpack_lambda(packed, 7, 3);
  CHECK((back.mu - lam.mu).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.vech_c - lam.vech_c).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.e - lam.e).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(unpack_lambda(Vector::Zero(10), 7, 3), DimensionError);
  VariationalParams bad = lam;
  bad.vech_c = Vector::Zero(vech_length(7, 3) + 1);
  CHECK_THROWS_AS(bad.s(), DimensionError);
}

TEST_CASE("reparameterization is the stated affine map with the stated law") {
  Rng rng(5, 0);
  const int m = 4, s = 2;
  const VariationalParams lam = example_lambda(m, s, rng);

  CHECK((reparameterize(lam, Vector::Zero(s), Vector::Zero(m)) - lam.mu).cwiseAbs().maxCoeff() ==
        0.0);

  VariationalParams diag = lam;
  diag.vech_c.setZero();
  diag.e.setOnes();
  Vector eps(m);
  for (int j = 0; j < m; ++j) eps[j] = rng.normal();
  CHECK((reparameterize(diag, Vector::Zero(s), eps) - (diag.mu + eps)).cwiseAbs().maxCoeff() ==
        0.0);

  // Sample covariance of the outputs matches C C^T + E^2 entrywise within
  // three Monte Carlo standard deviations.
  const Matrix omega = dense_covariance(lam);
  const int draws = 100000;
  Matrix sum2 = Matrix::Zero(m, m);
  Vector sum = Vector::Zero(m);
  Vector w(s);
  for (int d = 0; d < draws; ++d) {
    for (int j = 0; j < s; ++j) w[j] = rng.normal();
    for (int j = 0; j < m; ++j) eps[j] = rng.normal();
    const Vector th = reparameterize(lam, w, eps);
    sum += th;
    sum2.noalias() += th * th.transpose();
  }
  const Vector mean = sum / draws;
  const Matrix cov = sum2 / draws - mean * mean.transpose();
  for (int a = 0; a < m; ++a)
    for (int b = 0; b <= a; ++b) {
      const double sd =
          std::sqrt((omega(a, a) * omega(b, b) + omega(a, b) * omega(a, b)) / draws);
      CHECK(std::abs(cov(a, b) - omega(a, b)) < 3.0 * sd + 1e-12);
    }

  CHECK_THROWS_AS(reparameterize(lam, Vector::Zero(s + 1), eps), DimensionError);
  CHECK_THROWS_AS(reparameterize(lam, Vector::Zero(s), Vector::Zero(m + 1)), DimensionError);
}

TEST_CASE("variational score matches the dense Gaussian density") {
  Rng rng(7, 0);

  // theta = mu gives a zero score.
  const VariationalParams lam0 = example_lambda(5, 2, rng);
  CHECK(grad_log_q(lam0, lam0.mu).cwiseAbs().maxCoeff() == 0.0);

  // Diagonal case: -(theta - mu) / e^2.
  VariationalParams diag = example_lambda(6, 2, rng);
  diag.vech_c.setZero();
  Vector th(6);
  for (int j = 0; j < 6; ++j) th[j] = rng.normal();
  const Vector expect = -(th - diag.mu).cwiseQuotient(diag.e.cwiseProduct(diag.e));
  CHECK((grad_log_q(diag, th) - expect).cwiseAbs().maxCoeff() < 1e-14);

  // Dense finite-difference oracle at moderate dimension.
  const int m = 12, s = 3;
  const VariationalParams lam = example_lambda(m, s, rng);
  const Matrix omega = dense_covariance(lam);
  const Eigen::LDLT<Matrix> ldlt(omega);
  const auto log_density = [&](const Vector& x) {
    const Vector v = x - lam.mu;
    return -0.5 * v.dot(ldlt.solve(v));
  };
  Vector theta(m);
  for (int j = 0; j < m; ++j) theta[j] = lam.mu[j] + 0.8 * rng.normal();
  const Vector analytic = grad_log_q(lam, theta);
  const double h = 1e-6;
  for (int j = 0; j < m; ++j) {
    Vector up = theta, down = theta;
    up[j] += h;
    down[j] -= h;
    const double fd = (log_density(up) - log_density(down)) / (2.0 * h);
    CHECK(std::abs(analytic[j] - fd) < 1e-6 * std::max(1.0, std::abs(fd)));
  }

  // E[grad_log_q] = 0 under theta ~ q (three Monte Carlo sds).
  const int draws = 20000;
  Vector sum = Vector::Zero(m), sumsq = Vector::Zero(m), w(s), eps(m);
  for (int d = 0; d < draws; ++d) {
    for (int j = 0; j < s; ++j) w[j] = rng.normal();
    for (int j = 0; j < m; ++j) eps[j] = rng.normal();
    const Vector g = grad_log_q(lam, reparameterize(lam, w, eps));
    sum += g;
    sumsq += g.cwiseProduct(g);
  }
  for (int j = 0; j < m; ++j) {
    const double mean = sum[j] / draws;
    const double se = std::sqrt((sumsq[j] / draws - mean * mean) / (draws - 1));
    CHECK(std::abs(mean) <= 3.0 * se + 1e-12);
  }

  VariationalParams singular = lam0;
  singular.e.setZero();
  CHECK_THROWS_AS(grad_log_q(singular, lam0.mu), NumericalError);
}

TEST_CASE("lambda pullback follows the vech pattern and finite differences") {
  Rng rng(9, 0);
  const int m = 6, s = 2;
  const VariationalParams lam = example_lambda(m, s, rng);
  Vector w(s), eps(m), v(m);
  for (int j = 0; j < s; ++j) w[j] = rng.normal();
  for (int j = 0; j < m; ++j) eps[j] = rng.normal();
  for (int j = 0; j < m; ++j) v[j] = rng.normal();

  const Vector vjp = dtheta_dlambda_vjp(lam, w, eps, v);
  CHECK((vjp.head(m) - v).cwiseAbs().maxCoeff() == 0.0);
  for (int j = 0; j < s; ++j)
    for (int i = j; i < m; ++i)
      CHECK(vjp[m + vech_offset(m, j) + i - j] == doctest::Approx(v[i] * w[j]).epsilon(1e-15));
  CHECK((vjp.tail(m) - v.cwiseProduct(eps)).cwiseAbs().maxCoeff() == 0.0);

  // Against finite differences of lambda -> theta(zeta, lambda) dotted
  // with the cotangent; the map is affine so central differences are exact
  // to rounding.
  const Vector packed = pack_lambda(lam);
  const double h = 1e-6;
  for (int l = 0; l < packed.size(); ++l) {
    Vector up = packed, down = packed;
    up[l] += h;
    down[l] -= h;
    const double fd = (reparameterize(unpack_lambda(up, m, s), w, eps).dot(v) -
                       reparameterize(unpack_lambda(down, m, s), w, eps).dot(v)) /
                      (2.0 * h);
    CHECK(vjp[l] == doctest::Approx(fd).epsilon(1e-7));
  }
}

TEST_CASE("adadelta steps follow the recursion") {
  const int dim = 4;
  Vector lambda = Vector::Zero(dim);
  AdadeltaState st = AdadeltaState::zero(dim);
  Vector g(dim);
  g << 2.0, -0.5, 0.0, 1e-3;
  const double rho = 0.95, eps = 1e-6;

  adadelta_update(lambda, g, st, rho, eps);
  for (int j = 0; j < dim; ++j) {
    const double expect = g[j] * std::sqrt(eps) / std::sqrt((1.0 - rho) * g[j] * g[j] + eps);
    CHECK(lambda[j] == doctest::Approx(expect).epsilon(1e-12));
  }

  // Zero gradient: no movement, accumulators decay geometrically.
  Vector before = lambda;
  const Vector gs = st.grad_sq, ss = st.step_sq;
  adadelta_update(lambda, Vector::Zero(dim), st, rho, eps);
  CHECK((lambda - before).cwiseAbs().maxCoeff() == 0.0);
  CHECK((st.grad_sq - rho * gs).cwiseAbs().maxCoeff() < 1e-18);
  CHECK((st.step_sq - rho * ss).cwiseAbs().maxCoeff() < 1e-18);

  // First-step direction is scale-free in sign pattern.
  Vector l1 = Vector::Zero(dim), l2 = Vector::Zero(dim);
  AdadeltaState s1 = AdadeltaState::zero(dim), s2 = AdadeltaState::zero(dim);
  adadelta_update(l1, g, s1, rho, eps);
  adadelta_update(l2, 2.0 * g, s2, rho, eps);
  for (int j = 0; j < dim; ++j) {
    CHECK(((l1[j] > 0) - (l1[j] < 0)) == ((l2[j] > 0) - (l2[j] < 0)));
  }

  CHECK_THROWS_AS(adadelta_update(lambda, Vector::Zero(dim + 1), st, rho, eps), DimensionError);
  CHECK_THROWS_AS(adadelta_update(lambda, g, st, 1.0, eps), DomainError);
  CHECK_THROWS_AS(adadelta_update(lambda, g, st, rho, 0.0), DomainError);
}

TEST_CASE("estimator is unbiased for the closed-form conjugate-Gaussian objective") {
  // Identity-covariance model with the latents drawn exactly from p(z|beta):
  // the likelihood contribution cancels in the objective, whose gradient is
  // the Kullback-Leibler gradient against the N(0, 1/10 I) coefficient prior:
  //   mu-block  -10 mu,
  //   C-block   [(Omega^{-1} - 10 I) C]_vech,
  //   e-block   diag(Omega^{-1} - 10 I) o e.
  const ChoiceStructure sc = ChoiceStructure::make({2}, 0, 1);
  const int m = sc.r, s = 1, N = 15;
  Rng rng(11, 0);
  const Dataset data = random_dataset(sc, N, rng);
  const DesignMatrix design = build_design(sc, data);

  VariationalParams lam = VariationalParams::zero(m, s);
  lam.mu << 0.3, -0.2, 0.1;
  lam.vech_c << 0.4, -0.3, 0.2;
  lam.e << 0.5, 0.8, 0.6;

  const Matrix omega = dense_covariance(lam);
  const Matrix omega_inv = omega.inverse();
  Matrix cfac = Matrix::Zero(m, s);
  cfac.col(0) = lam.vech_c;
  const Matrix grad_c = (omega_inv - 10.0 * Matrix::Identity(m, m)) * cfac;
  Vector closed(pack_lambda(lam).size());
  closed.head(m) = -10.0 * lam.mu;
  closed.segment(m, m) = grad_c.col(0);
  closed.tail(m) = (omega_inv.diagonal().array() - 10.0) * lam.e.array();

  std::vector<int> all(N);
  std::iota(all.begin(), all.end(), 0);
  const int draws = 10000;
  Vector sum = Vector::Zero(closed.size()), sumsq = Vector::Zero(closed.size());
  Vector w(s), eps(m), noise(sc.J_total), mu_i(sc.J_total);
  Matrix z(sc.J_total, N);
  for (int d = 0; d < draws; ++d) {
    for (int j = 0; j < s; ++j) w[j] = rng.normal();
    for (int j = 0; j < m; ++j) eps[j] = rng.normal();
    const Vector theta = reparameterize(lam, w, eps);
    for (int i = 0; i < N; ++i) {
      design.mean_into(i, theta, mu_i);
      for (int j = 0; j < sc.J_total; ++j) noise[j] = rng.normal();
      z.col(i) = mu_i + noise;
    }
    const Vector g_theta = grad_log_g_identity(sc, design, theta, z, all, N) -
                           grad_log_q(lam, theta);
    const Vector est = dtheta_dlambda_vjp(lam, w, eps, g_theta);
    sum += est;
    sumsq += est.cwiseProduct(est);
  }
  for (int j = 0; j < closed.size(); ++j) {
    const double mean = sum[j] / draws;
    const double se = std::sqrt((sumsq[j] / draws - mean * mean) / (draws - 1));
    CAPTURE(j);
    CHECK(std::abs(mean - closed[j]) <= 3.0 * se + 1e-10);
  }
}

TEST_CASE("single-draw estimates are finite and more Gibbs sweeps reduce dispersion") {
  const ChoiceStructure sc = ChoiceStructure::make({2}, 0, 1);
  const int N = 60;
  Rng rng(13, 0);
  const Dataset data = random_dataset(sc, N, rng);
  const DesignMatrix design = build_design(sc, data);
  const AnglePrior prior = synthetic_prior(sc);

  VbConfig cfg;
  cfg.seed = 21;
  cfg.subsample_fraction = 1.0;
  // A dispersed variational law makes theta move between iterations, so the
  // warm-started latent chain must chase it; more sweeps track it closer.
  VariationalParams lam = VariationalParams::zero(sc.theta_dim, 2);
  lam.e.setConstant(0.3);
  Rng lrng(14, 0);
  for (int j = 0; j < lam.mu.size(); ++j) lam.mu[j] = 0.3 * lrng.normal();
  for (int j = 0; j < lam.vech_c.size(); ++j) lam.vech_c[j] = 0.05 * lrng.normal();

  const int reps = 600;
  double var_by_g[2] = {0.0, 0.0};
  const int gvals[2] = {1, 10};
  for (int gi = 0; gi < 2; ++gi) {
    cfg.gibbs_steps = gvals[gi];
    VbState state = make_vb_state(sc, data, cfg.seed);
    Vector sum, sumsq;
    for (int t = 0; t < reps; ++t) {
      const GradientEstimate ge =
          elbo_gradient_estimate(sc, design, &prior, lam, state, cfg, t);
      REQUIRE(ge.lambda_grad.allFinite());
      REQUIRE(ge.lambda_grad.size() == pack_lambda(lam).size());
      REQUIRE(static_cast<int>(ge.subsample.size()) == N);
      if (t == 0) {
        sum = Vector::Zero(ge.lambda_grad.size());
        sumsq = sum;
      }
      sum += ge.lambda_grad;
      sumsq += ge.lambda_grad.cwiseProduct(ge.lambda_grad);
    }
    const Vector mean = sum / reps;
    var_by_g[gi] = (sumsq / reps - mean.cwiseProduct(mean)).sum();
  }
  CHECK(var_by_g[1] < var_by_g[0]);
}

TEST_CASE("persistent latents stay consistent with the outcomes") {
  const ChoiceStructure sc = ChoiceStructure::make({2, 1}, 1, 1);
  const int N = 80;
  Rng rng(15, 0);
  const Dataset data = random_dataset(sc, N, rng);
  const DesignMatrix design = build_design(sc, data);
  const AnglePrior prior = synthetic_prior(sc);

  VbConfig cfg;
  cfg.seed = 33;
  cfg.subsample_fraction = 0.25;
  cfg.gibbs_steps = 3;
  VbState state = make_vb_state(sc, data, cfg.seed);
  for (int i = 0; i < N; ++i)
    REQUIRE(indicator_y_given_z(sc, state.yT.col(i), state.z.col(i)));

  VariationalParams lam = VariationalParams::zero(sc.theta_dim, 3);
  lam.e.setConstant(0.01);
  for (int t = 0; t < 50; ++t) {
    elbo_gradient_estimate(sc, design, &prior, lam, state, cfg, t);
    for (int i = 0; i < N; ++i) {
      CAPTURE(t);
      CAPTURE(i);
      REQUIRE(indicator_y_given_z(sc, state.yT.col(i), state.z.col(i)));
    }
  }
  // Subsample sizes respect the fraction and index the data.
  const GradientEstimate ge = elbo_gradient_estimate(sc, design, &prior, lam, state, cfg, 50);
  CHECK(static_cast<int>(ge.subsample.size()) == 20);
  std::vector<int> sorted = ge.subsample;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  CHECK(sorted.front() >= 0);
  CHECK(sorted.back() < N);
}

TEST_CASE("fits are reproducible, floored, and abort on divergence") {
  const ChoiceStructure sc = ChoiceStructure::make({2, 1}, 1, 0);
  const int N = 150;
  Rng rng(17, 0);
  const Dataset data = random_dataset(sc, N, rng);
  const DesignMatrix design = build_design(sc, data);
  const AnglePrior prior = synthetic_prior(sc);

  VbConfig cfg;
  cfg.iterations = 60;
  cfg.average_window = 20;
  cfg.subsample_fraction = 0.5;
  cfg.gibbs_steps = 2;
  cfg.factors = 3;
  cfg.diag_interval = 20;
  cfg.diag_obs = 40;
  cfg.diag_draws = 25;
  cfg.seed = 44;

  const VbResult a = run_vb(sc, data, design, prior, cfg);
  const VbResult b = run_vb(sc, data, design, prior, cfg);
  CHECK((pack_lambda(a.lambda) - pack_lambda(b.lambda)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((pack_lambda(a.last) - pack_lambda(b.last)).cwiseAbs().maxCoeff() == 0.0);
  WorkerPool pool(3);
  const VbResult c = run_vb(sc, data, design, prior, cfg, &pool);
  CHECK((pack_lambda(a.lambda) - pack_lambda(c.lambda)).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(a.diagnostics.size() == 3);
  REQUIRE(c.diagnostics.size() == 3);
  for (std::size_t i = 0; i < a.diagnostics.size(); ++i) {
    CHECK(a.diagnostics[i].iteration == static_cast<std::int64_t>(20 * (i + 1)));
    CHECK((a.diagnostics[i].hit_rate - c.diagnostics[i].hit_rate).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.diagnostics[i].hit_rate.minCoeff() >= 0.0);
    CHECK(a.diagnostics[i].hit_rate.maxCoeff() <= 1.0);
  }
  CHECK(a.lambda.e.cwiseAbs().minCoeff() >= cfg.e_floor);
  CHECK(a.last.e.cwiseAbs().minCoeff() >= cfg.e_floor);

  VbConfig other = cfg;
  other.seed = 45;
  const VbResult d = run_vb(sc, data, design, prior, other);
  CHECK((pack_lambda(a.lambda) - pack_lambda(d.lambda)).cwiseAbs().maxCoeff() > 0.0);

  const VbResult id = run_vb_identity(sc, data, design, cfg);
  const VbResult id2 = run_vb_identity(sc, data, design, cfg);
  CHECK(id.identity);
  CHECK(id.lambda.m() == sc.r);
  CHECK((pack_lambda(id.lambda) - pack_lambda(id2.lambda)).cwiseAbs().maxCoeff() == 0.0);

  VbConfig diverge = cfg;
  diverge.divergence_bound = 1e-4;
  CHECK_THROWS_AS(run_vb(sc, data, design, prior, diverge), DivergenceError);

  VbConfig bad = cfg;
  bad.iterations = 0;
  CHECK_THROWS_AS(run_vb(sc, data, design, prior, bad), DomainError);
  bad = cfg;
  bad.average_window = cfg.iterations + 1;
  CHECK_THROWS_AS(run_vb(sc, data, design, prior, bad), DomainError);
  bad = cfg;
  bad.subsample_fraction = 0.0;
  CHECK_THROWS_AS(run_vb(sc, data, design, prior, bad), DomainError);
  bad = cfg;
  bad.rho = 1.0;
  CHECK_THROWS_AS(run_vb(sc, data, design, prior, bad), DomainError);
  bad = cfg;
  bad.gibbs_steps = 0;
  CHECK_THROWS_AS(run_vb(sc, data, design, prior, bad), DomainError);
}

TEST_CASE("conditional hit-rate recognizes a separated fit") {
  // Binary choice with intercept only: a variational mean far above zero
  // forecasts category 1 almost surely.
  const ChoiceStructure sc = ChoiceStructure::make({1}, 0, 0, 1);
  const int N = 40;
  Dataset data;
  data.N = N;
  data.y = IntMatrix::Ones(N, 1);
  data.x_d.resize(N, 0);
  data.x_a.resize(1);
  data.x_a[0].resize(N, 0);
  const DesignMatrix design = build_design(sc, data);

  VariationalParams lam = VariationalParams::zero(sc.r, 0);
  lam.mu.setConstant(3.0);
  lam.e.setConstant(1e-3);
  std::vector<int> obs(N);
  std::iota(obs.begin(), obs.end(), 0);

  const Vector up = conditional_hit_rate(sc, design, data.y, obs, lam, 50, 7, nullptr, true);
  CHECK(up[0] > 0.95);
  lam.mu.setConstant(-3.0);
  const Vector down = conditional_hit_rate(sc, design, data.y, obs, lam, 50, 7, nullptr, true);
  CHECK(down[0] < 0.05);

  CHECK_THROWS_AS(conditional_hit_rate(sc, design, data.y, {}, lam, 50, 7, nullptr, true),
                  DomainError);
  CHECK_THROWS_AS(conditional_hit_rate(sc, design, data.y, obs, lam, 0, 7, nullptr, true),
                  DomainError);
  CHECK_THROWS_AS(conditional_hit_rate(sc, design, data.y, {N}, lam, 50, 7, nullptr, true),
                  DimensionError);
}
