#include "doctest.h"

#include "mvmnp/covariance.hpp"
#include "mvmnp/normal.hpp"
#include "mvmnp/prior.hpp"
#include "mvmnp/rng.hpp"
#include "mvmnp/spherical.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

using namespace mvmnp;

namespace {

// Exact sampler of the transformed-normal law with density
// phi(t_eta(x)) t_eta'(x) / tau: invert t on a standard normal draw.
double yj_normal_draw(Rng& rng, double mu, double tau, double eta) {
  const double z = rng.normal();
  double x;
  if (z >= 0.0) {
    x = std::pow(eta * z + 1.0, 1.0 / eta) - 1.0;
  } else {
    const double w = 2.0 - eta;
    x = 1.0 - std::pow(1.0 - w * z, 1.0 / w);
  }
  return mu + tau * x;
}

template <typename F>
double simpson(const F& f, double a, double b, int intervals) {
  const double h = (b - a) / intervals;
  double acc = f(a) + f(b);
  for (int i = 1; i < intervals; ++i) acc += f(a + i * h) * ((i % 2) ? 4.0 : 2.0);
  return acc * h / 3.0;
}

double ks_distance(std::vector<double> xs, const std::function<double(double)>& cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double F = cdf(xs[i]);
    d = std::max(d, std::max(F - static_cast<double>(i) / n,
                             static_cast<double>(i + 1) / n - F));
  }
  return d;
}

// Synthetic prior with hand-set hyperparameters for a given structure.
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

}  // namespace

TEST_CASE("transformed-normal fit recovers synthetic hyperparameters") {
  const std::int64_t n = 20000;
  for (const auto& truth : {std::array<double, 3>{0.3, 0.8, 1.3},
                            std::array<double, 3>{-0.5, 1.1, 0.7}}) {
    Rng rng(123, 7);
    Vector xs(n);
    for (std::int64_t i = 0; i < n; ++i) xs[i] = yj_normal_draw(rng, truth[0], truth[1], truth[2]);
    double mu = 0, tau = 0, eta = 0;
    fit_angle_element(xs, mu, tau, eta);
    CHECK(std::abs(mu - truth[0]) < 0.05);
    CHECK(std::abs(tau - truth[1]) < 0.05);
    CHECK(std::abs(eta - truth[2]) < 0.10);
  }
}

TEST_CASE("fitted density matches its distribution function") {
  const std::array<std::array<double, 3>, 3> params = {{{0.3, 0.8, 1.3}, {-0.5, 1.2, 0.7}, {0.0, 1.0, 1.0}}};
  for (const auto& p : params) {
    const double mu = p[0], tau = p[1], eta = p[2];
    const auto dens = [&](double x) { return std::exp(angle_log_density_xi(x, mu, tau, eta)); };
    const double a = mu - 8.0 * tau, b = mu + 8.0 * tau;
    const double integral = simpson(dens, a, b, 4000);
    const double mass = angle_cdf_xi(b, mu, tau, eta) - angle_cdf_xi(a, mu, tau, eta);
    CHECK(std::abs(integral - mass) < 1e-8);
    CHECK(mass > 0.99);
    CHECK(angle_cdf_xi(mu - 60.0 * tau, mu, tau, eta) < 1e-6);
    CHECK(angle_cdf_xi(mu + 60.0 * tau, mu, tau, eta) > 1.0 - 1e-6);
    double prev = -1.0;
    for (int i = 0; i <= 50; ++i) {
      const double F = angle_cdf_xi(a + (b - a) * i / 50.0, mu, tau, eta);
      CHECK(F >= prev);
      prev = F;
    }
  }
  // The unit power reduces the family to the plain normal.
  for (double x : {-2.5, -0.3, 0.0, 0.7, 3.1}) {
    CHECK(angle_log_density_xi(x, 0.0, 1.0, 1.0) == doctest::Approx(log_norm_pdf(x)).epsilon(1e-14));
    CHECK(angle_cdf_xi(x, 0.0, 1.0, 1.0) == doctest::Approx(norm_cdf(x)).epsilon(1e-13));
  }
}

TEST_CASE("angle-space density carries the probit chart Jacobian") {
  const double upper = std::numbers::pi;
  const double mu = 0.2, tau = 0.9, eta = 1.2;
  // Integrate over an interior angle interval and compare with the CDF.
  const double xi_lo = -3.0, xi_hi = 3.0;
  const double ka = upper * norm_cdf(xi_lo), kb = upper * norm_cdf(xi_hi);
  const auto dens = [&](double kap) {
    return std::exp(angle_log_density_kappa(kap, upper, mu, tau, eta));
  };
  const double integral = simpson(dens, ka, kb, 8000);
  const double mass = angle_cdf_kappa(kb, upper, mu, tau, eta) - angle_cdf_kappa(ka, upper, mu, tau, eta);
  CHECK(std::abs(integral - mass) < 1e-6);

  CHECK(angle_cdf_kappa(0.0, upper, mu, tau, eta) == 0.0);
  CHECK(angle_cdf_kappa(upper, upper, mu, tau, eta) == 1.0);
  double prev = -1.0;
  for (int i = 1; i < 40; ++i) {
    const double F = angle_cdf_kappa(upper * i / 40.0, upper, mu, tau, eta);
    CHECK(F >= prev);
    prev = F;
  }
  CHECK_THROWS_AS(angle_log_density_kappa(0.0, upper, mu, tau, eta), DomainError);
  CHECK_THROWS_AS(angle_log_density_kappa(upper, upper, mu, tau, eta), DomainError);
}

TEST_CASE("joint prior closed form, gradient, and angle-space chart agree") {
  const ChoiceStructure sc = ChoiceStructure::make({2, 1}, 1, 1, 1);
  const AnglePrior prior = synthetic_prior(sc);
  REQUIRE(sc.theta_dim == sc.r + sc.n - sc.K);

  SUBCASE("closed form at the location point") {
    Rng rng(5, 1);
    Vector theta = Vector::Zero(sc.theta_dim);
    for (int i = 0; i < sc.r; ++i) theta[i] = rng.normal();
    double expected = -0.5 * sc.r * std::log(2.0 * std::numbers::pi * 0.1) -
                      5.0 * theta.head(sc.r).squaredNorm();
    for (int k = 0; k < sc.K; ++k) {
      for (int l = 0; l < sc.angles_k(k); ++l) {
        theta[sc.r + sc.angle_offset[k] + l] = prior.mu[k][l];
        expected += -0.5 * std::log(2.0 * std::numbers::pi) - std::log(prior.tau[k][l]);
      }
    }
    CHECK(log_prior(sc, theta, prior) == doctest::Approx(expected).epsilon(1e-13));
    const Vector g = grad_log_prior(sc, theta, prior);
    for (int i = 0; i < sc.r; ++i)
      CHECK(g[i] == doctest::Approx(-10.0 * theta[i]).epsilon(1e-13));
    for (int k = 0; k < sc.K; ++k) {
      for (int l = 0; l < sc.angles_k(k); ++l) {
        const double want = (prior.eta[k][l] - 1.0) / prior.tau[k][l];
        CHECK(g[sc.r + sc.angle_offset[k] + l] == doctest::Approx(want).epsilon(1e-12));
      }
    }
  }

  SUBCASE("gradient matches central differences") {
    Rng rng(17, 3);
    Vector theta(sc.theta_dim);
    for (int i = 0; i < sc.theta_dim; ++i) theta[i] = 0.8 * rng.normal();
    const Vector g = grad_log_prior(sc, theta, prior);
    const double h = 1e-5;
    for (int i = 0; i < sc.theta_dim; ++i) {
      Vector tp = theta, tm = theta;
      tp[i] += h;
      tm[i] -= h;
      const double fd = (log_prior(sc, tp, prior) - log_prior(sc, tm, prior)) / (2.0 * h);
      CHECK(std::abs(g[i] - fd) < 1e-6 * std::max(1.0, std::abs(g[i])));
    }
  }

  SUBCASE("angle-space form differs by the chart Jacobian") {
    Rng rng(29, 4);
    Vector theta(sc.theta_dim);
    for (int i = 0; i < sc.theta_dim; ++i) theta[i] = 0.7 * rng.normal();
    const Vector xi = theta.tail(sc.n_angles);
    const Vector kappa = angles_from_unconstrained(sc, xi);
    const double beta_part = -0.5 * sc.r * std::log(2.0 * std::numbers::pi * 0.1) -
                             5.0 * theta.head(sc.r).squaredNorm();
    double log_jac = 0.0;
    for (int k = 0; k < sc.K; ++k) {
      for (int l = 0; l < sc.angles_k(k); ++l) {
        const double upper = angle_upper_bound(l, sc.n_k[k], sc.J[k]);
        log_jac += std::log(upper * norm_pdf(xi[sc.angle_offset[k] + l]));
      }
    }
    const double via_kappa = log_prior_kappa(sc, kappa, prior) + log_jac + beta_part;
    CHECK(via_kappa == doctest::Approx(log_prior(sc, theta, prior)).epsilon(1e-10));
  }

  SUBCASE("shape validation") {
    Vector short_theta = Vector::Zero(sc.theta_dim - 1);
    CHECK_THROWS_AS(log_prior(sc, short_theta, prior), DimensionError);
    AnglePrior wrong = prior;
    wrong.mu.pop_back();
    Vector theta = Vector::Zero(sc.theta_dim);
    CHECK_THROWS_AS(log_prior(sc, theta, wrong), DimensionError);
    CHECK_THROWS_AS(grad_log_prior(sc, theta, wrong), DimensionError);
  }
}

TEST_CASE("loading location calibration hits the target mean correlation") {
  const ChoiceStructure sc = ChoiceStructure::make({2, 1}, 0, 1);
  const PsiPriorConfig cfg;
  const std::int64_t draws = 20000;
  const double mu_B = calibrate_mu_B(sc, cfg, draws, 42);
  CHECK(mu_B > 0.0);
  CHECK(mu_B < 64.0);
  CHECK(calibrate_mu_B(sc, cfg, draws, 42) == mu_B);

  // Monte-Carlo verification with fresh randomness.
  std::vector<Matrix> psi(sc.K);
  for (int k = 0; k < sc.K; ++k) psi[k] = sample_psi_block(sc, k, mu_B, cfg, draws, 999);
  Vector stacked(sc.n);
  double mean_off = 0.0;
  const double n_off = sc.J_total * (sc.J_total - 1);
  for (std::int64_t i = 0; i < draws; ++i) {
    for (int k = 0; k < sc.K; ++k)
      stacked.segment(sc.psi_offset[k], sc.n_k[k]) = psi[k].row(i).transpose();
    const FactorCovariance fc = covariance_from_psi(sc, stacked);
    mean_off += (fc.sigma.sum() - fc.sigma.trace()) / n_off;
  }
  mean_off /= static_cast<double>(draws);
  CHECK(std::abs(mean_off - cfg.target_mean_offdiag) < 0.02);

  // A single latent utility has no off-diagonal entries to calibrate.
  const ChoiceStructure tiny = ChoiceStructure::make({1}, 0, 1);
  CHECK(calibrate_mu_B(tiny, cfg, 100, 1) == 0.0);

  // Within one block a zero location leaves the mean cross term at zero by
  // sign symmetry of the off-diagonal loadings.
  const ChoiceStructure single = ChoiceStructure::make({3}, 0, 1, 1);
  const Matrix sp = sample_psi_block(single, 0, 0.0, cfg, draws, 314);
  double m0 = 0.0;
  for (std::int64_t i = 0; i < draws; ++i) {
    const FactorCovariance fc = covariance_from_psi(single, sp.row(i).transpose());
    m0 += (fc.sigma.sum() - fc.sigma.trace()) / (single.J_total * (single.J_total - 1));
  }
  m0 /= static_cast<double>(draws);
  CHECK(std::abs(m0) < 0.01);
}

TEST_CASE("psi block draws live on the sphere with positive scales") {
  const ChoiceStructure sc = ChoiceStructure::make({3, 2}, 1, 1, 2);
  const PsiPriorConfig cfg;
  for (int k = 0; k < sc.K; ++k) {
    const Matrix psi = sample_psi_block(sc, k, 0.8, cfg, 500, 11);
    REQUIRE(psi.rows() == 500);
    REQUIRE(psi.cols() == sc.n_k[k]);
    for (int i = 0; i < psi.rows(); ++i) {
      CHECK(std::abs(psi.row(i).squaredNorm() - sc.J[k]) < 1e-12 * sc.J[k]);
      for (int j = sc.n_k[k] - sc.J[k]; j < sc.n_k[k]; ++j) CHECK(psi(i, j) > 0.0);
    }
  }
  const Matrix again = sample_psi_block(sc, 0, 0.8, cfg, 500, 11);
  CHECK((again - sample_psi_block(sc, 0, 0.8, cfg, 500, 11)).norm() == 0.0);
  CHECK((again - sample_psi_block(sc, 0, 0.8, cfg, 500, 12)).norm() > 0.0);
}

TEST_CASE("full prior calibration fits every angle coordinate") {
  const ChoiceStructure sc = ChoiceStructure::make({2, 1}, 0, 1, 1);
  const PsiPriorConfig cfg;
  const std::int64_t draws = 6000;
  const AnglePrior prior = calibrate_angle_prior(sc, cfg, draws, 7);
  CHECK(prior.seed == 7);
  CHECK(prior.draws == draws);
  CHECK(prior.mu_B > 0.0);
  REQUIRE(static_cast<int>(prior.mu.size()) == sc.K);
  for (int k = 0; k < sc.K; ++k) {
    REQUIRE(prior.mu[k].size() == sc.angles_k(k));
    for (int l = 0; l < sc.angles_k(k); ++l) {
      CHECK(prior.tau[k][l] > 0.0);
      CHECK(prior.eta[k][l] > 0.1);
      CHECK(prior.eta[k][l] < 1.9);
    }
  }

  // The fitted family should track the empirical marginals it was fitted to.
  for (int k = 0; k < sc.K; ++k) {
    const Matrix psi = sample_psi_block(sc, k, prior.mu_B, cfg, draws, 7);
    Matrix xi(draws, sc.angles_k(k));
    for (std::int64_t i = 0; i < draws; ++i)
      xi.row(i) = angles_to_real(spherical_inverse(psi.row(i).transpose(), sc.J[k]), sc.J[k])
                      .transpose();
    for (int l = 0; l < sc.angles_k(k); ++l) {
      std::vector<double> col(xi.col(l).data(), xi.col(l).data() + draws);
      const double mu = prior.mu[k][l], tau = prior.tau[k][l], eta = prior.eta[k][l];
      const double ks = ks_distance(col, [&](double x) { return angle_cdf_xi(x, mu, tau, eta); });
      CHECK(ks < 0.05);

      // The fit can only improve on its plain-normal starting point.
      const double m = xi.col(l).mean();
      const double s = std::sqrt((xi.col(l).array() - m).square().sum() / draws);
      double ll_fit = 0.0, ll_normal = 0.0;
      for (std::int64_t i = 0; i < draws; ++i) {
        ll_fit += angle_log_density_xi(xi(i, l), mu, tau, eta);
        ll_normal += angle_log_density_xi(xi(i, l), m, s, 1.0);
      }
      CHECK(ll_fit >= ll_normal - 1e-9 * std::abs(ll_normal));
    }
  }

  // Full determinism of the calibration pipeline.
  const AnglePrior again = calibrate_angle_prior(sc, cfg, draws, 7);
  CHECK(serialize_prior(again) == serialize_prior(prior));
}

TEST_CASE("prior serialization round-trips exactly") {
  const ChoiceStructure sc = ChoiceStructure::make({2, 1}, 1, 1, 1);
  AnglePrior prior = synthetic_prior(sc);
  prior.seed = 123456789012345ull;
  prior.draws = 54321;
  prior.mu_B = 0.7234981723498172;
  prior.mu[0][1] = 0.1 + 1e-16;  // exercise shortest-round-trip formatting

  const std::string text = serialize_prior(prior);
  const AnglePrior back = parse_prior(text, sc);
  CHECK(back.seed == prior.seed);
  CHECK(back.draws == prior.draws);
  CHECK(back.mu_B == prior.mu_B);
  for (int k = 0; k < sc.K; ++k) {
    for (int l = 0; l < sc.angles_k(k); ++l) {
      CHECK(back.mu[k][l] == prior.mu[k][l]);
      CHECK(back.tau[k][l] == prior.tau[k][l]);
      CHECK(back.eta[k][l] == prior.eta[k][l]);
    }
  }

  CHECK_THROWS_AS(parse_prior("not json at all", sc), ParseError);
  CHECK_THROWS_AS(parse_prior("{}", sc), ParseError);
  CHECK_THROWS_AS(parse_prior(R"({"seed":1,"draws":1,"mu_B":0,"elements":[]})", sc), ParseError);
  const std::string dup = R"({"seed":1,"draws":1,"mu_B":0,"elements":[
    {"choice":0,"element":0,"mu":0,"tau":1,"eta":1},
    {"choice":0,"element":0,"mu":0,"tau":1,"eta":1}]})";
  CHECK_THROWS_AS(parse_prior(dup, sc), ParseError);
  const std::string bad_eta = R"({"seed":1,"draws":1,"mu_B":0,"elements":[
    {"choice":0,"element":0,"mu":0,"tau":1,"eta":2.5}]})";
  CHECK_THROWS_AS(parse_prior(bad_eta, sc), ParseError);
  const std::string bad_choice = R"({"seed":1,"draws":1,"mu_B":0,"elements":[
    {"choice":9,"element":0,"mu":0,"tau":1,"eta":1}]})";
  CHECK_THROWS_AS(parse_prior(bad_choice, sc), ParseError);
}
