#include "mvmnp/prior.hpp"

#include "mvmnp/covariance.hpp"
#include "mvmnp/nelder_mead.hpp"
#include "mvmnp/normal.hpp"
#include "mvmnp/rng.hpp"
#include "mvmnp/spherical.hpp"
#include "mvmnp/yeo_johnson.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mvmnp {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;

// Loading entry c * J_k + j of vec(B_k) sits on the block diagonal when the
// row index j equals the column index c.
inline bool diagonal_loading(int idx, int J_k) { return idx % J_k == idx / J_k; }

// Raw variables behind one psi_ddot draw, in a mu_B-free representation so
// the same draws can be re-evaluated at any location during calibration:
// standard normals for off-diagonal loadings, uniforms feeding the
// inverse-CDF of the truncated-positive diagonal loadings, inverse-gamma
// draws for the squared idiosyncratic scales.
Vector draw_raw(Rng& rng, int J_k, int p, const PsiPriorConfig& cfg) {
  const int n_load = J_k * p;
  Vector raw(n_load + J_k);
  for (int idx = 0; idx < n_load; ++idx)
    raw[idx] = diagonal_loading(idx, J_k) ? rng.uniform() : rng.normal();
  for (int j = 0; j < J_k; ++j) raw[n_load + j] = rng.inverse_gamma(cfg.ig_shape, cfg.ig_rate);
  return raw;
}

Vector psi_ddot_from_raw(const Eigen::Ref<const Vector>& raw, int J_k, int p, double mu_B,
                         double sigma_B) {
  const int n_load = J_k * p;
  Vector psi(n_load + J_k);
  const double lo = norm_cdf(-mu_B / sigma_B);
  for (int idx = 0; idx < n_load; ++idx) {
    psi[idx] = diagonal_loading(idx, J_k)
                   ? mu_B + sigma_B * norm_quantile(lo + raw[idx] * (1.0 - lo))
                   : mu_B + sigma_B * raw[idx];
  }
  for (int j = 0; j < J_k; ++j) psi[n_load + j] = std::sqrt(raw[n_load + j]);
  return psi;
}

inline Vector normalize_psi(const Vector& psi_ddot, int J_k) {
  return (std::sqrt(static_cast<double>(J_k)) / psi_ddot.norm()) * psi_ddot;
}

// Runs f over chunk index ranges; single chunk partials are reduced by the
// caller in chunk order, so results are identical at any thread count.
template <typename F>
void over_chunks(WorkerPool* pool, std::int64_t count, std::int64_t grain, const F& f) {
  if (pool) {
    pool->for_chunks(0, count, grain, f);
  } else {
    const std::int64_t chunks = (count + grain - 1) / grain;
    for (std::int64_t c = 0; c < chunks; ++c)
      f(c, c * grain, std::min(count, (c + 1) * grain));
  }
}

void check_prior_shape(const ChoiceStructure& sc, const AnglePrior& prior, const char* where) {
  const auto bad = [&] { throw DimensionError(std::string(where) + ": angle prior shape does not match the choice structure"); };
  if (static_cast<int>(prior.mu.size()) != sc.K || static_cast<int>(prior.tau.size()) != sc.K ||
      static_cast<int>(prior.eta.size()) != sc.K)
    bad();
  for (int k = 0; k < sc.K; ++k) {
    const int want = sc.angles_k(k);
    if (prior.mu[k].size() != want || prior.tau[k].size() != want || prior.eta[k].size() != want)
      bad();
  }
}

constexpr std::int64_t kGrain = 512;

}  // namespace

double calibrate_mu_B(const ChoiceStructure& sc, const PsiPriorConfig& cfg, std::int64_t draws,
                      std::uint64_t seed, WorkerPool* pool) {
  if (draws < 1) throw DomainError("calibrate_mu_B: draws must be positive");
  if (sc.J_total <= 1) return 0.0;  // a 1 x 1 covariance has no off-diagonal entries

  // Common random numbers: all raw variables are drawn once and re-evaluated
  // at every candidate location, making the bisection objective a
  // deterministic function of mu_B.
  std::vector<Matrix> raw(sc.K);
  for (int k = 0; k < sc.K; ++k) raw[k].resize(draws, sc.J[k] * (sc.p + 1));
  over_chunks(pool, draws, kGrain, [&](std::int64_t, std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      for (int k = 0; k < sc.K; ++k) {
        Rng rng = make_stream(seed, StreamPurpose::calibrate_fit, static_cast<std::uint64_t>(k),
                              static_cast<std::uint64_t>(i));
        raw[k].row(i) = draw_raw(rng, sc.J[k], sc.p, cfg).transpose();
      }
    }
  });

  const double n_off = static_cast<double>(sc.J_total) * (sc.J_total - 1);
  const std::int64_t chunks = (draws + kGrain - 1) / kGrain;
  Vector partial(chunks);
  const auto mean_offdiag = [&](double mu_B) {
    over_chunks(pool, draws, kGrain, [&](std::int64_t c, std::int64_t lo, std::int64_t hi) {
      Vector psi(sc.n);
      double acc = 0.0;
      for (std::int64_t i = lo; i < hi; ++i) {
        for (int k = 0; k < sc.K; ++k) {
          psi.segment(sc.psi_offset[k], sc.n_k[k]) = normalize_psi(
              psi_ddot_from_raw(raw[k].row(i).transpose(), sc.J[k], sc.p, mu_B, cfg.sigma_B),
              sc.J[k]);
        }
        const FactorCovariance fc = covariance_from_psi(sc, psi);
        acc += (fc.sigma.sum() - fc.sigma.trace()) / n_off;
      }
      partial[c] = acc;
    });
    return partial.sum() / static_cast<double>(draws);
  };

  const double target = cfg.target_mean_offdiag;
  double lo = 0.0;
  if (mean_offdiag(lo) > target)
    throw CalibrationError("calibrate_mu_B: target mean off-diagonal already exceeded at zero location");
  double hi = 4.0;
  while (mean_offdiag(hi) < target) {
    hi *= 2.0;
    if (hi > 64.0)
      throw CalibrationError("calibrate_mu_B: failed to bracket the target mean off-diagonal");
  }
  for (int it = 0; it < 50; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mean_offdiag(mid) <= target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Matrix sample_psi_block(const ChoiceStructure& sc, int k, double mu_B, const PsiPriorConfig& cfg,
                        std::int64_t draws, std::uint64_t seed, WorkerPool* pool) {
  if (k < 0 || k >= sc.K) throw DimensionError("sample_psi_block: choice index out of range");
  if (draws < 1) throw DomainError("sample_psi_block: draws must be positive");
  Matrix out(draws, sc.n_k[k]);
  over_chunks(pool, draws, kGrain, [&](std::int64_t, std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      Rng rng = make_stream(seed, StreamPurpose::calibrate_psi, static_cast<std::uint64_t>(k),
                            static_cast<std::uint64_t>(i));
      const Vector raw = draw_raw(rng, sc.J[k], sc.p, cfg);
      out.row(i) =
          normalize_psi(psi_ddot_from_raw(raw, sc.J[k], sc.p, mu_B, cfg.sigma_B), sc.J[k])
              .transpose();
    }
  });
  return out;
}

void fit_angle_element(const Eigen::Ref<const Vector>& xi_draws, double& mu, double& tau,
                       double& eta) {
  const auto count = xi_draws.size();
  if (count < 10) throw CalibrationError("fit_angle_element: too few draws to fit");
  const double m0 = xi_draws.mean();
  const double s0 = std::sqrt((xi_draws.array() - m0).square().sum() / count);
  if (!(s0 > 0.0)) throw CalibrationError("fit_angle_element: draws are degenerate");

  // Negative mean log-likelihood over (mu, log tau, w) with
  // eta = 0.1 + 1.8 / (1 + exp(-w)) keeping the power inside (0.1, 1.9).
  const auto objective = [&](const Vector& par) {
    const double loc = par[0];
    const double scale = std::exp(par[1]);
    const double power = 0.1 + 1.8 / (1.0 + std::exp(-par[2]));
    const double w2 = 2.0 - power;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < count; ++i) {
      const double x = (xi_draws[i] - loc) / scale;
      double t, log_d1;
      if (x >= 0.0) {
        const double u = std::log1p(x);
        t = std::expm1(power * u) / power;
        log_d1 = (power - 1.0) * u;
      } else {
        const double v = std::log1p(-x);
        t = -std::expm1(w2 * v) / w2;
        log_d1 = (1.0 - power) * v;
      }
      acc += 0.5 * t * t - log_d1;
    }
    return acc / static_cast<double>(count) + par[1];
  };

  Vector start(3);
  start << m0, std::log(s0), 0.0;
  Vector step(3);
  step << 0.25 * s0, 0.25, 0.5;
  const NelderMeadResult res = nelder_mead(objective, start, step, 400, 1e-9);
  mu = res.x[0];
  tau = std::exp(res.x[1]);
  eta = 0.1 + 1.8 / (1.0 + std::exp(-res.x[2]));
  if (eta < 0.105 || eta > 1.895)
    throw CalibrationError("fit_angle_element: fitted power " + std::to_string(eta) +
                           " pinned at the search boundary");
}

AnglePrior calibrate_angle_prior(const ChoiceStructure& sc, const PsiPriorConfig& cfg,
                                 std::int64_t draws, std::uint64_t seed, WorkerPool* pool) {
  AnglePrior prior;
  prior.seed = seed;
  prior.draws = draws;
  prior.mu_B = calibrate_mu_B(sc, cfg, draws, seed, pool);
  prior.mu.resize(sc.K);
  prior.tau.resize(sc.K);
  prior.eta.resize(sc.K);
  for (int k = 0; k < sc.K; ++k) {
    const Matrix psi = sample_psi_block(sc, k, prior.mu_B, cfg, draws, seed, pool);
    const int n_angles = sc.angles_k(k);
    Matrix xi(draws, n_angles);
    over_chunks(pool, draws, kGrain, [&](std::int64_t, std::int64_t lo, std::int64_t hi) {
      for (std::int64_t i = lo; i < hi; ++i)
        xi.row(i) =
            angles_to_real(spherical_inverse(psi.row(i).transpose(), sc.J[k]), sc.J[k]).transpose();
    });
    prior.mu[k].resize(n_angles);
    prior.tau[k].resize(n_angles);
    prior.eta[k].resize(n_angles);
    const auto fit_one = [&](std::int64_t l) {
      fit_angle_element(xi.col(l), prior.mu[k][l], prior.tau[k][l], prior.eta[k][l]);
    };
    if (pool) {
      pool->for_each(0, n_angles, 1, fit_one);
    } else {
      for (int l = 0; l < n_angles; ++l) fit_one(l);
    }
  }
  return prior;
}

double angle_log_density_xi(double xi, double mu, double tau, double eta) {
  const double x = (xi - mu) / tau;
  double t, log_d1;
  if (x >= 0.0) {
    const double u = std::log1p(x);
    t = (eta == 0.0) ? u : std::expm1(eta * u) / eta;
    log_d1 = (eta - 1.0) * u;
  } else {
    const double v = std::log1p(-x);
    const double w = 2.0 - eta;
    t = (w == 0.0) ? -v : -std::expm1(w * v) / w;
    log_d1 = (1.0 - eta) * v;
  }
  return -kLogSqrt2Pi - 0.5 * t * t + log_d1 - std::log(tau);
}

double angle_score_xi(double xi, double mu, double tau, double eta) {
  const double x = (xi - mu) / tau;
  const YeoJohnsonEval<double> yj = yeo_johnson(x, eta);
  // t'' / t' collapses to (eta - 1) / (1 + |x|) on both branches.
  const double ratio = (eta - 1.0) / (1.0 + std::abs(x));
  return (ratio - yj.value * yj.d1) / tau;
}

double angle_cdf_xi(double xi, double mu, double tau, double eta) {
  return norm_cdf(yeo_johnson_value((xi - mu) / tau, eta));
}

double angle_log_density_kappa(double kappa, double upper, double mu, double tau, double eta) {
  if (!(kappa > 0.0) || !(kappa < upper))
    throw DomainError("angle_log_density_kappa: angle outside (0, upper)");
  const double xi = norm_quantile(kappa / upper);
  return angle_log_density_xi(xi, mu, tau, eta) - std::log(upper) - log_norm_pdf(xi);
}

double angle_cdf_kappa(double kappa, double upper, double mu, double tau, double eta) {
  if (kappa <= 0.0) return 0.0;
  if (kappa >= upper) return 1.0;
  return angle_cdf_xi(norm_quantile(kappa / upper), mu, tau, eta);
}

double log_prior(const ChoiceStructure& sc, const Eigen::Ref<const Vector>& theta,
                 const AnglePrior& prior) {
  if (theta.size() != sc.theta_dim) throw DimensionError("log_prior: theta length mismatch");
  check_prior_shape(sc, prior, "log_prior");
  double out = -0.5 * sc.r * std::log(2.0 * std::numbers::pi * 0.1) -
               5.0 * theta.head(sc.r).squaredNorm();
  for (int k = 0; k < sc.K; ++k) {
    for (int l = 0; l < sc.angles_k(k); ++l) {
      out += angle_log_density_xi(theta[sc.r + sc.angle_offset[k] + l], prior.mu[k][l],
                                  prior.tau[k][l], prior.eta[k][l]);
    }
  }
  return out;
}

Vector grad_log_prior(const ChoiceStructure& sc, const Eigen::Ref<const Vector>& theta,
                      const AnglePrior& prior) {
  if (theta.size() != sc.theta_dim) throw DimensionError("grad_log_prior: theta length mismatch");
  check_prior_shape(sc, prior, "grad_log_prior");
  Vector g(sc.theta_dim);
  g.head(sc.r) = -10.0 * theta.head(sc.r);
  for (int k = 0; k < sc.K; ++k) {
    for (int l = 0; l < sc.angles_k(k); ++l) {
      const int idx = sc.r + sc.angle_offset[k] + l;
      g[idx] = angle_score_xi(theta[idx], prior.mu[k][l], prior.tau[k][l], prior.eta[k][l]);
    }
  }
  return g;
}

double log_prior_kappa(const ChoiceStructure& sc, const Eigen::Ref<const Vector>& kappa,
                       const AnglePrior& prior) {
  if (kappa.size() != sc.n_angles) throw DimensionError("log_prior_kappa: angle length mismatch");
  check_prior_shape(sc, prior, "log_prior_kappa");
  double out = 0.0;
  for (int k = 0; k < sc.K; ++k) {
    for (int l = 0; l < sc.angles_k(k); ++l) {
      const double upper = angle_upper_bound(l, sc.n_k[k], sc.J[k]);
      out += angle_log_density_kappa(kappa[sc.angle_offset[k] + l], upper, prior.mu[k][l],
                                     prior.tau[k][l], prior.eta[k][l]);
    }
  }
  return out;
}

std::string serialize_prior(const AnglePrior& prior) {
  nlohmann::json j;
  j["seed"] = prior.seed;
  j["draws"] = prior.draws;
  j["mu_B"] = prior.mu_B;
  auto elems = nlohmann::json::array();
  for (std::size_t k = 0; k < prior.mu.size(); ++k) {
    for (Eigen::Index l = 0; l < prior.mu[k].size(); ++l) {
      elems.push_back({{"choice", k},
                       {"element", l},
                       {"mu", prior.mu[k][l]},
                       {"tau", prior.tau[k][l]},
                       {"eta", prior.eta[k][l]}});
    }
  }
  j["elements"] = std::move(elems);
  return j.dump(2);
}

AnglePrior parse_prior(const std::string& text, const ChoiceStructure& sc) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("parse_prior: ") + e.what());
  }
  AnglePrior prior;
  try {
    prior.seed = j.at("seed").get<std::uint64_t>();
    prior.draws = j.at("draws").get<std::int64_t>();
    prior.mu_B = j.at("mu_B").get<double>();
    prior.mu.resize(sc.K);
    prior.tau.resize(sc.K);
    prior.eta.resize(sc.K);
    std::vector<std::vector<bool>> seen(sc.K);
    for (int k = 0; k < sc.K; ++k) {
      const int n_angles = sc.angles_k(k);
      prior.mu[k].resize(n_angles);
      prior.tau[k].resize(n_angles);
      prior.eta[k].resize(n_angles);
      seen[k].assign(n_angles, false);
    }
    for (const auto& e : j.at("elements")) {
      const int k = e.at("choice").get<int>();
      if (k < 0 || k >= sc.K) throw ParseError("parse_prior: choice index out of range");
      const int l = e.at("element").get<int>();
      if (l < 0 || l >= sc.angles_k(k)) throw ParseError("parse_prior: element index out of range");
      if (seen[k][l]) throw ParseError("parse_prior: duplicate element entry");
      seen[k][l] = true;
      prior.mu[k][l] = e.at("mu").get<double>();
      prior.tau[k][l] = e.at("tau").get<double>();
      prior.eta[k][l] = e.at("eta").get<double>();
      if (!(prior.tau[k][l] > 0.0)) throw ParseError("parse_prior: tau must be positive");
      if (!(prior.eta[k][l] > 0.0) || !(prior.eta[k][l] < 2.0))
        throw ParseError("parse_prior: eta must lie in (0, 2)");
    }
    for (int k = 0; k < sc.K; ++k) {
      for (int l = 0; l < sc.angles_k(k); ++l) {
        if (!seen[k][l]) throw ParseError("parse_prior: missing element entry");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("parse_prior: ") + e.what());
  }
  return prior;
}

}  // namespace mvmnp
