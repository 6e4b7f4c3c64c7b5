#include "mvmnp/mcmc.hpp"

#include "mvmnp/covariance.hpp"
#include "mvmnp/latent.hpp"
#include "mvmnp/normal.hpp"
#include "mvmnp/spherical.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <vector>

namespace mvmnp {

namespace {

constexpr std::int64_t kGrain = 256;

template <typename F>
void over_chunks(WorkerPool* pool, std::int64_t count, const F& f) {
  if (pool) {
    pool->for_chunks(0, count, kGrain, f);
  } else {
    const std::int64_t chunks = (count + kGrain - 1) / kGrain;
    for (std::int64_t c = 0; c < chunks; ++c)
      f(c, c * kGrain, std::min(count, (c + 1) * kGrain));
  }
}

inline std::int64_t chunk_count(std::int64_t count) { return (count + kGrain - 1) / kGrain; }

// Normalizer of a normal proposal centered at x with scale s truncated to
// (0, upper).
inline double log_trunc_mass(double x, double s, double upper) {
  return std::log(norm_cdf((upper - x) / s) - norm_cdf(-x / s));
}

}  // namespace

CrossMoments build_cross_moments(const ChoiceStructure& sc, const DesignMatrix& design,
                                 WorkerPool* pool) {
  const int J = sc.J_total;
  CrossMoments cm;
  cm.J = J;
  cm.row_choice.resize(J);
  for (int k = 0; k < sc.K; ++k)
    for (int j = 0; j < sc.J[k]; ++j) cm.row_choice[sc.util_offset[k] + j] = k;

  const std::int64_t chunks = chunk_count(design.N);
  std::vector<std::vector<Matrix>> partial(chunks);
  over_chunks(pool, design.N, [&](std::int64_t c, std::int64_t lo, std::int64_t hi) {
    auto& acc = partial[c];
    acc.resize(static_cast<std::size_t>(J) * J);
    for (int a = 0; a < J; ++a)
      for (int b = 0; b < J; ++b)
        acc[a * J + b] = Matrix::Zero(sc.r_k[cm.row_choice[a]], sc.r_k[cm.row_choice[b]]);
    for (std::int64_t i = lo; i < hi; ++i) {
      for (int k = 0; k < sc.K; ++k) {
        const Matrix& xk = design.at(static_cast<int>(i), k);
        for (int l = 0; l < sc.K; ++l) {
          const Matrix& xl = design.at(static_cast<int>(i), l);
          for (int a = 0; a < sc.J[k]; ++a)
            for (int b = 0; b < sc.J[l]; ++b)
              acc[(sc.util_offset[k] + a) * J + sc.util_offset[l] + b].noalias() +=
                  xk.row(a).transpose() * xl.row(b);
        }
      }
    }
  });

  cm.T.resize(static_cast<std::size_t>(J) * J);
  for (int a = 0; a < J; ++a)
    for (int b = 0; b < J; ++b)
      cm.T[a * J + b] = Matrix::Zero(sc.r_k[cm.row_choice[a]], sc.r_k[cm.row_choice[b]]);
  for (std::int64_t c = 0; c < chunks; ++c)
    for (int ab = 0; ab < J * J; ++ab) cm.T[ab] += partial[c][ab];
  return cm;
}

Matrix coefficient_precision(const ChoiceStructure& sc, const CrossMoments& cm, const Matrix& Q) {
  Matrix prec = 10.0 * Matrix::Identity(sc.r, sc.r);
  const int J = cm.J;
  for (int a = 0; a < J; ++a) {
    const int ka = cm.row_choice[a];
    for (int b = 0; b < J; ++b) {
      const int kb = cm.row_choice[b];
      prec.block(sc.beta_offset[ka], sc.beta_offset[kb], sc.r_k[ka], sc.r_k[kb]).noalias() +=
          Q(a, b) * cm.T[a * J + b];
    }
  }
  return prec;
}

McmcResult run_mcmc(const ChoiceStructure& sc, const Dataset& data, const DesignMatrix& design,
                    const AnglePrior& prior, const McmcConfig& cfg, WorkerPool* pool) {
  if (cfg.iterations < 1) throw DomainError("run_mcmc: iterations must be positive");
  if (cfg.burn_in < 0 || cfg.burn_in >= cfg.iterations)
    throw DomainError("run_mcmc: burn_in must lie in [0, iterations)");
  if (cfg.thin < 1) throw DomainError("run_mcmc: thin must be positive");
  if (cfg.block_size < 1) throw DomainError("run_mcmc: block_size must be positive");
  if (!(cfg.initial_step > 0.0)) throw DomainError("run_mcmc: initial_step must be positive");

  const bool with_data = !cfg.likelihood_disabled;
  const int J = sc.J_total;
  const int na = sc.n_angles;
  const std::int64_t N = with_data ? data.N : 0;
  if (with_data) {
    data.validate(sc);
    if (design.N != data.N) throw DimensionError("run_mcmc: design and data sizes differ");
  }

  // Per-angle chart bounds and prior hyperparameters flattened for the
  // proposal loop.
  if (static_cast<int>(prior.mu.size()) != sc.K)
    throw DimensionError("run_mcmc: prior does not match the choice structure");
  Vector upper(na), pr_mu(na), pr_tau(na), pr_eta(na);
  for (int k = 0; k < sc.K; ++k) {
    if (prior.mu[k].size() != sc.angles_k(k) || prior.tau[k].size() != sc.angles_k(k) ||
        prior.eta[k].size() != sc.angles_k(k))
      throw DimensionError("run_mcmc: prior does not match the choice structure");
    for (int l = 0; l < sc.angles_k(k); ++l) {
      const int g = sc.angle_offset[k] + l;
      upper[g] = angle_upper_bound(l, sc.n_k[k], sc.J[k]);
      pr_mu[g] = prior.mu[k][l];
      pr_tau[g] = prior.tau[k][l];
      pr_eta[g] = prior.eta[k][l];
    }
  }

  // State.
  Vector beta = Vector::Zero(sc.r);
  Vector kappa = 0.5 * upper;  // chart midpoints
  Vector prior_term(na);
  for (int g = 0; g < na; ++g)
    prior_term[g] = angle_log_density_kappa(kappa[g], upper[g], pr_mu[g], pr_tau[g], pr_eta[g]);

  Matrix Q;
  double log_det = 0.0;
  if (with_data) {
    const FactorCovariance fc = assemble_covariance_from_angles(sc, kappa);
    const CholeskyFactor chol = chol_spd(fc.sigma);
    Q = spd_inverse(chol);
    log_det = chol.log_det;
  }

  Matrix z;  // column i holds observation i's stacked utilities
  IntMatrix yT;
  if (with_data) {
    z.resize(J, N);
    yT = data.y.transpose();
    over_chunks(pool, N, [&](std::int64_t, std::int64_t lo, std::int64_t hi) {
      Vector mu(J);
      for (std::int64_t i = lo; i < hi; ++i) {
        Rng rng = make_stream(cfg.seed, StreamPurpose::latent_init, 0, static_cast<std::uint64_t>(i));
        design.mean_into(static_cast<int>(i), beta, mu);
        init_latent(sc, yT.col(i), mu, z.col(i), rng);
      }
    });
  }

  CrossMoments cm;
  if (with_data) cm = build_cross_moments(sc, design, pool);

  Matrix s_eta = Matrix::Zero(J, J);
  double trace_term = 0.0;
  const std::int64_t chunks = with_data ? chunk_count(N) : 0;
  std::vector<Matrix> s_eta_partial(chunks);
  std::vector<Vector> rhs_partial(chunks);

  Vector step = Vector::Constant(na, cfg.initial_step);
  std::vector<std::int64_t> adapt_accept(na, 0);
  std::vector<std::int64_t> post_accept(na, 0);
  std::vector<int> order(na);
  for (int g = 0; g < na; ++g) order[g] = g;

  const std::int64_t stored_total = (cfg.iterations - cfg.burn_in + cfg.thin - 1) / cfg.thin;
  McmcResult out;
  out.beta.resize(stored_total, sc.r);
  out.kappa.resize(stored_total, na);

  Vector kappa_prop = kappa;
  for (std::int64_t t = 0; t < cfg.iterations; ++t) {
    // 1. Latent utilities.
    if (with_data) {
      over_chunks(pool, N, [&](std::int64_t, std::int64_t lo, std::int64_t hi) {
        Vector mu(J);
        for (std::int64_t i = lo; i < hi; ++i) {
          Rng rng = make_stream(cfg.seed, StreamPurpose::latent_sweep,
                                static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(i));
          design.mean_into(static_cast<int>(i), beta, mu);
          gibbs_sweep_truncated(sc, yT.col(i), mu, Q, z.col(i), rng);
        }
      });
    }

    // 2. Coefficients.
    {
      Rng rng = make_stream(cfg.seed, StreamPurpose::beta_draw, static_cast<std::uint64_t>(t));
      Vector nu(sc.r);
      for (int j = 0; j < sc.r; ++j) nu[j] = rng.normal();
      if (with_data) {
        over_chunks(pool, N, [&](std::int64_t c, std::int64_t lo, std::int64_t hi) {
          Vector acc = Vector::Zero(sc.r);
          Vector qz(J);
          for (std::int64_t i = lo; i < hi; ++i) {
            qz.noalias() = Q * z.col(i);
            design.add_transpose_apply(static_cast<int>(i), qz, acc);
          }
          rhs_partial[c] = acc;
        });
        Vector rhs = Vector::Zero(sc.r);
        for (std::int64_t c = 0; c < chunks; ++c) rhs += rhs_partial[c];
        const Matrix prec = coefficient_precision(sc, cm, Q);
        Eigen::LLT<Matrix> llt(prec);
        if (llt.info() != Eigen::Success)
          throw NumericalError("run_mcmc: coefficient precision is not positive definite");
        beta = llt.solve(rhs);
        beta += llt.matrixU().solve(nu);
      } else {
        beta = nu / std::sqrt(10.0);
      }
    }

    // 3. Residual cross moment for the N-free angle likelihood.
    if (with_data) {
      over_chunks(pool, N, [&](std::int64_t c, std::int64_t lo, std::int64_t hi) {
        Matrix acc = Matrix::Zero(J, J);
        Vector mu(J);
        for (std::int64_t i = lo; i < hi; ++i) {
          design.mean_into(static_cast<int>(i), beta, mu);
          mu = z.col(i) - mu;
          acc.noalias() += mu * mu.transpose();
        }
        s_eta_partial[c] = acc;
      });
      s_eta.setZero();
      for (std::int64_t c = 0; c < chunks; ++c) s_eta += s_eta_partial[c];
      trace_term = (Q.array() * s_eta.array()).sum();
    }

    // 4. Covariance angles, blocked random-walk MH.
    {
      Rng rng = make_stream(cfg.seed, StreamPurpose::angle_proposal, static_cast<std::uint64_t>(t));
      for (int g = na - 1; g > 0; --g) {
        const int j = std::min(g, static_cast<int>(rng.uniform() * (g + 1)));
        std::swap(order[g], order[j]);
      }
      for (int start = 0; start < na; start += cfg.block_size) {
        const int end = std::min(na, start + cfg.block_size);
        kappa_prop = kappa;
        double delta = 0.0;  // log target difference plus proposal correction
        bool in_support = true;
        for (int idx = start; idx < end; ++idx) {
          const int g = order[idx];
          const double s = step[g];
          const double a = (0.0 - kappa[g]) / s;
          const double b = (upper[g] - kappa[g]) / s;
          const double prop = kappa[g] + s * rng.truncated_normal_interval(a, b);
          kappa_prop[g] = prop;
          // The draw lies inside (0, upper) up to rounding; a boundary hit
          // has zero target density and is rejected outright.
          if (!(prop > 0.0) || !(prop < upper[g])) {
            in_support = false;
            break;
          }
          const double prior_prop =
              angle_log_density_kappa(prop, upper[g], pr_mu[g], pr_tau[g], pr_eta[g]);
          delta += prior_prop - prior_term[g];
          delta += log_trunc_mass(kappa[g], s, upper[g]) - log_trunc_mass(prop, s, upper[g]);
        }
        if (!in_support) continue;
        Matrix q_prop;
        double log_det_prop = 0.0, trace_prop = 0.0;
        if (with_data) {
          const FactorCovariance fc = assemble_covariance_from_angles(sc, kappa_prop);
          const CholeskyFactor chol = chol_spd(fc.sigma);
          q_prop = spd_inverse(chol);
          log_det_prop = chol.log_det;
          trace_prop = (q_prop.array() * s_eta.array()).sum();
          delta += -0.5 * (static_cast<double>(N) * (log_det_prop - log_det) +
                           (trace_prop - trace_term));
        }
        if (std::log(rng.uniform()) < delta) {
          for (int idx = start; idx < end; ++idx) {
            const int g = order[idx];
            kappa[g] = kappa_prop[g];
            prior_term[g] =
                angle_log_density_kappa(kappa[g], upper[g], pr_mu[g], pr_tau[g], pr_eta[g]);
            if (t < cfg.burn_in)
              ++adapt_accept[g];
            else
              ++post_accept[g];
          }
          if (with_data) {
            Q = std::move(q_prop);
            log_det = log_det_prop;
            trace_term = trace_prop;
          }
        }
      }
      if (t < cfg.burn_in && cfg.adapt_interval > 0 && (t + 1) % cfg.adapt_interval == 0) {
        for (int g = 0; g < na; ++g) {
          const double rate =
              static_cast<double>(adapt_accept[g]) / static_cast<double>(cfg.adapt_interval);
          if (rate > cfg.accept_high) step[g] *= cfg.step_factor;
          if (rate < cfg.accept_low) step[g] /= cfg.step_factor;
          step[g] = std::clamp(step[g], 1e-4, 10.0 * upper[g]);
          adapt_accept[g] = 0;
        }
      }
    }

    if (t >= cfg.burn_in && (t - cfg.burn_in) % cfg.thin == 0) {
      out.beta.row(out.stored) = beta.transpose();
      out.kappa.row(out.stored) = kappa.transpose();
      ++out.stored;
    }
    if (cfg.progress_interval > 0 && (t + 1) % cfg.progress_interval == 0)
      std::fprintf(stderr, "mcmc iteration %lld / %lld\n", static_cast<long long>(t + 1),
                   static_cast<long long>(cfg.iterations));
  }

  out.accept_rate = Vector::Zero(na);
  const double post_iters = static_cast<double>(cfg.iterations - cfg.burn_in);
  for (int g = 0; g < na; ++g)
    out.accept_rate[g] = static_cast<double>(post_accept[g]) / post_iters;
  out.step = step;
  return out;
}

}  // namespace mvmnp
