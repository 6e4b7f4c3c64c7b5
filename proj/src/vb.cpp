#include "mvmnp/vb.hpp"

#include "mvmnp/covariance.hpp"
#include "mvmnp/latent.hpp"
#include "mvmnp/rng.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <utility>
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

Matrix dense_factor(const VariationalParams& lam) {
  const int m = lam.m(), s = lam.s();
  Matrix C = Matrix::Zero(m, s);
  for (int j = 0; j < s; ++j)
    C.col(j).tail(m - j) = lam.vech_c.segment(vech_offset(m, j), m - j);
  return C;
}

// Draws a uniform M-subset into the first M slots of the persistent
// permutation; any starting permutation yields the uniform law.
void draw_subsample_prefix(std::vector<int>& order, int M, Rng& rng) {
  const int N = static_cast<int>(order.size());
  for (int j = 0; j < M; ++j) {
    const int pick = j + std::min(static_cast<int>(rng.uniform() * (N - j)), N - j - 1);
    std::swap(order[j], order[pick]);
  }
}

void check_lambda_shape(const VariationalParams& lam, const char* where) {
  const int m = lam.m();
  if (m < 1) throw DimensionError(std::string(where) + ": empty variational mean");
  if (lam.e.size() != m) throw DimensionError(std::string(where) + ": e must have length m");
  const int s = lam.s();
  if (vech_length(m, s) != static_cast<int>(lam.vech_c.size()))
    throw DimensionError(std::string(where) + ": vech storage does not fit any factor count");
}

}  // namespace

int VariationalParams::s() const {
  const int mm = m();
  const auto len = static_cast<int>(vech_c.size());
  int acc = 0;
  for (int j = 0; j <= mm; ++j) {
    if (acc == len) return j;
    acc += mm - j;
  }
  throw DimensionError("VariationalParams: vech storage does not fit any factor count");
}

VariationalParams VariationalParams::zero(int m, int s) {
  if (m < 1) throw DimensionError("VariationalParams: m must be positive");
  if (s < 0 || s > m) throw DimensionError("VariationalParams: factor count must lie in [0, m]");
  VariationalParams lam;
  lam.mu = Vector::Zero(m);
  lam.vech_c = Vector::Zero(vech_length(m, s));
  lam.e = Vector::Zero(m);
  return lam;
}

int vech_length(int m, int s) { return s * m - s * (s - 1) / 2; }

int vech_offset(int m, int j) { return j * m - j * (j - 1) / 2; }

Vector pack_lambda(const VariationalParams& lam) {
  check_lambda_shape(lam, "pack_lambda");
  Vector out(lam.mu.size() + lam.vech_c.size() + lam.e.size());
  out << lam.mu, lam.vech_c, lam.e;
  return out;
}

VariationalParams unpack_lambda(const Eigen::Ref<const Vector>& lambda, int m, int s) {
  if (m < 1 || s < 0 || s > m) throw DimensionError("unpack_lambda: invalid shape");
  const int len = vech_length(m, s);
  if (lambda.size() != 2 * m + len)
    throw DimensionError("unpack_lambda: packed length does not match (m, s)");
  VariationalParams lam;
  lam.mu = lambda.head(m);
  lam.vech_c = lambda.segment(m, len);
  lam.e = lambda.tail(m);
  return lam;
}

Vector reparameterize(const VariationalParams& lam, const Eigen::Ref<const Vector>& w,
                      const Eigen::Ref<const Vector>& eps) {
  check_lambda_shape(lam, "reparameterize");
  const int m = lam.m(), s = lam.s();
  if (w.size() != s) throw DimensionError("reparameterize: w must have length s");
  if (eps.size() != m) throw DimensionError("reparameterize: eps must have length m");
  Vector theta = lam.mu + lam.e.cwiseProduct(eps);
  for (int j = 0; j < s; ++j)
    theta.tail(m - j) += w[j] * lam.vech_c.segment(vech_offset(m, j), m - j);
  return theta;
}

Vector grad_log_q(const VariationalParams& lam, const Eigen::Ref<const Vector>& theta) {
  check_lambda_shape(lam, "grad_log_q");
  const int m = lam.m(), s = lam.s();
  if (theta.size() != m) throw DimensionError("grad_log_q: theta must have length m");
  const Vector e2 = lam.e.cwiseProduct(lam.e);
  if (!(e2.minCoeff() > 0.0))
    throw NumericalError("grad_log_q: a zero scale makes the covariance singular");
  const Vector v = theta - lam.mu;
  const Vector a = v.cwiseQuotient(e2);
  if (s == 0) return -a;
  const Matrix C = dense_factor(lam);
  Matrix G = Matrix::Identity(s, s);
  G.noalias() += C.transpose() * e2.cwiseInverse().asDiagonal() * C;
  const Vector u = Eigen::LLT<Matrix>(G).solve(C.transpose() * a);
  return -a + (C * u).cwiseQuotient(e2);
}

Vector dtheta_dlambda_vjp(const VariationalParams& lam, const Eigen::Ref<const Vector>& w,
                          const Eigen::Ref<const Vector>& eps,
                          const Eigen::Ref<const Vector>& v) {
  check_lambda_shape(lam, "dtheta_dlambda_vjp");
  const int m = lam.m(), s = lam.s();
  if (w.size() != s || eps.size() != m || v.size() != m)
    throw DimensionError("dtheta_dlambda_vjp: draw/cotangent shapes must match lambda");
  Vector out(2 * m + vech_length(m, s));
  out.head(m) = v;
  for (int j = 0; j < s; ++j)
    out.segment(m + vech_offset(m, j), m - j) = w[j] * v.tail(m - j);
  out.tail(m) = v.cwiseProduct(eps);
  return out;
}

Matrix dense_covariance(const VariationalParams& lam) {
  check_lambda_shape(lam, "dense_covariance");
  const Matrix C = dense_factor(lam);
  Matrix omega = C * C.transpose();
  omega.diagonal() += lam.e.cwiseProduct(lam.e);
  return omega;
}

AdadeltaState AdadeltaState::zero(int dim) {
  AdadeltaState st;
  st.grad_sq = Vector::Zero(dim);
  st.step_sq = Vector::Zero(dim);
  return st;
}

void adadelta_update(Vector& lambda, const Eigen::Ref<const Vector>& grad, AdadeltaState& state,
                     double rho, double eps) {
  if (grad.size() != lambda.size() || state.grad_sq.size() != lambda.size() ||
      state.step_sq.size() != lambda.size())
    throw DimensionError("adadelta_update: shapes must match lambda");
  if (!(rho > 0.0) || !(rho < 1.0)) throw DomainError("adadelta_update: rho must be in (0, 1)");
  if (!(eps > 0.0)) throw DomainError("adadelta_update: eps must be positive");
  state.grad_sq = rho * state.grad_sq + (1.0 - rho) * grad.cwiseProduct(grad);
  const Vector step = ((state.step_sq.array() + eps) / (state.grad_sq.array() + eps))
                          .sqrt()
                          .matrix()
                          .cwiseProduct(grad);
  lambda += step;
  state.step_sq = rho * state.step_sq + (1.0 - rho) * step.cwiseProduct(step);
}

VbState make_vb_state(const ChoiceStructure& sc, const Dataset& data, std::uint64_t seed,
                      WorkerPool* pool) {
  data.validate(sc);
  VbState st;
  st.yT = data.y.transpose();
  st.z.resize(sc.J_total, data.N);
  st.order.resize(data.N);
  std::iota(st.order.begin(), st.order.end(), 0);
  const Vector mu = Vector::Zero(sc.J_total);
  over_chunks(pool, data.N, [&](std::int64_t, std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      Rng rng =
          make_stream(seed, StreamPurpose::latent_init, 0, static_cast<std::uint64_t>(i));
      init_latent(sc, st.yT.col(i), mu, st.z.col(i), rng);
    }
  });
  return st;
}

GradientEstimate elbo_gradient_estimate(const ChoiceStructure& sc, const DesignMatrix& design,
                                        const AnglePrior* prior, const VariationalParams& lam,
                                        VbState& state, const VbConfig& cfg,
                                        std::int64_t iteration, WorkerPool* pool, bool identity) {
  check_lambda_shape(lam, "elbo_gradient_estimate");
  const int m = lam.m(), s = lam.s();
  const int expected = identity ? sc.r : sc.theta_dim;
  if (m != expected)
    throw DimensionError("elbo_gradient_estimate: lambda dimension does not match the model");
  if (!identity && prior == nullptr)
    throw DomainError("elbo_gradient_estimate: the general model requires an angle prior");
  const int J = sc.J_total;
  const std::int64_t N = design.N;
  if (state.z.rows() != J || state.z.cols() != N ||
      static_cast<std::int64_t>(state.order.size()) != N || state.yT.cols() != N ||
      state.yT.rows() != sc.K)
    throw DimensionError("elbo_gradient_estimate: state does not match the data");
  if (!(cfg.subsample_fraction > 0.0) || cfg.subsample_fraction > 1.0)
    throw DomainError("elbo_gradient_estimate: subsample fraction must be in (0, 1]");
  if (cfg.gibbs_steps < 1) throw DomainError("elbo_gradient_estimate: gibbs_steps must be >= 1");

  GradientEstimate ge;
  Rng zeta = make_stream(cfg.seed, StreamPurpose::vb_zeta, static_cast<std::uint64_t>(iteration));
  ge.w.resize(s);
  for (int j = 0; j < s; ++j) ge.w[j] = zeta.normal();
  ge.eps.resize(m);
  for (int j = 0; j < m; ++j) ge.eps[j] = zeta.normal();
  ge.theta = reparameterize(lam, ge.w, ge.eps);

  const int M = std::clamp(static_cast<int>(std::llround(cfg.subsample_fraction * N)), 1,
                           static_cast<int>(N));
  Rng sub_rng =
      make_stream(cfg.seed, StreamPurpose::vb_subsample, static_cast<std::uint64_t>(iteration));
  draw_subsample_prefix(state.order, M, sub_rng);
  ge.subsample.assign(state.order.begin(), state.order.begin() + M);

  const Vector beta = identity ? ge.theta : Vector(ge.theta.head(sc.r));
  Matrix Q;
  if (identity) {
    Q = Matrix::Identity(J, J);
  } else {
    const FactorCovariance fc = assemble_covariance(sc, ge.theta.tail(sc.n - sc.K));
    Q = spd_inverse(chol_spd(fc.sigma));
  }

  over_chunks(pool, M, [&](std::int64_t, std::int64_t lo, std::int64_t hi) {
    Vector mu(J);
    for (std::int64_t t = lo; t < hi; ++t) {
      const int i = ge.subsample[t];
      Rng rng = make_stream(cfg.seed, StreamPurpose::latent_sweep,
                            static_cast<std::uint64_t>(iteration), static_cast<std::uint64_t>(i));
      design.mean_into(i, beta, mu);
      for (int g = 0; g < cfg.gibbs_steps; ++g)
        gibbs_sweep_truncated(sc, state.yT.col(i), mu, Q, state.z.col(i), rng);
    }
  });

  Vector g_theta = identity
                       ? grad_log_g_identity(sc, design, ge.theta, state.z, ge.subsample, N, pool)
                       : grad_log_g(sc, design, ge.theta, state.z, ge.subsample, N, *prior, pool);
  g_theta -= grad_log_q(lam, ge.theta);
  ge.lambda_grad = dtheta_dlambda_vjp(lam, ge.w, ge.eps, g_theta);
  return ge;
}

Vector conditional_hit_rate(const ChoiceStructure& sc, const DesignMatrix& design,
                            const IntMatrix& y, const std::vector<int>& obs,
                            const VariationalParams& lam, int draws, std::uint64_t seed,
                            WorkerPool* pool, bool identity) {
  check_lambda_shape(lam, "conditional_hit_rate");
  const int m = lam.m(), s = lam.s();
  if (m != (identity ? sc.r : sc.theta_dim))
    throw DimensionError("conditional_hit_rate: lambda dimension does not match the model");
  if (draws < 1) throw DomainError("conditional_hit_rate: draws must be positive");
  if (obs.empty()) throw DomainError("conditional_hit_rate: empty observation set");
  if (y.rows() != design.N || y.cols() != sc.K)
    throw DimensionError("conditional_hit_rate: outcomes do not match the design");
  for (const int i : obs)
    if (i < 0 || i >= design.N)
      throw DimensionError("conditional_hit_rate: observation index out of range");

  const int J = sc.J_total;
  const auto n_obs = static_cast<std::int64_t>(obs.size());
  std::vector<IntMatrix> counts(sc.K);
  for (int k = 0; k < sc.K; ++k) counts[k] = IntMatrix::Zero(n_obs, sc.J[k] + 1);

  Vector w(s), eps(m);
  for (int d = 0; d < draws; ++d) {
    Rng zeta = make_stream(seed, StreamPurpose::vb_diag, 1, static_cast<std::uint64_t>(d));
    for (int j = 0; j < s; ++j) w[j] = zeta.normal();
    for (int j = 0; j < m; ++j) eps[j] = zeta.normal();
    const Vector theta = reparameterize(lam, w, eps);
    const Vector beta = identity ? theta : Vector(theta.head(sc.r));
    Matrix L = Matrix::Identity(J, J);
    if (!identity) {
      const FactorCovariance fc = assemble_covariance(sc, theta.tail(sc.n - sc.K));
      L = chol_spd(fc.sigma).L;
    }
    over_chunks(pool, n_obs, [&](std::int64_t, std::int64_t lo, std::int64_t hi) {
      Vector noise(J), zstar(J);
      for (std::int64_t t = lo; t < hi; ++t) {
        const int i = obs[t];
        Rng zn = make_stream(seed, StreamPurpose::vb_diag, static_cast<std::uint64_t>(2 + d),
                             static_cast<std::uint64_t>(i));
        for (int j = 0; j < J; ++j) noise[j] = zn.normal();
        design.mean_into(i, beta, zstar);
        zstar.noalias() += L * noise;
        for (int k = 0; k < sc.K; ++k)
          counts[k](t, outcome_from_utilities(zstar.segment(sc.util_offset[k], sc.J[k]))) += 1;
      }
    });
  }

  Vector rate = Vector::Zero(sc.K);
  for (int k = 0; k < sc.K; ++k) {
    std::int64_t hits = 0;
    for (std::int64_t t = 0; t < n_obs; ++t) {
      int mode = 0;
      for (int j = 1; j <= sc.J[k]; ++j)
        if (counts[k](t, j) > counts[k](t, mode)) mode = j;
      if (mode == y(obs[t], k)) ++hits;
    }
    rate[k] = static_cast<double>(hits) / static_cast<double>(n_obs);
  }
  return rate;
}

namespace {

VbResult run_vb_impl(const ChoiceStructure& sc, const Dataset& data, const DesignMatrix& design,
                     const AnglePrior* prior, const VbConfig& cfg, WorkerPool* pool,
                     bool identity) {
  if (cfg.iterations < 1) throw DomainError("run_vb: iterations must be positive");
  if (cfg.average_window < 1 || cfg.average_window > cfg.iterations)
    throw DomainError("run_vb: average_window must lie in [1, iterations]");
  if (!(cfg.rho > 0.0) || !(cfg.rho < 1.0)) throw DomainError("run_vb: rho must be in (0, 1)");
  if (!(cfg.adadelta_eps > 0.0)) throw DomainError("run_vb: adadelta_eps must be positive");
  if (!(cfg.divergence_bound > 0.0))
    throw DomainError("run_vb: divergence_bound must be positive");
  if (!(cfg.e_floor > 0.0)) throw DomainError("run_vb: e_floor must be positive");
  if (cfg.diag_interval > 0 && (cfg.diag_obs < 1 || cfg.diag_draws < 1))
    throw DomainError("run_vb: diagnostic subsample and draw counts must be positive");
  if (cfg.factors < 0) throw DomainError("run_vb: factors must be non-negative");
  data.validate(sc);
  if (design.N != data.N) throw DimensionError("run_vb: design and data sizes differ");
  if (!identity) {
    if (prior == nullptr || static_cast<int>(prior->mu.size()) != sc.K)
      throw DimensionError("run_vb: prior does not match the choice structure");
    for (int k = 0; k < sc.K; ++k)
      if (prior->mu[k].size() != sc.angles_k(k) || prior->tau[k].size() != sc.angles_k(k) ||
          prior->eta[k].size() != sc.angles_k(k))
        throw DimensionError("run_vb: prior does not match the choice structure");
  }

  const int m = identity ? sc.r : sc.theta_dim;
  const int s = std::max(0, std::min(cfg.factors, m - 1));

  VariationalParams lam = VariationalParams::zero(m, s);
  lam.e.setConstant(0.01);
  {
    Rng init = make_stream(cfg.seed, StreamPurpose::vb_init);
    for (int j = 0; j < lam.vech_c.size(); ++j) lam.vech_c[j] = 0.01 * init.normal();
  }

  VbState state = make_vb_state(sc, data, cfg.seed, pool);

  // Fixed diagnostic subsample, chosen once.
  std::vector<int> diag_set;
  if (cfg.diag_interval > 0) {
    std::vector<int> all(data.N);
    std::iota(all.begin(), all.end(), 0);
    Rng dr = make_stream(cfg.seed, StreamPurpose::vb_diag, 0);
    const int n_diag = std::min(cfg.diag_obs, data.N);
    draw_subsample_prefix(all, n_diag, dr);
    diag_set.assign(all.begin(), all.begin() + n_diag);
  }

  Vector lambda = pack_lambda(lam);
  AdadeltaState ada = AdadeltaState::zero(static_cast<int>(lambda.size()));
  Vector avg = Vector::Zero(lambda.size());
  std::int64_t avg_count = 0;
  VbResult out;
  out.identity = identity;

  const int e_begin = m + vech_length(m, s);
  for (std::int64_t t = 0; t < cfg.iterations; ++t) {
    const GradientEstimate ge =
        elbo_gradient_estimate(sc, design, prior, lam, state, cfg, t, pool, identity);
    adadelta_update(lambda, ge.lambda_grad, ada, cfg.rho, cfg.adadelta_eps);
    for (int j = 0; j < m; ++j) {
      double& ej = lambda[e_begin + j];
      if (std::abs(ej) < cfg.e_floor) ej = std::copysign(cfg.e_floor, ej == 0.0 ? 1.0 : ej);
    }
    for (int j = 0; j < lambda.size(); ++j)
      if (!(std::abs(lambda[j]) <= cfg.divergence_bound))
        throw DivergenceError("run_vb: |lambda[" + std::to_string(j) + "]| = " +
                              std::to_string(lambda[j]) + " at iteration " + std::to_string(t) +
                              " exceeds the divergence bound " +
                              std::to_string(cfg.divergence_bound));
    lam = unpack_lambda(lambda, m, s);
    if (t >= cfg.iterations - cfg.average_window) {
      avg += lambda;
      ++avg_count;
    }
    if (cfg.diag_interval > 0 && (t + 1) % cfg.diag_interval == 0) {
      VbDiagnosticPoint pt;
      pt.iteration = t + 1;
      pt.hit_rate = conditional_hit_rate(sc, design, data.y, diag_set, lam, cfg.diag_draws,
                                         cfg.seed, pool, identity);
      out.diagnostics.push_back(std::move(pt));
    }
    if (cfg.progress_interval > 0 && (t + 1) % cfg.progress_interval == 0)
      std::fprintf(stderr, "sga iteration %lld / %lld\n", static_cast<long long>(t + 1),
                   static_cast<long long>(cfg.iterations));
  }

  out.lambda = unpack_lambda(avg / static_cast<double>(avg_count), m, s);
  out.last = lam;
  return out;
}

}  // namespace

VbResult run_vb(const ChoiceStructure& sc, const Dataset& data, const DesignMatrix& design,
                const AnglePrior& prior, const VbConfig& cfg, WorkerPool* pool) {
  return run_vb_impl(sc, data, design, &prior, cfg, pool, false);
}

VbResult run_vb_identity(const ChoiceStructure& sc, const Dataset& data,
                         const DesignMatrix& design, const VbConfig& cfg, WorkerPool* pool) {
  return run_vb_impl(sc, data, design, nullptr, cfg, pool, true);
}

}  // namespace mvmnp
