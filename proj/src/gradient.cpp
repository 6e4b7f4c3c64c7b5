#include "mvmnp/gradient.hpp"

#include "mvmnp/covariance.hpp"
#include "mvmnp/spherical.hpp"

#include <algorithm>
#include <cmath>
#include <string>
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

void check_subsample(const Matrix& z, const DesignMatrix& design, const ChoiceStructure& sc,
                     const std::vector<int>& subsample, std::int64_t n_total,
                     const char* where) {
  if (subsample.empty()) throw DomainError(std::string(where) + ": empty subsample");
  if (n_total < static_cast<std::int64_t>(subsample.size()))
    throw DomainError(std::string(where) + ": population smaller than the subsample");
  if (z.rows() != sc.J_total) throw DimensionError(std::string(where) + ": z must have J rows");
  for (const int i : subsample)
    if (i < 0 || i >= design.N || i >= z.cols())
      throw DimensionError(std::string(where) + ": subsample index out of range");
}

}  // namespace

double log_g(const ChoiceStructure& sc, const DesignMatrix& design,
             const Eigen::Ref<const Vector>& theta, const Matrix& z,
             const std::vector<int>& subsample, std::int64_t n_total, const AnglePrior& prior) {
  if (theta.size() != sc.theta_dim) throw DimensionError("log_g: theta must have length r + n - K");
  check_subsample(z, design, sc, subsample, n_total, "log_g");
  const Vector beta = theta.head(sc.r);
  const FactorCovariance fc = assemble_covariance(sc, theta.tail(sc.n - sc.K));
  const CholeskyFactor chol = chol_spd(fc.sigma);

  double acc = 0.0;
  Vector mu(sc.J_total);
  for (const int i : subsample) {
    design.mean_into(i, beta, mu);
    acc += log_mvn_density(z.col(i), mu, chol);
  }
  const double scale = static_cast<double>(n_total) / static_cast<double>(subsample.size());
  return log_prior(sc, theta, prior) + scale * acc;
}

Vector grad_log_g(const ChoiceStructure& sc, const DesignMatrix& design,
                  const Eigen::Ref<const Vector>& theta, const Matrix& z,
                  const std::vector<int>& subsample, std::int64_t n_total,
                  const AnglePrior& prior, WorkerPool* pool) {
  if (theta.size() != sc.theta_dim)
    throw DimensionError("grad_log_g: theta must have length r + n - K");
  check_subsample(z, design, sc, subsample, n_total, "grad_log_g");

  const int J = sc.J_total;
  const Vector beta = theta.head(sc.r);
  const auto xi = theta.tail(sc.n - sc.K);
  const Vector kappa = angles_from_unconstrained(sc, xi);
  const FactorCovariance fc = assemble_covariance_from_angles(sc, kappa);
  const Matrix Q = spd_inverse(chol_spd(fc.sigma));

  const std::int64_t m_sub = static_cast<std::int64_t>(subsample.size());
  const double scale = static_cast<double>(n_total) / static_cast<double>(m_sub);

  // Likelihood pieces over the subsample: sum_i X_i^T u_i and sum_i u_i u_i^T.
  const std::int64_t chunks = chunk_count(m_sub);
  std::vector<Vector> xtu_partial(chunks);
  std::vector<Matrix> uu_partial(chunks);
  over_chunks(pool, m_sub, [&](std::int64_t c, std::int64_t lo, std::int64_t hi) {
    Vector xtu = Vector::Zero(sc.r);
    Matrix uu = Matrix::Zero(J, J);
    Vector mu(J), u(J);
    for (std::int64_t t = lo; t < hi; ++t) {
      const int i = subsample[t];
      design.mean_into(i, beta, mu);
      mu = z.col(i) - mu;
      u.noalias() = Q * mu;
      design.add_transpose_apply(i, u, xtu);
      uu.noalias() += u * u.transpose();
    }
    xtu_partial[c] = std::move(xtu);
    uu_partial[c] = std::move(uu);
  });
  Vector xtu = Vector::Zero(sc.r);
  Matrix s_u = Matrix::Zero(J, J);
  for (std::int64_t c = 0; c < chunks; ++c) {
    xtu += xtu_partial[c];
    s_u += uu_partial[c];
  }

  Vector grad = grad_log_prior(sc, theta, prior);
  grad.head(sc.r) += scale * xtu;

  // Batched covariance score (1/2) tr[(s_u - M Q) dSigma] chained through
  // psi_k = (vec(B_k), d_k), the chart Jacobian, and dkappa/dxi.
  const Matrix mmat = s_u - static_cast<double>(m_sub) * Q;
  const Matrix g_B = mmat * fc.B;  // J x p
  for (int k = 0; k < sc.K; ++k) {
    const int Jk = sc.J[k];
    const int nk = sc.n_k[k];
    const int uoff = sc.util_offset[k];
    Vector g_psi(nk);
    for (int c = 0; c < sc.p; ++c)
      for (int j = 0; j < Jk; ++j) g_psi[c * Jk + j] = g_B(uoff + j, c);
    for (int j = 0; j < Jk; ++j)
      g_psi[sc.p * Jk + j] = fc.d[uoff + j] * mmat(uoff + j, uoff + j);

    const auto kappa_k = kappa.segment(sc.angle_offset[k], nk - 1);
    const auto xi_k = xi.segment(sc.angle_offset[k], nk - 1);
    const Matrix jac = psi_jacobian(kappa_k, Jk);
    const Vector g_kappa = jac.transpose() * g_psi;
    grad.segment(sc.r + sc.angle_offset[k], nk - 1) +=
        scale * g_kappa.cwiseProduct(dkappa_dxi(xi_k, Jk));
  }
  return grad;
}

double log_g_identity(const ChoiceStructure& sc, const DesignMatrix& design,
                      const Eigen::Ref<const Vector>& beta, const Matrix& z,
                      const std::vector<int>& subsample, std::int64_t n_total) {
  if (beta.size() != sc.r) throw DimensionError("log_g_identity: beta must have length r");
  check_subsample(z, design, sc, subsample, n_total, "log_g_identity");
  double acc = 0.0;
  Vector mu(sc.J_total);
  for (const int i : subsample) {
    design.mean_into(i, beta, mu);
    mu = z.col(i) - mu;
    acc += -0.5 * mu.squaredNorm();
  }
  const double scale = static_cast<double>(n_total) / static_cast<double>(subsample.size());
  return -5.0 * beta.squaredNorm() + scale * acc;
}

Vector grad_log_g_identity(const ChoiceStructure& sc, const DesignMatrix& design,
                           const Eigen::Ref<const Vector>& beta, const Matrix& z,
                           const std::vector<int>& subsample, std::int64_t n_total,
                           WorkerPool* pool) {
  if (beta.size() != sc.r) throw DimensionError("grad_log_g_identity: beta must have length r");
  check_subsample(z, design, sc, subsample, n_total, "grad_log_g_identity");
  const std::int64_t m_sub = static_cast<std::int64_t>(subsample.size());
  const std::int64_t chunks = chunk_count(m_sub);
  std::vector<Vector> partial(chunks);
  over_chunks(pool, m_sub, [&](std::int64_t c, std::int64_t lo, std::int64_t hi) {
    Vector xtu = Vector::Zero(sc.r);
    Vector mu(sc.J_total);
    for (std::int64_t t = lo; t < hi; ++t) {
      const int i = subsample[t];
      design.mean_into(i, beta, mu);
      mu = z.col(i) - mu;
      design.add_transpose_apply(i, mu, xtu);
    }
    partial[c] = std::move(xtu);
  });
  Vector xtu = Vector::Zero(sc.r);
  for (std::int64_t c = 0; c < chunks; ++c) xtu += partial[c];
  const double scale = static_cast<double>(n_total) / static_cast<double>(m_sub);
  return -10.0 * beta + scale * xtu;
}

}  // namespace mvmnp
