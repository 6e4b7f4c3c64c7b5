#include "mvmnp/dgp.hpp"

#include "mvmnp/covariance.hpp"
#include "mvmnp/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace mvmnp {

Matrix inverse_wishart(double df, const Matrix& scale, Rng& rng) {
  const int dim = static_cast<int>(scale.rows());
  if (scale.cols() != dim || dim < 1)
    throw DimensionError("inverse_wishart: scale must be square and non-empty");
  if (!(df > dim - 1))
    throw DomainError("inverse_wishart: degrees of freedom " + std::to_string(df) +
                      " must exceed dim - 1 = " + std::to_string(dim - 1));

  const Matrix scale_inv = spd_inverse(chol_spd(scale));
  const Matrix l_v = chol_spd(scale_inv).L;
  Matrix a = Matrix::Zero(dim, dim);
  for (int j = 0; j < dim; ++j) {
    a(j, j) = std::sqrt(2.0 * rng.gamma(0.5 * (df - j)));
    for (int i = j + 1; i < dim; ++i) a(i, j) = rng.normal();
  }
  // M M^T ~ Wishart(df, scale^{-1}); the draw is its inverse.
  const Matrix m = l_v * a;
  const Matrix m_inv =
      m.triangularView<Eigen::Lower>().solve(Matrix::Identity(dim, dim));
  Matrix out = m_inv.transpose() * m_inv;
  out = 0.5 * (out + out.transpose()).eval();
  return out;
}

SyntheticData generate_synthetic(const ChoiceStructure& sc, int n_obs, std::uint64_t seed,
                                 bool keep_noise) {
  if (n_obs < 1) throw DomainError("generate_synthetic: n_obs must be positive");
  const int J = sc.J_total;

  SyntheticData out;
  Rng par = make_stream(seed, StreamPurpose::dgp, 0, 0);
  Vector beta_raw(sc.r);
  for (int k = 0; k < sc.K; ++k) {
    int pos = sc.beta_offset[k];
    for (int j = 0; j < sc.J[k]; ++j) beta_raw(pos++) = par.uniform(-0.5, 0.0);
    for (int j = 0; j < sc.J[k] * sc.n_d; ++j) beta_raw(pos++) = 0.25 * par.normal();
    for (int c = 0; c < sc.n_a; ++c)
      beta_raw(pos++) = (c == 0) ? -0.3 * (k + 1) : 0.25 * par.normal();
  }
  const Matrix equi = 0.5 * (Matrix::Identity(J, J) + Matrix::Ones(J, J));
  const Matrix sigma_raw = inverse_wishart(J + 3.0, equi, par);
  const NormalizedCovariance nc = normalize_covariance(sc, sigma_raw);

  out.truth.beta_raw = beta_raw;
  out.truth.sigma_raw = sigma_raw;
  out.truth.scale = nc.scale;
  out.truth.sigma = nc.sigma;
  out.truth.beta = beta_raw;
  for (int k = 0; k < sc.K; ++k)
    out.truth.beta.segment(sc.beta_offset[k], sc.r_k[k]) /= nc.scale(k);

  Dataset& data = out.data;
  data.N = n_obs;
  data.y = IntMatrix::Zero(n_obs, sc.K);
  data.x_d = Matrix::Zero(n_obs, sc.n_d);
  data.x_a.resize(static_cast<std::size_t>(sc.K));
  for (int k = 0; k < sc.K; ++k)
    data.x_a[k] = RowMatrix::Zero(n_obs, (sc.J[k] + 1) * sc.n_a);
  for (int i = 0; i < n_obs; ++i) {
    Rng rng = make_stream(seed, StreamPurpose::dgp, 1, static_cast<std::uint64_t>(i));
    for (int c = 0; c < sc.n_d; ++c) data.x_d(i, c) = rng.normal();
    for (int k = 0; k < sc.K; ++k)
      for (int c = 0; c < data.x_a[k].cols(); ++c) data.x_a[k](i, c) = rng.normal();
  }

  const DesignMatrix design = build_design(sc, data);
  const Matrix l_raw = chol_spd(sigma_raw).L;
  if (keep_noise) out.epsilon = Matrix::Zero(n_obs, J);
  Vector white(J), eps(J), z(J);
  for (int i = 0; i < n_obs; ++i) {
    Rng rng = make_stream(seed, StreamPurpose::dgp, 2, static_cast<std::uint64_t>(i));
    for (int j = 0; j < J; ++j) white(j) = rng.normal();
    eps.noalias() = l_raw.triangularView<Eigen::Lower>() * white;
    design.mean_into(i, beta_raw, z);
    z += eps;
    if (keep_noise) out.epsilon.row(i) = eps.transpose();
    for (int k = 0; k < sc.K; ++k)
      data.y(i, k) = outcome_from_utilities(z.segment(sc.util_offset[k], sc.J[k]));
  }
  return out;
}

SplitIndices split_dataset(int n_obs, double train_fraction, std::uint64_t seed) {
  if (n_obs < 2) throw DomainError("split_dataset: need at least two observations");
  if (!(train_fraction > 0.0) || !(train_fraction < 1.0))
    throw DomainError("split_dataset: train_fraction must lie in (0, 1)");
  // Guarded ceil: 0.8 * 5 lands epsilon above 4 in floating point.
  const int n_train =
      static_cast<int>(std::ceil(train_fraction * static_cast<double>(n_obs) - 1e-9));
  if (n_train < 1 || n_train >= n_obs)
    throw DomainError("split_dataset: train_fraction " + std::to_string(train_fraction) +
                      " leaves no train or no test rows at n_obs = " + std::to_string(n_obs));

  std::vector<int> order(static_cast<std::size_t>(n_obs));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_stream(seed, StreamPurpose::split);
  for (int j = 0; j < n_obs - 1; ++j) {
    const int span = n_obs - j;
    const int pick = j + std::min(static_cast<int>(rng.uniform() * span), span - 1);
    std::swap(order[j], order[pick]);
  }
  SplitIndices split;
  split.train.assign(order.begin(), order.begin() + n_train);
  split.test.assign(order.begin() + n_train, order.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

Dataset subset_dataset(const ChoiceStructure& sc, const Dataset& data,
                       const std::vector<int>& rows) {
  data.validate(sc);
  const int n = static_cast<int>(rows.size());
  if (n < 1) throw DimensionError("subset_dataset: empty row selection");
  for (int t = 0; t < n; ++t)
    if (rows[t] < 0 || rows[t] >= data.N)
      throw DimensionError("subset_dataset: row " + std::to_string(rows[t]) + " outside [0, " +
                           std::to_string(data.N) + ")");
  Dataset out;
  out.N = n;
  out.y = IntMatrix::Zero(n, sc.K);
  out.x_d = Matrix::Zero(n, sc.n_d);
  out.x_a.resize(static_cast<std::size_t>(sc.K));
  for (int k = 0; k < sc.K; ++k) out.x_a[k] = RowMatrix::Zero(n, (sc.J[k] + 1) * sc.n_a);
  for (int t = 0; t < n; ++t) {
    out.y.row(t) = data.y.row(rows[t]);
    out.x_d.row(t) = data.x_d.row(rows[t]);
    for (int k = 0; k < sc.K; ++k) out.x_a[k].row(t) = data.x_a[k].row(rows[t]);
  }
  return out;
}

}  // namespace mvmnp
