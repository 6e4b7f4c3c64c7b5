#include "mvmnp/latent.hpp"

#include <cmath>
#include <limits>

namespace mvmnp {

std::pair<double, double> conditional_moments(int g, const Eigen::Ref<const Vector>& mu,
                                              const Eigen::Ref<const Matrix>& Q,
                                              const Eigen::Ref<const Vector>& z) {
  const double qgg = Q(g, g);
  const double cross = Q.row(g).dot(z - mu) - qgg * (z[g] - mu[g]);
  return {mu[g] - cross / qgg, 1.0 / std::sqrt(qgg)};
}

namespace {

// Draws coordinate g from its full conditional restricted to (lower, upper),
// where at most one bound is finite.
double draw_conditional(int g, const Eigen::Ref<const Vector>& mu,
                        const Eigen::Ref<const Matrix>& Q, const Eigen::Ref<const Vector>& z,
                        double lower,
                        double upper, Rng& rng) {
  const auto [m, s] = conditional_moments(g, mu, Q, z);
  if (lower == -std::numeric_limits<double>::infinity() &&
      upper == std::numeric_limits<double>::infinity())
    return m + s * rng.normal();
  if (upper == std::numeric_limits<double>::infinity())
    return m + s * rng.truncated_normal_lower((lower - m) / s);
  return m + s * rng.truncated_normal_upper((upper - m) / s);
}

}  // namespace

void gibbs_sweep_truncated(const ChoiceStructure& sc, const Eigen::Ref<const IntVector>& y_row,
                           const Eigen::Ref<const Vector>& mu, const Eigen::Ref<const Matrix>& Q,
                           Eigen::Ref<Vector> z, Rng& rng) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (int k = 0; k < sc.K; ++k) {
    const int off = sc.util_offset[k];
    const int Jk = sc.J[k];
    const int yk = y_row[k];
    for (int j = 0; j < Jk; ++j) {
      const int g = off + j;
      double lower = -inf, upper = inf;
      if (yk == 0) {
        upper = 0.0;
      } else if (j == yk - 1) {
        lower = 0.0;
        for (int h = 0; h < Jk; ++h)
          if (h != j && z[off + h] > lower) lower = z[off + h];
      } else {
        upper = z[off + yk - 1];
      }
      z[g] = draw_conditional(g, mu, Q, z, lower, upper, rng);
    }
  }
}

void gibbs_sweep_gaussian(const Eigen::Ref<const Vector>& mu, const Eigen::Ref<const Matrix>& Q,
                          Eigen::Ref<Vector> z, Rng& rng) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (int g = 0; g < z.size(); ++g) z[g] = draw_conditional(g, mu, Q, z, -inf, inf, rng);
}

void init_latent(const ChoiceStructure& sc, const Eigen::Ref<const IntVector>& y_row,
                 const Eigen::Ref<const Vector>& mu, Eigen::Ref<Vector> z, Rng& rng) {
  z = mu;
  for (int k = 0; k < sc.K; ++k) {
    const int off = sc.util_offset[k];
    const int Jk = sc.J[k];
    const int yk = y_row[k];
    if (yk == 0) {
      for (int j = 0; j < Jk; ++j)
        if (z[off + j] > 0.0) z[off + j] = rng.truncated_normal_upper(0.0);
    } else {
      const int w = off + yk - 1;
      double bound = 0.0;
      for (int j = 0; j < Jk; ++j)
        if (off + j != w && z[off + j] > bound) bound = z[off + j];
      z[w] = rng.truncated_normal_lower(bound);
    }
  }
}

}  // namespace mvmnp
