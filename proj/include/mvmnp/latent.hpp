#pragma once

// Single-site Gibbs machinery for the latent utilities z_i ~ N(X_i beta,
// Sigma) truncated to the region the observed outcomes imply: category 0
// forces every utility in the choice non-positive, category j >= 1 forces
// utility j - 1 positive and largest in its choice. Conditionals use the
// precision form: given Q = Sigma^{-1},
//   mean_g | rest = mu_g - (1 / Q_gg) sum_{h != g} Q_gh (z_h - mu_h)
//   var_g  | rest = 1 / Q_gg.

#include "mvmnp/rng.hpp"
#include "mvmnp/types.hpp"

#include <utility>

namespace mvmnp {

// Conditional mean and standard deviation of coordinate g of N(mu, Q^{-1})
// given the other coordinates of z.
std::pair<double, double> conditional_moments(int g, const Eigen::Ref<const Vector>& mu,
                                              const Eigen::Ref<const Matrix>& Q,
                                              const Eigen::Ref<const Vector>& z);

// One systematic scan over the stacked utilities of a single observation,
// each coordinate drawn from its truncated full conditional.
void gibbs_sweep_truncated(const ChoiceStructure& sc, const Eigen::Ref<const IntVector>& y_row,
                           const Eigen::Ref<const Vector>& mu, const Eigen::Ref<const Matrix>& Q,
                           Eigen::Ref<Vector> z, Rng& rng);

// Unconstrained variant targeting the plain Gaussian; used where the
// truncation is deliberately absent (validation against closed forms).
void gibbs_sweep_gaussian(const Eigen::Ref<const Vector>& mu, const Eigen::Ref<const Matrix>& Q,
                          Eigen::Ref<Vector> z, Rng& rng);

// Starts z at mu and repairs each choice block into the outcome's region:
// the winning utility is redrawn above max(0, rivals), offending utilities
// under category 0 are redrawn below zero. One pass restores consistency.
void init_latent(const ChoiceStructure& sc, const Eigen::Ref<const IntVector>& y_row,
                 const Eigen::Ref<const Vector>& mu, Eigen::Ref<Vector> z, Rng& rng);

}  // namespace mvmnp
