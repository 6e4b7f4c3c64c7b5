#pragma once

// Reference posterior sampler. Systematic scan per iteration:
//   1. one truncated Gibbs sweep over every observation's latent utilities,
//   2. a conjugate draw of the coefficients beta | z, Sigma,
//   3. blocked random-walk Metropolis-Hastings over the covariance angles
//      with truncated-normal proposals and burn-in step adaptation.
// The angle likelihood is evaluated through the residual cross moment
// S = sum_i (z_i - X_i beta)(z_i - X_i beta)^T, so each proposal costs
// O(J^3) regardless of N. With the likelihood disabled the same machinery
// targets the prior alone, which validates the sampler against the known
// marginals.

#include "mvmnp/model.hpp"
#include "mvmnp/parallel.hpp"
#include "mvmnp/prior.hpp"
#include "mvmnp/types.hpp"

#include <cstdint>

namespace mvmnp {

struct McmcConfig {
  std::int64_t iterations = 200000;
  std::int64_t burn_in = 100000;
  std::int64_t thin = 10;
  int block_size = 5;           // angles proposed jointly
  int adapt_interval = 100;     // burn-in step adaptation cadence
  double initial_step = 0.1;    // proposal scale, radians
  double accept_high = 0.30;    // grow the step above this rate
  double accept_low = 0.15;     // shrink it below this rate
  double step_factor = 1.2;
  bool likelihood_disabled = false;  // target the prior alone
  std::uint64_t seed = 0;
  std::int64_t progress_interval = 0;  // stderr progress cadence; 0 is silent
};

struct McmcResult {
  Matrix beta;         // stored x r
  Matrix kappa;        // stored x n_angles
  Vector accept_rate;  // per angle, post burn-in
  Vector step;         // final proposal scales
  std::int64_t stored = 0;
};

// Design cross moments T_ab = sum_i X_i(a,:)^T X_i(b,:) over stacked utility
// rows a, b; they reduce the coefficient posterior precision
// sum_i X_i^T Q X_i to an O(J^2 r^2) contraction independent of N.
struct CrossMoments {
  int J = 0;
  std::vector<int> row_choice;  // choice owning each stacked row
  std::vector<Matrix> T;        // index a * J + b, block r_{k(a)} x r_{k(b)}
};

CrossMoments build_cross_moments(const ChoiceStructure& sc, const DesignMatrix& design,
                                 WorkerPool* pool = nullptr);

// 10 I_r + sum_ab Q(a, b) T_ab assembled into coefficient blocks.
Matrix coefficient_precision(const ChoiceStructure& sc, const CrossMoments& cm, const Matrix& Q);

McmcResult run_mcmc(const ChoiceStructure& sc, const Dataset& data, const DesignMatrix& design,
                    const AnglePrior& prior, const McmcConfig& cfg, WorkerPool* pool = nullptr);

}  // namespace mvmnp
