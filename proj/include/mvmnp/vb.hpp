#pragma once

// Stochastic-gradient variational Bayes over the augmented posterior. The
// variational family is q(theta, z) = q_lambda(theta) p(z | theta, y, X)
// with q_lambda Gaussian of factor covariance Omega = C C^T + diag(e)^2,
// C an m x s lower-triangular-pattern factor stored as vech. Each iteration
// draws zeta = (w, eps), maps theta = mu + C w + e o eps, refreshes the
// latent utilities of a random subsample by G truncated Gibbs sweeps warm
// started at their stored values, and follows the reparameterized gradient
//   vjp_lambda( grad_log_g(theta, z_A) - grad_log_q(theta) )
// with ADADELTA step sizes. The fitted parameter is the average of lambda
// over the final averaging window. The identity variant fixes Sigma = I_J
// and reduces theta to the coefficients.

#include "mvmnp/gradient.hpp"
#include "mvmnp/model.hpp"
#include "mvmnp/parallel.hpp"
#include "mvmnp/prior.hpp"
#include "mvmnp/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mvmnp {

// Gaussian factor variational parameters. vech_c stores the factor C
// column-major with the strict upper triangle omitted: column j holds rows
// j..m-1, so its offset is j*m - j*(j-1)/2 and the total length is
// s*m - s*(s-1)/2.
struct VariationalParams {
  Vector mu;      // m
  Vector vech_c;  // s*m - s*(s-1)/2
  Vector e;       // m

  int m() const { return static_cast<int>(mu.size()); }
  int s() const;  // factor count recovered from the vech length

  static VariationalParams zero(int m, int s);
};

int vech_length(int m, int s);
int vech_offset(int m, int j);  // start of column j

// lambda packing used by the optimizer and the vjp: (mu, vech_c, e).
Vector pack_lambda(const VariationalParams& lam);
VariationalParams unpack_lambda(const Eigen::Ref<const Vector>& lambda, int m, int s);

// theta = mu + C w + e o eps.
Vector reparameterize(const VariationalParams& lam, const Eigen::Ref<const Vector>& w,
                      const Eigen::Ref<const Vector>& eps);

// grad_theta log q_lambda(theta) = -Omega^{-1}(theta - mu), applied through
// the low-rank-plus-diagonal identity; no m x m matrix is formed.
Vector grad_log_q(const VariationalParams& lam, const Eigen::Ref<const Vector>& theta);

// Maps a theta-cotangent v to lambda space for the draw (w, eps):
// mu-block v, C-block (v w^T) on the vech pattern, e-block v o eps.
Vector dtheta_dlambda_vjp(const VariationalParams& lam, const Eigen::Ref<const Vector>& w,
                          const Eigen::Ref<const Vector>& eps,
                          const Eigen::Ref<const Vector>& v);

// Dense Omega = C C^T + diag(e)^2; for small-m cross-checks and reporting.
Matrix dense_covariance(const VariationalParams& lam);

struct AdadeltaState {
  Vector grad_sq;  // E[g^2]
  Vector step_sq;  // E[dx^2]
  static AdadeltaState zero(int dim);
};

// One ascent step: lambda += sqrt(E[dx^2]+eps)/sqrt(E[g^2]+eps) o g with the
// running moments updated in the standard order.
void adadelta_update(Vector& lambda, const Eigen::Ref<const Vector>& grad, AdadeltaState& state,
                     double rho, double eps);

struct VbConfig {
  std::int64_t iterations = 5000;
  int gibbs_steps = 10;             // G sweeps per iteration on the subsample
  double subsample_fraction = 1.0;  // M/N
  double rho = 0.95;
  double adadelta_eps = 1e-6;
  std::int64_t average_window = 100;
  int factors = 10;                 // s, clamped to m - 1
  std::int64_t diag_interval = 10;  // hit-rate cadence; 0 disables
  int diag_obs = 500;
  int diag_draws = 200;
  std::uint64_t seed = 0;
  std::int64_t progress_interval = 0;  // stderr cadence; 0 is silent
  double divergence_bound = 1e3;
  double e_floor = 1e-8;
};

// Persistent latent-utility state threaded through the SGA iterations.
struct VbState {
  Matrix z;                // J x N, consistent with the outcomes at all times
  IntMatrix yT;            // K x N outcome transpose
  std::vector<int> order;  // permutation buffer for subsample draws
};

VbState make_vb_state(const ChoiceStructure& sc, const Dataset& data, std::uint64_t seed,
                      WorkerPool* pool = nullptr);

struct GradientEstimate {
  Vector lambda_grad;          // packed (mu, vech_c, e)
  Vector theta;                // the reparameterized draw
  Vector w, eps;               // the zeta draw behind it
  std::vector<int> subsample;  // A
};

// One reparameterization-trick gradient estimate at lambda, advancing the
// persistent state: draws zeta and A, runs G Gibbs sweeps on A's latents at
// theta, and pulls (grad_log_g - grad_log_q) back to lambda space. Pass
// identity = true (prior may then be null) for the fixed-Sigma variant whose
// theta is beta alone.
GradientEstimate elbo_gradient_estimate(const ChoiceStructure& sc, const DesignMatrix& design,
                                        const AnglePrior* prior, const VariationalParams& lam,
                                        VbState& state, const VbConfig& cfg,
                                        std::int64_t iteration, WorkerPool* pool = nullptr,
                                        bool identity = false);

struct VbDiagnosticPoint {
  std::int64_t iteration = 0;
  Vector hit_rate;  // per choice
};

struct VbResult {
  VariationalParams lambda;  // averaged over the final window
  VariationalParams last;    // final iterate
  std::vector<VbDiagnosticPoint> diagnostics;
  bool identity = false;
};

// Per-choice conditional hit-rate of the current variational fit on a fixed
// observation set: the point forecast is the mode of a draws-sized estimate
// of the predictive mass. Common random numbers keep consecutive evaluations
// comparable across iterations.
Vector conditional_hit_rate(const ChoiceStructure& sc, const DesignMatrix& design,
                            const IntMatrix& y, const std::vector<int>& obs,
                            const VariationalParams& lam, int draws, std::uint64_t seed,
                            WorkerPool* pool = nullptr, bool identity = false);

VbResult run_vb(const ChoiceStructure& sc, const Dataset& data, const DesignMatrix& design,
                const AnglePrior& prior, const VbConfig& cfg, WorkerPool* pool = nullptr);

VbResult run_vb_identity(const ChoiceStructure& sc, const Dataset& data,
                         const DesignMatrix& design, const VbConfig& cfg,
                         WorkerPool* pool = nullptr);

}  // namespace mvmnp
