#pragma once

// Predictive distributions and scoring. A draw source supplies parameter
// draws (beta, lower Cholesky factor of Sigma); the predictive pmf of each
// observation and choice is the empirical distribution of simulated outcomes
// over M such draws. Scoring uses per-choice marginal pmfs: the log-score
// averages log pmf at the realized category (floored at 1/(10 draws) so it
// stays finite), the hit-rate averages agreement of the modal forecast.
// Simulation tallies integer counts in fixed draw chunks merged in chunk
// order, so results are independent of the thread count.

#include "mvmnp/mcmc.hpp"
#include "mvmnp/model.hpp"
#include "mvmnp/parallel.hpp"
#include "mvmnp/types.hpp"
#include "mvmnp/vb.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mvmnp {

struct ParameterDraw {
  Vector beta;    // length r
  Matrix chol_l;  // J x J lower factor of the utility covariance
};

// Deterministic function of the draw index m in [0, M); any internal
// randomness must be derived from m alone, and calls must be safe from
// several threads at once (sources below only read captured state).
using DrawSource = std::function<ParameterDraw(std::int64_t)>;

// Degenerate source at fixed parameters: the oracle when handed the true
// values, or a plug-in point forecast.
DrawSource fixed_draw_source(const Vector& beta, const Matrix& sigma);

// Stored chain draws, cycled when m exceeds the stored count. Factors every
// stored covariance up front.
DrawSource mcmc_draw_source(const ChoiceStructure& sc, const McmcResult& chain);

// theta ~ q_lambda through the reparameterization map; draw m owns a
// counter stream keyed off derive_seed(seed, "theta") so parameter noise
// never collides with outcome noise. identity fixes Sigma = I_J and expects
// a coefficient-only variational law.
DrawSource vb_draw_source(const ChoiceStructure& sc, const VariationalParams& lam,
                          std::uint64_t seed, bool identity = false);

struct PredictiveSummary {
  std::vector<int> obs;                  // dataset rows the table covers
  std::vector<std::vector<Vector>> pmf;  // [t][k], length J_k + 1, sums to 1
  std::int64_t draws = 0;                // M (sets the scoring floor)
  std::uint64_t seed = 0;
  std::string source;
};

// Empirical predictive pmf of every listed observation under the source.
PredictiveSummary draw_predictive(const ChoiceStructure& sc, const DesignMatrix& design,
                                  const std::vector<int>& obs, const DrawSource& source,
                                  std::int64_t draws, std::uint64_t seed,
                                  WorkerPool* pool = nullptr, const std::string& label = "");

// Training-frequency forecast: every observation receives the per-choice
// empirical category frequencies of y_train; draws is the training count, so
// the scoring floor matches the resolution of the frequencies.
PredictiveSummary naive_forecast(const ChoiceStructure& sc, const IntMatrix& y_train,
                                 const std::vector<int>& obs);

struct ScoreReport {
  Vector log_score;                // per choice
  Vector hit_rate;                 // per choice
  std::int64_t floored_cells = 0;  // realized-category cells lifted to the floor
  double floor = 0.0;              // 1 / (10 draws)
};

// Scores a pmf table against the realized outcomes (rows indexed by
// summary.obs). Modal forecasts break ties toward the lowest category.
ScoreReport score_pmfs(const ChoiceStructure& sc, const PredictiveSummary& summary,
                       const IntMatrix& y);

struct CurvePoint {
  double value = 0.0;  // the varied covariate (price) level
  Vector prob;         // pmf of the studied choice, length J_k + 1
};

// Predictive probabilities of choice k as alternative alt's covariate cov
// sweeps a grid, every other covariate held at row 0 of the template
// dataset. Each parameter draw shares one noise vector across the whole
// grid (common random numbers), so an own-price sweep under a negative
// coefficient is non-increasing draw by draw, not merely in expectation.
std::vector<CurvePoint> price_response_curve(const ChoiceStructure& sc,
                                             const Dataset& covariate_template, int k, int alt,
                                             int cov, const std::vector<double>& grid,
                                             const DrawSource& source, std::int64_t draws,
                                             std::uint64_t seed, WorkerPool* pool = nullptr);

// Pointwise arithmetic mean over base-category refits of the same data,
// after the caller maps categories back to a common labeling. Mismatched
// observation lists, grids, or shapes are errors.
PredictiveSummary pool_base_category(const std::vector<PredictiveSummary>& tables);
std::vector<CurvePoint> pool_base_category(const std::vector<std::vector<CurvePoint>>& curves);

}  // namespace mvmnp
