#pragma once

// Experiment orchestration. An ExperimentConfig (parsed from JSON) names the
// model structure, the data source (synthetic generator or a CSV), the
// estimators to fit, and their settings; run_experiment executes the phases
// generate/load -> calibrate -> fit -> predict -> curves -> compare, writes
// the output file set (scores.csv, curves.csv, posterior_compare.csv,
// lambda.json, chain.csv), and finishes by atomically writing manifest.json
// with the config snapshot, per-phase wall-clock timings, and a checksummed
// inventory of every emitted file. All numeric outputs are byte-identical
// across reruns and thread counts for a fixed config and master seed; only
// the manifest differs (it records timings).

#include "mvmnp/mcmc.hpp"
#include "mvmnp/predictive.hpp"
#include "mvmnp/prior.hpp"
#include "mvmnp/types.hpp"
#include "mvmnp/vb.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace mvmnp {

inline constexpr const char* kVersion = "0.1.0";

// One requested estimator. kind is oracle | naive | mcmc | vb | vb-identity;
// subsampled variational fits are written "vb:<fraction>" in configs and
// labeled by their percentage, e.g. vb(10%).
struct EstimatorChoice {
  std::string kind;
  double fraction = 1.0;  // subsample fraction; meaningful for kind == "vb"

  std::string label() const;
};

EstimatorChoice parse_estimator(const std::string& text);

// Price-response sweep settings. The grid is centered at the training mean
// of the varied covariate and spans +/- span training standard deviations.
struct CurveConfig {
  bool enabled = true;
  int choice = 0;
  int alternative = 1;  // 0 is the base alternative
  int covariate = 0;
  int points = 21;
  double span = 2.0;
  std::int64_t draws = 100000;
};

struct ExperimentConfig {
  ChoiceStructure sc;
  int n_train = 2000;
  int n_test = 400;
  std::string data_csv;         // empty: draw from the synthetic generator
  double train_fraction = 0.8;  // random-split protocol for loaded CSVs
  std::vector<EstimatorChoice> estimators;
  VbConfig vb;
  McmcConfig mcmc;
  PsiPriorConfig prior;
  std::int64_t calibration_draws = 100000;
  std::int64_t predictive_draws = 10000;
  CurveConfig curve;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out_dir = ".";
};

// The reference small-scale experiment: K = 2, J_k = 3, one alternative
// covariate, 2000 training and 4000 held-out observations, the full
// estimator ladder, variational fits at 5000 iterations with 10 Gibbs steps,
// and a 20000-iteration reference chain thinned by 2.
ExperimentConfig desk_config();

ExperimentConfig parse_experiment_config(const std::string& json_text);

// Canonical JSON snapshot of the effective configuration (round-trips
// through parse_experiment_config).
std::string experiment_config_json(const ExperimentConfig& cfg);

// Monte-Carlo moment summary of a parameter-draw source: mean and sd of the
// coefficients, the utility-covariance diagonal, and the implied
// correlations (upper-triangle pairs of the full J x J correlation matrix).
struct PosteriorSummary {
  Vector beta_mean, beta_sd;
  Vector sigma_diag_mean, sigma_diag_sd;
  Vector corr_mean, corr_sd;
  std::vector<std::string> beta_label, sigma_label, corr_label;
};

PosteriorSummary summarize_posterior(const ChoiceStructure& sc, const DrawSource& source,
                                     std::int64_t draws);

// Paired comparison of two posterior summaries, block by block: the Pearson
// correlation of the paired means and their largest absolute deviation.
// Comparing a summary against itself gives correlation 1 and deviation 0; a
// block whose means are constant on both sides counts as correlation 1 when
// the sides agree and 0 otherwise.
struct ComparisonBlock {
  std::string block;  // beta | sigma_diag | correlation
  std::vector<std::string> label;
  Vector mean_a, mean_b, sd_a, sd_b;
  double correlation = 1.0;
  double max_abs_dev = 0.0;
};

std::vector<ComparisonBlock> compare_posteriors(const PosteriorSummary& a,
                                                const PosteriorSummary& b);

// Fit artifacts. Variational fits travel as JSON keyed by estimator label;
// chains travel as CSV (draw index, coefficients, covariance angles). Both
// round-trip exactly.
std::string vb_fits_json(const ChoiceStructure& sc,
                         const std::vector<std::pair<std::string, VbResult>>& fits);
std::vector<std::pair<std::string, VbResult>> parse_vb_fits(const std::string& json_text,
                                                            const ChoiceStructure& sc);

void write_chain_csv(const ChoiceStructure& sc, const McmcResult& chain, const std::string& path);
McmcResult load_chain_csv(const std::string& path, const ChoiceStructure& sc);

// Calibrated angle-prior artifact (JSON), exact round-trip.
std::string angle_prior_json(const ChoiceStructure& sc, const AnglePrior& prior);
AnglePrior parse_angle_prior(const std::string& json_text, const ChoiceStructure& sc);

// One-row template dataset holding the column means of data, plus the sweep
// grid for the configured curve: curve.points values centered at the varied
// covariate's mean, spanning +/- curve.span of its standard deviation (unit
// width when the column is constant).
std::pair<Dataset, std::vector<double>> curve_template(const ChoiceStructure& sc,
                                                       const Dataset& data,
                                                       const CurveConfig& curve);

// posterior_compare.csv: "pair" rows carry the paired means and sds, two
// "summary" rows per block carry its correlation and largest deviation.
void write_comparison_csv(const std::string& path, const std::vector<ComparisonBlock>& blocks);

// FNV-1a 64-bit checksum of a file's bytes, as 16 hex digits.
std::string fnv1a_file_hex(const std::string& path);

struct ManifestFile {
  std::string name;
  std::uint64_t bytes = 0;
  std::string fnv1a64;
};

struct RunManifest {
  std::string version;
  std::string config_json;  // canonical snapshot
  std::vector<std::pair<std::string, double>> timings;  // phase -> seconds
  std::vector<ManifestFile> files;
  std::map<std::string, std::string> notes;
};

// Executes the configured experiment into cfg.out_dir. On entry any stale
// manifest.json is removed so a surviving manifest always certifies a
// completed run; on failure the partially written manifest is cleaned up and
// the error rethrown. Pass a pool to share workers, otherwise cfg.threads
// governs a pool local to the call.
RunManifest run_experiment(const ExperimentConfig& cfg, WorkerPool* pool = nullptr);

}  // namespace mvmnp
