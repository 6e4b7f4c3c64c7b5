// Command-line harness over the estimation library. Subcommands compose a
// pipeline — dgp writes a synthetic dataset, calibrate a prior file, fit a
// chain or variational fit, predict/score/curves consume fits and data, and
// compare pairs two fits — while `experiment` runs the whole protocol from
// one config into a checksummed, manifest-certified output directory.
// Settings come from the JSON config named by --config (the built-in
// small-scale preset when absent); --seed, --out-dir, and --threads
// override it from the command line.

#include "CLI11.hpp"
#include "json.hpp"

#include "mvmnp/csv.hpp"
#include "mvmnp/dgp.hpp"
#include "mvmnp/experiment.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mvmnp;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open file");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot open for writing");
  out << content;
  out.flush();
  if (!out) throw ParseError(path + ": write failed");
}

bool ends_with(const std::string& text, const std::string& suffix) {
  return text.size() >= suffix.size() &&
         text.compare(text.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<double> to_std(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

struct GlobalArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> threads;
};

ExperimentConfig effective_config(const GlobalArgs& g) {
  ExperimentConfig cfg =
      g.config_path.empty() ? desk_config() : parse_experiment_config(read_file(g.config_path));
  if (g.seed) cfg.seed = *g.seed;
  if (g.out_dir) cfg.out_dir = *g.out_dir;
  if (g.threads) {
    if (*g.threads < 1) throw DomainError("--threads must be at least 1");
    cfg.threads = *g.threads;
  }
  return cfg;
}

std::string out_path(const ExperimentConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.out_dir);
  return (fs::path(cfg.out_dir) / name).string();
}

// A fit artifact is either a variational-fit JSON (one source per label) or
// a chain CSV. draws_hint is the natural draw count of the source.
struct LoadedFit {
  DrawSource source;
  std::string label;
  std::int64_t draws_hint = 0;
};

LoadedFit load_fit(const ExperimentConfig& cfg, const std::string& path,
                   const std::string& want_label) {
  LoadedFit out;
  if (ends_with(path, ".json")) {
    const auto fits = parse_vb_fits(read_file(path), cfg.sc);
    if (fits.empty()) throw ParseError(path + ": the fit file holds no fits");
    const std::pair<std::string, VbResult>* pick = nullptr;
    if (want_label.empty()) {
      if (fits.size() != 1) {
        std::string labels;
        for (const auto& [label, res] : fits) labels += (labels.empty() ? "" : ", ") + label;
        throw DomainError(path + " holds several fits (" + labels +
                          "); pick one with --estimator");
      }
      pick = &fits.front();
    } else {
      for (const auto& entry : fits)
        if (entry.first == want_label) pick = &entry;
      if (pick == nullptr)
        throw DomainError(path + " has no fit labeled \"" + want_label + "\"");
    }
    out.source = vb_draw_source(cfg.sc, pick->second.lambda, cfg.seed, pick->second.identity);
    out.label = pick->first;
    out.draws_hint = cfg.predictive_draws;
  } else if (ends_with(path, ".csv")) {
    const McmcResult chain = load_chain_csv(path, cfg.sc);
    out.source = mcmc_draw_source(cfg.sc, chain);
    out.label = "mcmc";
    out.draws_hint = chain.stored;
  } else {
    throw DomainError(path + ": fit artifacts are .json (variational) or .csv (chain)");
  }
  if (!want_label.empty() && out.label != want_label && ends_with(path, ".csv"))
    throw DomainError(path + ": a chain file has no labeled fits");
  return out;
}

const std::vector<std::string> kPredictionHeader = {"estimator", "draws",    "obs",
                                                    "choice",    "category", "probability"};

void write_predictions_csv(const ChoiceStructure& sc, const PredictiveSummary& summary,
                           const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t t = 0; t < summary.obs.size(); ++t)
    for (int k = 0; k < sc.K; ++k)
      for (int c = 0; c <= sc.J[k]; ++c)
        rows.push_back({summary.source, std::to_string(summary.draws),
                        std::to_string(summary.obs[t]), std::to_string(k), std::to_string(c),
                        format_double(summary.pmf[t][k](c))});
  write_table_csv(path, kPredictionHeader, rows);
}

PredictiveSummary read_predictions_csv(const ChoiceStructure& sc, const std::string& path) {
  const auto rows = read_table_csv(path, kPredictionHeader);
  if (rows.empty()) throw ParseError(path + ": the prediction file has no rows");
  PredictiveSummary summary;
  summary.source = rows[0][0];
  summary.draws = std::stoll(rows[0][1]);
  if (summary.draws < 1) throw ParseError(path + ": non-positive draw count");
  std::size_t at = 0;
  while (at < rows.size()) {
    const int obs = std::stoi(rows[at][2]);
    std::vector<Vector> pmf_row;
    for (int k = 0; k < sc.K; ++k) {
      Vector pmf = Vector::Zero(sc.J[k] + 1);
      for (int c = 0; c <= sc.J[k]; ++c, ++at) {
        if (at >= rows.size())
          throw ParseError(path + ": file ends inside observation " + std::to_string(obs));
        const auto& row = rows[at];
        if (row[0] != summary.source || std::stoll(row[1]) != summary.draws)
          throw ParseError(path + ": estimator or draw count changes mid-file");
        if (std::stoi(row[2]) != obs || std::stoi(row[3]) != k || std::stoi(row[4]) != c)
          throw ParseError(path + ": rows are not in observation/choice/category order near \"" +
                           row[2] + "," + row[3] + "," + row[4] + "\"");
        pmf(c) = std::stod(row[5]);
      }
      pmf_row.push_back(std::move(pmf));
    }
    summary.obs.push_back(obs);
    summary.pmf.push_back(std::move(pmf_row));
  }
  return summary;
}

int cmd_dgp(const ExperimentConfig& cfg, int n_rows) {
  const int n = n_rows > 0 ? n_rows : cfg.n_train + cfg.n_test;
  const SyntheticData syn = generate_synthetic(cfg.sc, n, cfg.seed);
  const std::string data_path = out_path(cfg, "dataset.csv");
  write_dataset_csv(cfg.sc, syn.data, data_path);

  json truth;
  truth["version"] = kVersion;
  truth["seed"] = cfg.seed;
  truth["n"] = n;
  truth["beta_raw"] = to_std(syn.truth.beta_raw);
  truth["beta"] = to_std(syn.truth.beta);
  truth["scale"] = to_std(syn.truth.scale);
  truth["sigma_raw"] = matrix_json(syn.truth.sigma_raw);
  truth["sigma"] = matrix_json(syn.truth.sigma);
  truth["note"] =
      "beta/sigma are the identified pair (per-choice trace normalization folded into the "
      "coefficients); beta_raw/sigma_raw generated the data and are outcome-equivalent";
  const std::string truth_path = out_path(cfg, "truth.json");
  write_file(truth_path, truth.dump(2) + "\n");
  std::cout << "wrote " << data_path << " (" << n << " rows) and " << truth_path << "\n";
  return 0;
}

int cmd_calibrate(const ExperimentConfig& cfg, WorkerPool* pool) {
  const AnglePrior prior =
      calibrate_angle_prior(cfg.sc, cfg.prior, cfg.calibration_draws, cfg.seed, pool);
  const std::string path = out_path(cfg, "prior.json");
  write_file(path, angle_prior_json(cfg.sc, prior) + "\n");
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_fit(const ExperimentConfig& cfg, const std::string& estimator_text,
            const std::string& data_path, const std::string& prior_path, WorkerPool* pool) {
  const EstimatorChoice est = parse_estimator(estimator_text);
  if (est.kind == "oracle" || est.kind == "naive")
    throw DomainError("\"" + est.kind +
                      "\" has nothing to fit; it is available inside the experiment subcommand");
  const Dataset data = load_csv(data_path, cfg.sc);
  const DesignMatrix design = build_design(cfg.sc, data);

  AnglePrior prior;
  if (est.kind != "vb-identity") {
    if (prior_path.empty())
      prior = calibrate_angle_prior(cfg.sc, cfg.prior, cfg.calibration_draws, cfg.seed, pool);
    else
      prior = parse_angle_prior(read_file(prior_path), cfg.sc);
  }

  if (est.kind == "mcmc") {
    McmcConfig mc = cfg.mcmc;
    mc.seed = cfg.seed;
    const McmcResult chain = run_mcmc(cfg.sc, data, design, prior, mc, pool);
    const std::string path = out_path(cfg, "chain.csv");
    write_chain_csv(cfg.sc, chain, path);
    std::cout << "wrote " << path << " (" << chain.stored
              << " draws, mean acceptance " << format_double(chain.accept_rate.mean()) << ")\n";
    return 0;
  }

  VbConfig vc = cfg.vb;
  vc.seed = cfg.seed;
  vc.subsample_fraction = est.fraction;
  const VbResult res = est.kind == "vb-identity"
                           ? run_vb_identity(cfg.sc, data, design, vc, pool)
                           : run_vb(cfg.sc, data, design, prior, vc, pool);
  std::vector<std::pair<std::string, VbResult>> fits;
  fits.emplace_back(est.label(), res);
  const std::string path = out_path(cfg, "lambda.json");
  write_file(path, vb_fits_json(cfg.sc, fits) + "\n");
  std::cout << "wrote " << path << " (fit \"" << est.label() << "\")\n";
  return 0;
}

int cmd_predict(const ExperimentConfig& cfg, const std::string& fit_path,
                const std::string& want_label, const std::string& data_path, WorkerPool* pool) {
  const LoadedFit fit = load_fit(cfg, fit_path, want_label);
  const Dataset data = load_csv(data_path, cfg.sc);
  const DesignMatrix design = build_design(cfg.sc, data);
  std::vector<int> obs(static_cast<std::size_t>(data.N));
  for (int i = 0; i < data.N; ++i) obs[static_cast<std::size_t>(i)] = i;
  const PredictiveSummary summary = draw_predictive(cfg.sc, design, obs, fit.source,
                                                    cfg.predictive_draws, cfg.seed, pool,
                                                    fit.label);
  const std::string path = out_path(cfg, "predictions.csv");
  write_predictions_csv(cfg.sc, summary, path);
  std::cout << "wrote " << path << " (" << data.N << " observations, "
            << cfg.predictive_draws << " draws)\n";
  return 0;
}

int cmd_score(const ExperimentConfig& cfg, const std::string& predictions_path,
              const std::string& data_path) {
  const PredictiveSummary summary = read_predictions_csv(cfg.sc, predictions_path);
  const Dataset data = load_csv(data_path, cfg.sc);
  const ScoreReport rep = score_pmfs(cfg.sc, summary, data.y);
  std::vector<std::vector<std::string>> rows;
  for (int k = 0; k <= cfg.sc.K; ++k) {
    const bool total = k == cfg.sc.K;
    rows.push_back({"all", "log_score", total ? std::string("total") : std::to_string(k),
                    format_double(total ? rep.log_score.sum() : rep.log_score(k))});
    }
  for (int k = 0; k <= cfg.sc.K; ++k) {
    const bool total = k == cfg.sc.K;
    rows.push_back({"all", "hit_rate", total ? std::string("total") : std::to_string(k),
                    format_double(total ? rep.hit_rate.mean() : rep.hit_rate(k))});
  }
  const std::string path = out_path(cfg, "scores.csv");
  write_table_csv(path, {"sample", "metric", "choice", summary.source}, rows);
  std::cout << "wrote " << path << " (total log-score " << format_double(rep.log_score.sum())
            << ", " << rep.floored_cells << " floored cells)\n";
  return 0;
}

int cmd_curves(const ExperimentConfig& cfg, const std::string& fit_path,
               const std::string& want_label, const std::string& data_path, WorkerPool* pool) {
  const LoadedFit fit = load_fit(cfg, fit_path, want_label);
  const Dataset data = load_csv(data_path, cfg.sc);
  const auto [tmpl, grid] = curve_template(cfg.sc, data, cfg.curve);
  const std::vector<CurvePoint> pts =
      price_response_curve(cfg.sc, tmpl, cfg.curve.choice, cfg.curve.alternative,
                           cfg.curve.covariate, grid, fit.source, cfg.curve.draws, cfg.seed, pool);
  std::vector<std::vector<std::string>> rows;
  for (const CurvePoint& pt : pts)
    for (int c = 0; c < pt.prob.size(); ++c)
      rows.push_back(
          {fit.label, format_double(pt.value), std::to_string(c), format_double(pt.prob(c))});
  const std::string path = out_path(cfg, "curves.csv");
  write_table_csv(path, {"estimator", "value", "category", "probability"}, rows);
  std::cout << "wrote " << path << " (" << grid.size() << " grid points)\n";
  return 0;
}

int cmd_compare(const ExperimentConfig& cfg, const std::string& fit_a, const std::string& label_a,
                const std::string& fit_b, const std::string& label_b) {
  const LoadedFit a = load_fit(cfg, fit_a, label_a);
  const LoadedFit b = load_fit(cfg, fit_b, label_b);
  const PosteriorSummary sa = summarize_posterior(cfg.sc, a.source, a.draws_hint);
  const PosteriorSummary sb = summarize_posterior(cfg.sc, b.source, b.draws_hint);
  const std::vector<ComparisonBlock> blocks = compare_posteriors(sa, sb);
  const std::string path = out_path(cfg, "posterior_compare.csv");
  write_comparison_csv(path, blocks);
  std::cout << "wrote " << path << " (" << a.label << " vs " << b.label << ")\n";
  for (const ComparisonBlock& blk : blocks)
    std::cout << "  " << blk.block << ": correlation " << format_double(blk.correlation)
              << ", max deviation " << format_double(blk.max_abs_dev) << "\n";
  return 0;
}

int cmd_experiment(const ExperimentConfig& cfg, WorkerPool* pool) {
  const RunManifest man = run_experiment(cfg, pool);
  std::cout << "experiment complete in " << cfg.out_dir << "\n";
  for (const auto& [phase, seconds] : man.timings)
    std::cout << "  " << phase << ": " << format_double(seconds) << " s\n";
  for (const ManifestFile& f : man.files)
    std::cout << "  " << f.name << " (" << f.bytes << " bytes, fnv1a64 " << f.fnv1a64 << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Multivariate multinomial probit estimation: synthetic data, prior calibration, "
      "variational and chain fits, predictive scoring, and orchestrated experiments"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalArgs global;
  app.add_option("--config", global.config_path,
                 "JSON experiment config (the built-in small-scale preset when absent)")
      ->check(CLI::ExistingFile);
  std::uint64_t seed_arg = 0;
  auto* seed_opt = app.add_option("--seed", seed_arg, "master seed override");
  std::string out_dir_arg;
  auto* out_opt = app.add_option("--out-dir", out_dir_arg, "output directory override");
  int threads_arg = 1;
  auto* thr_opt = app.add_option("--threads", threads_arg, "worker thread cap");

  auto* dgp_cmd = app.add_subcommand("dgp", "generate a synthetic dataset and its truth file");
  int dgp_rows = 0;
  dgp_cmd->add_option("--n", dgp_rows, "rows to generate (default n_train + n_test)");

  auto* cal_cmd = app.add_subcommand("calibrate", "calibrate the covariance-angle prior");

  auto* fit_cmd = app.add_subcommand("fit", "fit one estimator to a dataset");
  std::string fit_estimator = "vb", fit_data, fit_prior;
  fit_cmd->add_option("--estimator", fit_estimator, "mcmc, vb, vb:<fraction>, or vb-identity");
  fit_cmd->add_option("--data", fit_data, "training CSV")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--prior", fit_prior, "calibrated prior JSON (calibrates inline if absent)")
      ->check(CLI::ExistingFile);

  auto* pred_cmd = app.add_subcommand("predict", "predictive pmfs of a fit on a dataset");
  std::string pred_fit, pred_label, pred_data;
  pred_cmd->add_option("--fit", pred_fit, "lambda.json or chain.csv")
      ->required()
      ->check(CLI::ExistingFile);
  pred_cmd->add_option("--estimator", pred_label, "fit label inside a multi-fit file");
  pred_cmd->add_option("--data", pred_data, "dataset CSV")->required()->check(CLI::ExistingFile);

  auto* score_cmd = app.add_subcommand("score", "log-score and hit-rate of saved predictions");
  std::string score_pred, score_data;
  score_cmd->add_option("--predictions", score_pred, "predictions.csv from predict")
      ->required()
      ->check(CLI::ExistingFile);
  score_cmd->add_option("--data", score_data, "dataset CSV with the realized outcomes")
      ->required()
      ->check(CLI::ExistingFile);

  auto* curve_cmd = app.add_subcommand("curves", "price-response curve of a fit");
  std::string curve_fit, curve_label, curve_data;
  curve_cmd->add_option("--fit", curve_fit, "lambda.json or chain.csv")
      ->required()
      ->check(CLI::ExistingFile);
  curve_cmd->add_option("--estimator", curve_label, "fit label inside a multi-fit file");
  curve_cmd->add_option("--data", curve_data, "dataset CSV for covariate means")
      ->required()
      ->check(CLI::ExistingFile);

  auto* cmp_cmd = app.add_subcommand("compare", "paired posterior comparison of two fits");
  std::string cmp_a, cmp_a_label, cmp_b, cmp_b_label;
  cmp_cmd->add_option("--fit-a", cmp_a, "first fit artifact")->required()->check(CLI::ExistingFile);
  cmp_cmd->add_option("--estimator-a", cmp_a_label, "label inside the first fit file");
  cmp_cmd->add_option("--fit-b", cmp_b, "second fit artifact")
      ->required()
      ->check(CLI::ExistingFile);
  cmp_cmd->add_option("--estimator-b", cmp_b_label, "label inside the second fit file");

  auto* exp_cmd = app.add_subcommand("experiment", "run the configured experiment end to end");

  CLI11_PARSE(app, argc, argv);

  try {
    GlobalArgs g = global;
    if (*seed_opt) g.seed = seed_arg;
    if (*out_opt) g.out_dir = out_dir_arg;
    if (*thr_opt) g.threads = threads_arg;
    const ExperimentConfig cfg = effective_config(g);

    std::optional<WorkerPool> pool;
    if (cfg.threads > 1) pool.emplace(cfg.threads);
    WorkerPool* wp = pool ? &*pool : nullptr;

    if (dgp_cmd->parsed()) return cmd_dgp(cfg, dgp_rows);
    if (cal_cmd->parsed()) return cmd_calibrate(cfg, wp);
    if (fit_cmd->parsed()) return cmd_fit(cfg, fit_estimator, fit_data, fit_prior, wp);
    if (pred_cmd->parsed()) return cmd_predict(cfg, pred_fit, pred_label, pred_data, wp);
    if (score_cmd->parsed()) return cmd_score(cfg, score_pred, score_data);
    if (curve_cmd->parsed()) return cmd_curves(cfg, curve_fit, curve_label, curve_data, wp);
    if (cmp_cmd->parsed()) return cmd_compare(cfg, cmp_a, cmp_a_label, cmp_b, cmp_b_label);
    if (exp_cmd->parsed()) return cmd_experiment(cfg, wp);
    std::cerr << "error: no subcommand selected\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
