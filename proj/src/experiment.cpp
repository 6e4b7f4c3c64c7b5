#include "mvmnp/experiment.hpp"

#include "mvmnp/csv.hpp"
#include "mvmnp/dgp.hpp"

#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace mvmnp {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<double> to_std(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Vector from_std(const std::vector<double>& v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = v[i];
  return out;
}

// Config and artifact files are strict: an unknown key is a typo, not an
// extension point. `where` names the file and section for the message.
void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ParseError(where + " must be a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* key : allowed) {
      if (it.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) throw ParseError("unknown key \"" + it.key() + "\" in " + where);
  }
}

std::string estimator_text(const EstimatorChoice& est) {
  if (est.kind == "vb" && est.fraction < 1.0) return "vb:" + format_double(est.fraction);
  return est.kind;
}

json structure_json(const ChoiceStructure& sc) {
  json j;
  j["J"] = sc.J;
  j["n_d"] = sc.n_d;
  j["n_a"] = sc.n_a;
  j["p"] = sc.p;
  return j;
}

ChoiceStructure parse_structure(const json& j) {
  check_keys(j, "the structure block", {"J", "n_d", "n_a", "p"});
  if (!j.contains("J")) throw ParseError("experiment config: structure is missing J");
  std::vector<int> J = j.at("J").get<std::vector<int>>();
  const int n_d = j.value("n_d", 0);
  const int n_a = j.value("n_a", 0);
  const int p = j.value("p", -1);
  return ChoiceStructure::make(std::move(J), n_d, n_a, p);
}

void require_structure(const ChoiceStructure& want, const json& j, const std::string& what) {
  const ChoiceStructure got = parse_structure(j);
  if (got.J != want.J || got.n_d != want.n_d || got.n_a != want.n_a || got.p != want.p)
    throw DimensionError(what + ": structure mismatch with the requested model");
}

double pearson(const Vector& a, const Vector& b, double max_dev) {
  const Eigen::Index n = a.size();
  if (n == 0) return 1.0;
  const Eigen::ArrayXd ca = a.array() - a.mean();
  const Eigen::ArrayXd cb = b.array() - b.mean();
  const double va = ca.square().sum();
  const double vb = cb.square().sum();
  // A block that is constant on either side has no spread to correlate;
  // agreement then means coinciding values.
  if (va < 1e-300 || vb < 1e-300) return max_dev <= 1e-12 ? 1.0 : 0.0;
  return (ca * cb).sum() / std::sqrt(va * vb);
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return std::string(buf, 16);
}

struct PhaseTimer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

}  // namespace

std::string EstimatorChoice::label() const {
  if (kind != "vb" || fraction >= 1.0) return kind;
  const double pct = fraction * 100.0;
  const double rounded = std::round(pct);
  if (std::abs(pct - rounded) < 1e-9)
    return "vb(" + std::to_string(static_cast<long long>(rounded)) + "%)";
  return "vb(" + format_double(pct) + "%)";
}

EstimatorChoice parse_estimator(const std::string& text) {
  EstimatorChoice est;
  if (text == "oracle" || text == "naive" || text == "mcmc" || text == "vb" ||
      text == "vb-identity") {
    est.kind = text;
    return est;
  }
  const std::string prefix = "vb:";
  if (text.rfind(prefix, 0) == 0) {
    const std::string frac = text.substr(prefix.size());
    double value = 0.0;
    const char* begin = frac.data();
    const char* end = begin + frac.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end)
      throw ParseError("estimator \"" + text + "\": malformed subsample fraction");
    if (!(value > 0.0) || value > 1.0)
      throw DomainError("estimator \"" + text + "\": subsample fraction " + format_double(value) +
                        " outside (0, 1]");
    est.kind = "vb";
    est.fraction = value;
    return est;
  }
  throw DomainError("unknown estimator \"" + text +
                    "\"; expected oracle, naive, mcmc, vb, vb:<fraction>, or vb-identity");
}

ExperimentConfig desk_config() {
  ExperimentConfig cfg;
  cfg.sc = ChoiceStructure::make({3, 3}, 0, 1);
  cfg.n_train = 2000;
  cfg.n_test = 4000;
  for (const char* text :
       {"oracle", "mcmc", "vb", "vb:0.1", "vb:0.01", "vb-identity", "naive"})
    cfg.estimators.push_back(parse_estimator(text));
  cfg.vb.iterations = 5000;
  cfg.vb.gibbs_steps = 10;
  cfg.vb.factors = 10;
  cfg.vb.average_window = 100;
  // The hit-rate trace costs as much per point at a 1% subsample as at the
  // full sample; a coarser cadence keeps the subsampled fits' wall-clock
  // dominated by estimation rather than by diagnostics.
  cfg.vb.diag_interval = 100;
  cfg.mcmc.iterations = 20000;
  cfg.mcmc.burn_in = 10000;
  cfg.mcmc.thin = 2;
  cfg.calibration_draws = 100000;
  cfg.predictive_draws = 10000;
  cfg.seed = 4711;
  cfg.out_dir = "runs/desk";
  return cfg;
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("experiment config: ") + e.what());
  }
  try {
    check_keys(j, "the experiment config",
               {"structure", "n_train", "n_test", "data_csv", "train_fraction", "estimators",
                "vb", "mcmc", "prior", "calibration_draws", "predictive_draws", "curve", "seed",
                "threads", "out_dir"});
    ExperimentConfig cfg;
    if (!j.contains("structure")) throw ParseError("experiment config: missing structure");
    cfg.sc = parse_structure(j.at("structure"));

    cfg.n_train = j.value("n_train", cfg.n_train);
    cfg.n_test = j.value("n_test", cfg.n_test);
    cfg.data_csv = j.value("data_csv", cfg.data_csv);
    cfg.train_fraction = j.value("train_fraction", cfg.train_fraction);

    if (!j.contains("estimators") || !j.at("estimators").is_array() ||
        j.at("estimators").empty())
      throw ParseError("experiment config: estimators must be a non-empty array");
    for (const auto& item : j.at("estimators"))
      cfg.estimators.push_back(parse_estimator(item.get<std::string>()));

    if (j.contains("vb")) {
      const json& v = j.at("vb");
      check_keys(v, "the vb block",
                 {"iterations", "gibbs_steps", "factors", "average_window", "diag_interval",
                  "diag_obs", "diag_draws", "rho", "adadelta_eps", "divergence_bound", "e_floor",
                  "progress_interval"});
      cfg.vb.iterations = v.value("iterations", cfg.vb.iterations);
      cfg.vb.gibbs_steps = v.value("gibbs_steps", cfg.vb.gibbs_steps);
      cfg.vb.factors = v.value("factors", cfg.vb.factors);
      cfg.vb.average_window = v.value("average_window", cfg.vb.average_window);
      cfg.vb.diag_interval = v.value("diag_interval", cfg.vb.diag_interval);
      cfg.vb.diag_obs = v.value("diag_obs", cfg.vb.diag_obs);
      cfg.vb.diag_draws = v.value("diag_draws", cfg.vb.diag_draws);
      cfg.vb.rho = v.value("rho", cfg.vb.rho);
      cfg.vb.adadelta_eps = v.value("adadelta_eps", cfg.vb.adadelta_eps);
      cfg.vb.divergence_bound = v.value("divergence_bound", cfg.vb.divergence_bound);
      cfg.vb.e_floor = v.value("e_floor", cfg.vb.e_floor);
      cfg.vb.progress_interval = v.value("progress_interval", cfg.vb.progress_interval);
    }
    if (j.contains("mcmc")) {
      const json& m = j.at("mcmc");
      check_keys(m, "the mcmc block",
                 {"iterations", "burn_in", "thin", "block_size", "adapt_interval",
                  "initial_step", "accept_high", "accept_low", "step_factor",
                  "progress_interval"});
      cfg.mcmc.iterations = m.value("iterations", cfg.mcmc.iterations);
      cfg.mcmc.burn_in = m.value("burn_in", cfg.mcmc.burn_in);
      cfg.mcmc.thin = m.value("thin", cfg.mcmc.thin);
      cfg.mcmc.block_size = m.value("block_size", cfg.mcmc.block_size);
      cfg.mcmc.adapt_interval = m.value("adapt_interval", cfg.mcmc.adapt_interval);
      cfg.mcmc.initial_step = m.value("initial_step", cfg.mcmc.initial_step);
      cfg.mcmc.accept_high = m.value("accept_high", cfg.mcmc.accept_high);
      cfg.mcmc.accept_low = m.value("accept_low", cfg.mcmc.accept_low);
      cfg.mcmc.step_factor = m.value("step_factor", cfg.mcmc.step_factor);
      cfg.mcmc.progress_interval = m.value("progress_interval", cfg.mcmc.progress_interval);
    }
    if (j.contains("prior")) {
      const json& p = j.at("prior");
      check_keys(p, "the prior block", {"sigma_B", "ig_shape", "ig_rate", "target_mean_offdiag"});
      cfg.prior.sigma_B = p.value("sigma_B", cfg.prior.sigma_B);
      cfg.prior.ig_shape = p.value("ig_shape", cfg.prior.ig_shape);
      cfg.prior.ig_rate = p.value("ig_rate", cfg.prior.ig_rate);
      cfg.prior.target_mean_offdiag = p.value("target_mean_offdiag", cfg.prior.target_mean_offdiag);
    }
    if (j.contains("curve")) {
      const json& c = j.at("curve");
      check_keys(c, "the curve block",
                 {"enabled", "choice", "alternative", "covariate", "points", "span", "draws"});
      cfg.curve.enabled = c.value("enabled", cfg.curve.enabled);
      cfg.curve.choice = c.value("choice", cfg.curve.choice);
      cfg.curve.alternative = c.value("alternative", cfg.curve.alternative);
      cfg.curve.covariate = c.value("covariate", cfg.curve.covariate);
      cfg.curve.points = c.value("points", cfg.curve.points);
      cfg.curve.span = c.value("span", cfg.curve.span);
      cfg.curve.draws = c.value("draws", cfg.curve.draws);
    }
    cfg.calibration_draws = j.value("calibration_draws", cfg.calibration_draws);
    cfg.predictive_draws = j.value("predictive_draws", cfg.predictive_draws);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.threads = j.value("threads", cfg.threads);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);

    if (cfg.n_train < 2) throw DomainError("experiment config: n_train must be at least 2");
    if (cfg.n_test < 0) throw DomainError("experiment config: n_test must be non-negative");
    if (!(cfg.train_fraction > 0.0) || !(cfg.train_fraction < 1.0))
      throw DomainError("experiment config: train_fraction outside (0, 1)");
    if (cfg.calibration_draws < 1)
      throw DomainError("experiment config: calibration_draws must be positive");
    if (cfg.predictive_draws < 1)
      throw DomainError("experiment config: predictive_draws must be positive");
    if (cfg.threads < 1) throw DomainError("experiment config: threads must be at least 1");
    if (cfg.out_dir.empty()) throw DomainError("experiment config: out_dir is empty");

    std::vector<std::string> labels;
    for (const EstimatorChoice& est : cfg.estimators) {
      const std::string label = est.label();
      if (std::find(labels.begin(), labels.end(), label) != labels.end())
        throw DomainError("experiment config: estimator \"" + label + "\" listed twice");
      labels.push_back(label);
      if (est.kind == "oracle" && !cfg.data_csv.empty())
        throw DomainError(
            "experiment config: the oracle needs generator truth; it cannot score a loaded CSV");
    }

    if (cfg.curve.enabled) {
      if (cfg.sc.n_a == 0)
        throw DomainError(
            "experiment config: the response curve needs alternative-specific covariates");
      if (cfg.curve.points < 2) throw DomainError("experiment config: curve.points must be >= 2");
      if (!(cfg.curve.span > 0.0)) throw DomainError("experiment config: curve.span must be > 0");
      if (cfg.curve.draws < 1) throw DomainError("experiment config: curve.draws must be positive");
      if (cfg.curve.choice < 0 || cfg.curve.choice >= cfg.sc.K)
        throw DimensionError("experiment config: curve.choice outside [0, " +
                             std::to_string(cfg.sc.K) + ")");
      if (cfg.curve.alternative < 0 || cfg.curve.alternative > cfg.sc.J[cfg.curve.choice])
        throw DimensionError("experiment config: curve.alternative outside [0, " +
                             std::to_string(cfg.sc.J[cfg.curve.choice]) + "]");
      if (cfg.curve.covariate < 0 || cfg.curve.covariate >= cfg.sc.n_a)
        throw DimensionError("experiment config: curve.covariate outside [0, " +
                             std::to_string(cfg.sc.n_a) + ")");
    }
    return cfg;
  } catch (const json::exception& e) {
    throw ParseError(std::string("experiment config: ") + e.what());
  }
}

std::string experiment_config_json(const ExperimentConfig& cfg) {
  json j;
  j["structure"] = structure_json(cfg.sc);
  j["n_train"] = cfg.n_train;
  j["n_test"] = cfg.n_test;
  j["data_csv"] = cfg.data_csv;
  j["train_fraction"] = cfg.train_fraction;
  json ests = json::array();
  for (const EstimatorChoice& est : cfg.estimators) ests.push_back(estimator_text(est));
  j["estimators"] = ests;
  j["vb"] = {{"iterations", cfg.vb.iterations},
             {"gibbs_steps", cfg.vb.gibbs_steps},
             {"factors", cfg.vb.factors},
             {"average_window", cfg.vb.average_window},
             {"diag_interval", cfg.vb.diag_interval},
             {"diag_obs", cfg.vb.diag_obs},
             {"diag_draws", cfg.vb.diag_draws},
             {"rho", cfg.vb.rho},
             {"adadelta_eps", cfg.vb.adadelta_eps},
             {"divergence_bound", cfg.vb.divergence_bound},
             {"e_floor", cfg.vb.e_floor},
             {"progress_interval", cfg.vb.progress_interval}};
  j["mcmc"] = {{"iterations", cfg.mcmc.iterations},
               {"burn_in", cfg.mcmc.burn_in},
               {"thin", cfg.mcmc.thin},
               {"block_size", cfg.mcmc.block_size},
               {"adapt_interval", cfg.mcmc.adapt_interval},
               {"initial_step", cfg.mcmc.initial_step},
               {"accept_high", cfg.mcmc.accept_high},
               {"accept_low", cfg.mcmc.accept_low},
               {"step_factor", cfg.mcmc.step_factor},
               {"progress_interval", cfg.mcmc.progress_interval}};
  j["prior"] = {{"sigma_B", cfg.prior.sigma_B},
                {"ig_shape", cfg.prior.ig_shape},
                {"ig_rate", cfg.prior.ig_rate},
                {"target_mean_offdiag", cfg.prior.target_mean_offdiag}};
  j["calibration_draws"] = cfg.calibration_draws;
  j["predictive_draws"] = cfg.predictive_draws;
  j["curve"] = {{"enabled", cfg.curve.enabled},   {"choice", cfg.curve.choice},
                {"alternative", cfg.curve.alternative}, {"covariate", cfg.curve.covariate},
                {"points", cfg.curve.points},     {"span", cfg.curve.span},
                {"draws", cfg.curve.draws}};
  j["seed"] = cfg.seed;
  j["threads"] = cfg.threads;
  j["out_dir"] = cfg.out_dir;
  return j.dump(2);
}

PosteriorSummary summarize_posterior(const ChoiceStructure& sc, const DrawSource& source,
                                     std::int64_t draws) {
  if (!source) throw DomainError("summarize_posterior: empty draw source");
  if (draws < 2) throw DomainError("summarize_posterior: needs at least 2 draws");
  const int J = sc.J_total;
  const int pairs = J * (J - 1) / 2;
  Vector beta_sum = Vector::Zero(sc.r), beta_sq = Vector::Zero(sc.r);
  Vector diag_sum = Vector::Zero(J), diag_sq = Vector::Zero(J);
  Vector corr_sum = Vector::Zero(pairs), corr_sq = Vector::Zero(pairs);
  for (std::int64_t m = 0; m < draws; ++m) {
    const ParameterDraw draw = source(m);
    if (draw.beta.size() != sc.r || draw.chol_l.rows() != J || draw.chol_l.cols() != J)
      throw DimensionError("summarize_posterior: draw " + std::to_string(m) +
                           " has the wrong shape");
    beta_sum += draw.beta;
    beta_sq.array() += draw.beta.array().square();
    const Matrix sigma = draw.chol_l * draw.chol_l.transpose();
    diag_sum += sigma.diagonal();
    diag_sq.array() += sigma.diagonal().array().square();
    int idx = 0;
    for (int a = 0; a < J; ++a)
      for (int b = a + 1; b < J; ++b, ++idx) {
        const double rho = sigma(a, b) / std::sqrt(sigma(a, a) * sigma(b, b));
        corr_sum(idx) += rho;
        corr_sq(idx) += rho * rho;
      }
  }
  const double n = static_cast<double>(draws);
  auto finish = [&](const Vector& sum, const Vector& sq, Vector& mean, Vector& sd) {
    mean = sum / n;
    sd = ((sq.array() - n * mean.array().square()) / (n - 1.0)).max(0.0).sqrt();
  };
  PosteriorSummary out;
  finish(beta_sum, beta_sq, out.beta_mean, out.beta_sd);
  finish(diag_sum, diag_sq, out.sigma_diag_mean, out.sigma_diag_sd);
  finish(corr_sum, corr_sq, out.corr_mean, out.corr_sd);
  for (int k = 0; k < sc.K; ++k)
    for (int i = 0; i < sc.r_k[k]; ++i)
      out.beta_label.push_back("beta_k" + std::to_string(k) + "_" + std::to_string(i));
  for (int a = 0; a < J; ++a)
    out.sigma_label.push_back("sigma_" + std::to_string(a) + "_" + std::to_string(a));
  for (int a = 0; a < J; ++a)
    for (int b = a + 1; b < J; ++b)
      out.corr_label.push_back("corr_" + std::to_string(a) + "_" + std::to_string(b));
  return out;
}

std::vector<ComparisonBlock> compare_posteriors(const PosteriorSummary& a,
                                                const PosteriorSummary& b) {
  if (a.beta_mean.size() != b.beta_mean.size() ||
      a.sigma_diag_mean.size() != b.sigma_diag_mean.size() ||
      a.corr_mean.size() != b.corr_mean.size())
    throw DimensionError("compare_posteriors: structure mismatch between the two fits");
  auto block = [](const std::string& name, const std::vector<std::string>& label,
                  const Vector& ma, const Vector& mb, const Vector& sa, const Vector& sb) {
    ComparisonBlock out;
    out.block = name;
    out.label = label;
    out.mean_a = ma;
    out.mean_b = mb;
    out.sd_a = sa;
    out.sd_b = sb;
    out.max_abs_dev = ma.size() == 0 ? 0.0 : (ma - mb).cwiseAbs().maxCoeff();
    out.correlation = pearson(ma, mb, out.max_abs_dev);
    return out;
  };
  std::vector<ComparisonBlock> out;
  out.push_back(block("beta", a.beta_label, a.beta_mean, b.beta_mean, a.beta_sd, b.beta_sd));
  out.push_back(block("sigma_diag", a.sigma_label, a.sigma_diag_mean, b.sigma_diag_mean,
                      a.sigma_diag_sd, b.sigma_diag_sd));
  out.push_back(
      block("correlation", a.corr_label, a.corr_mean, b.corr_mean, a.corr_sd, b.corr_sd));
  return out;
}

std::string vb_fits_json(const ChoiceStructure& sc,
                         const std::vector<std::pair<std::string, VbResult>>& fits) {
  json j;
  j["version"] = kVersion;
  j["structure"] = structure_json(sc);
  json table = json::object();
  for (const auto& [label, res] : fits) {
    if (table.contains(label)) throw DomainError("vb_fits_json: label \"" + label + "\" repeats");
    json f;
    f["identity"] = res.identity;
    f["mu"] = to_std(res.lambda.mu);
    f["vech_c"] = to_std(res.lambda.vech_c);
    f["e"] = to_std(res.lambda.e);
    json diag;
    std::vector<std::int64_t> iters;
    json rates = json::array();
    for (const VbDiagnosticPoint& pt : res.diagnostics) {
      iters.push_back(pt.iteration);
      rates.push_back(to_std(pt.hit_rate));
    }
    diag["iteration"] = iters;
    diag["hit_rate"] = rates;
    f["diagnostics"] = diag;
    table[label] = f;
  }
  j["fits"] = table;
  return j.dump(2);
}

std::vector<std::pair<std::string, VbResult>> parse_vb_fits(const std::string& json_text,
                                                            const ChoiceStructure& sc) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("variational fit file: ") + e.what());
  }
  try {
    check_keys(j, "the variational fit file", {"version", "structure", "fits"});
    if (!j.contains("structure") || !j.contains("fits"))
      throw ParseError("variational fit file: missing structure or fits");
    require_structure(sc, j.at("structure"), "variational fit file");
    std::vector<std::pair<std::string, VbResult>> out;
    for (auto it = j.at("fits").begin(); it != j.at("fits").end(); ++it) {
      const json& f = it.value();
      check_keys(f, "variational fit \"" + it.key() + "\"",
                 {"identity", "mu", "vech_c", "e", "diagnostics"});
      VbResult res;
      res.identity = f.value("identity", false);
      res.lambda.mu = from_std(f.at("mu").get<std::vector<double>>());
      res.lambda.vech_c = from_std(f.at("vech_c").get<std::vector<double>>());
      res.lambda.e = from_std(f.at("e").get<std::vector<double>>());
      const int m = res.lambda.m();
      const int want = res.identity ? sc.r : sc.theta_dim;
      if (m != want)
        throw DimensionError("variational fit \"" + it.key() + "\": mu has " + std::to_string(m) +
                             " entries, expected " + std::to_string(want));
      if (res.lambda.e.size() != m)
        throw DimensionError("variational fit \"" + it.key() + "\": e length mismatch");
      bool vech_ok = false;
      for (int s = 0; s <= m; ++s)
        if (vech_length(m, s) == static_cast<int>(res.lambda.vech_c.size())) {
          vech_ok = true;
          break;
        }
      if (!vech_ok)
        throw DimensionError("variational fit \"" + it.key() +
                             "\": vech_c length fits no factor count");
      if (f.contains("diagnostics")) {
        const json& d = f.at("diagnostics");
        check_keys(d, "the diagnostics of fit \"" + it.key() + "\"", {"iteration", "hit_rate"});
        const auto iters = d.value("iteration", std::vector<std::int64_t>{});
        const json rates = d.value("hit_rate", json::array());
        if (iters.size() != rates.size())
          throw ParseError("variational fit \"" + it.key() +
                           "\": diagnostic arrays disagree in length");
        for (std::size_t t = 0; t < iters.size(); ++t) {
          VbDiagnosticPoint pt;
          pt.iteration = iters[t];
          pt.hit_rate = from_std(rates[t].get<std::vector<double>>());
          if (pt.hit_rate.size() != sc.K)
            throw DimensionError("variational fit \"" + it.key() +
                                 "\": hit-rate rows must have one entry per choice");
          res.diagnostics.push_back(std::move(pt));
        }
      }
      res.last = res.lambda;
      out.emplace_back(it.key(), std::move(res));
    }
    return out;
  } catch (const json::exception& e) {
    throw ParseError(std::string("variational fit file: ") + e.what());
  }
}

void write_chain_csv(const ChoiceStructure& sc, const McmcResult& chain,
                     const std::string& path) {
  if (chain.stored < 1) throw DomainError("write_chain_csv: the chain is empty");
  if (chain.beta.rows() != chain.stored || chain.beta.cols() != sc.r ||
      chain.kappa.rows() != chain.stored || chain.kappa.cols() != sc.n_angles)
    throw DimensionError("write_chain_csv: chain shape disagrees with the structure");
  std::vector<std::string> header;
  header.push_back("draw");
  for (int i = 0; i < sc.r; ++i) header.push_back("beta_" + std::to_string(i));
  for (int i = 0; i < sc.n_angles; ++i) header.push_back("kappa_" + std::to_string(i));
  std::vector<std::vector<std::string>> rows;
  rows.reserve(static_cast<std::size_t>(chain.stored));
  for (std::int64_t t = 0; t < chain.stored; ++t) {
    std::vector<std::string> row;
    row.reserve(header.size());
    row.push_back(std::to_string(t));
    for (int i = 0; i < sc.r; ++i) row.push_back(format_double(chain.beta(t, i)));
    for (int i = 0; i < sc.n_angles; ++i) row.push_back(format_double(chain.kappa(t, i)));
    rows.push_back(std::move(row));
  }
  write_table_csv(path, header, rows);
}

McmcResult load_chain_csv(const std::string& path, const ChoiceStructure& sc) {
  std::vector<std::string> header;
  header.push_back("draw");
  for (int i = 0; i < sc.r; ++i) header.push_back("beta_" + std::to_string(i));
  for (int i = 0; i < sc.n_angles; ++i) header.push_back("kappa_" + std::to_string(i));
  const std::vector<std::vector<std::string>> rows = read_table_csv(path, header);
  if (rows.empty()) throw ParseError(path + ": the chain file has no draws");
  McmcResult chain;
  chain.stored = static_cast<std::int64_t>(rows.size());
  chain.beta.resize(chain.stored, sc.r);
  chain.kappa.resize(chain.stored, sc.n_angles);
  auto parse_cell = [&](const std::string& cell, std::int64_t line) {
    double value = 0.0;
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end)
      throw ParseError(path + " line " + std::to_string(line) + ": malformed number \"" + cell +
                       "\"");
    return value;
  };
  for (std::size_t t = 0; t < rows.size(); ++t) {
    const std::int64_t line = static_cast<std::int64_t>(t) + 2;
    if (rows[t][0] != std::to_string(t))
      throw ParseError(path + " line " + std::to_string(line) + ": draw index \"" + rows[t][0] +
                       "\" is out of sequence");
    for (int i = 0; i < sc.r; ++i)
      chain.beta(static_cast<Eigen::Index>(t), i) = parse_cell(rows[t][1 + i], line);
    for (int i = 0; i < sc.n_angles; ++i)
      chain.kappa(static_cast<Eigen::Index>(t), i) = parse_cell(rows[t][1 + sc.r + i], line);
  }
  return chain;
}

std::string angle_prior_json(const ChoiceStructure& sc, const AnglePrior& prior) {
  json j;
  j["version"] = kVersion;
  j["structure"] = structure_json(sc);
  j["mu_B"] = prior.mu_B;
  j["seed"] = prior.seed;
  j["draws"] = prior.draws;
  json mu = json::array(), tau = json::array(), eta = json::array();
  for (int k = 0; k < sc.K; ++k) {
    mu.push_back(to_std(prior.mu[k]));
    tau.push_back(to_std(prior.tau[k]));
    eta.push_back(to_std(prior.eta[k]));
  }
  j["mu"] = mu;
  j["tau"] = tau;
  j["eta"] = eta;
  return j.dump(2);
}

AnglePrior parse_angle_prior(const std::string& json_text, const ChoiceStructure& sc) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("prior file: ") + e.what());
  }
  try {
    check_keys(j, "the prior file",
               {"version", "structure", "mu_B", "seed", "draws", "mu", "tau", "eta"});
    if (!j.contains("structure")) throw ParseError("prior file: missing structure");
    require_structure(sc, j.at("structure"), "prior file");
    AnglePrior prior;
    prior.mu_B = j.value("mu_B", 0.0);
    prior.seed = j.value("seed", std::uint64_t{0});
    prior.draws = j.value("draws", std::int64_t{0});
    for (const char* name : {"mu", "tau", "eta"})
      if (!j.contains(name) || !j.at(name).is_array() ||
          static_cast<int>(j.at(name).size()) != sc.K)
        throw ParseError(std::string("prior file: ") + name + " must hold one array per choice");
    for (int k = 0; k < sc.K; ++k) {
      prior.mu.push_back(from_std(j.at("mu")[k].get<std::vector<double>>()));
      prior.tau.push_back(from_std(j.at("tau")[k].get<std::vector<double>>()));
      prior.eta.push_back(from_std(j.at("eta")[k].get<std::vector<double>>()));
      const int want = sc.angles_k(k);
      if (prior.mu[k].size() != want || prior.tau[k].size() != want ||
          prior.eta[k].size() != want)
        throw DimensionError("prior file: choice " + std::to_string(k) + " needs " +
                             std::to_string(want) + " angle entries");
      if ((prior.tau[k].array() <= 0.0).any())
        throw DomainError("prior file: tau must be positive");
    }
    return prior;
  } catch (const json::exception& e) {
    throw ParseError(std::string("prior file: ") + e.what());
  }
}

std::pair<Dataset, std::vector<double>> curve_template(const ChoiceStructure& sc,
                                                       const Dataset& data,
                                                       const CurveConfig& curve) {
  data.validate(sc);
  if (data.N < 1) throw DimensionError("curve_template: the dataset is empty");
  if (sc.n_a == 0)
    throw DomainError("curve_template: the model has no alternative-specific covariates");
  if (curve.points < 2) throw DomainError("curve_template: the grid needs at least 2 points");
  if (curve.choice < 0 || curve.choice >= sc.K)
    throw DimensionError("curve_template: choice outside [0, " + std::to_string(sc.K) + ")");
  if (curve.alternative < 0 || curve.alternative > sc.J[curve.choice])
    throw DimensionError("curve_template: alternative outside [0, " +
                         std::to_string(sc.J[curve.choice]) + "]");
  if (curve.covariate < 0 || curve.covariate >= sc.n_a)
    throw DimensionError("curve_template: covariate outside [0, " + std::to_string(sc.n_a) + ")");
  if (!(curve.span > 0.0)) throw DomainError("curve_template: span must be positive");

  Dataset tmpl;
  tmpl.N = 1;
  tmpl.y = IntMatrix::Zero(1, sc.K);
  tmpl.x_d.resize(1, sc.n_d);
  if (sc.n_d > 0) tmpl.x_d = data.x_d.colwise().mean();
  tmpl.x_a.resize(static_cast<std::size_t>(sc.K));
  for (int k = 0; k < sc.K; ++k) {
    tmpl.x_a[k].resize(1, data.x_a[k].cols());
    tmpl.x_a[k] = data.x_a[k].colwise().mean();
  }

  const int col = curve.alternative * sc.n_a + curve.covariate;
  const Vector swept = data.x_a[curve.choice].col(col);
  const double center = swept.mean();
  double spread = std::sqrt((swept.array() - center).square().sum() /
                            std::max<double>(1.0, swept.size() - 1.0));
  if (!(spread > 0.0) || !std::isfinite(spread)) spread = 1.0;
  std::vector<double> grid(static_cast<std::size_t>(curve.points));
  const double lo = center - curve.span * spread;
  const double step = 2.0 * curve.span * spread / (curve.points - 1);
  for (int g = 0; g < curve.points; ++g) grid[static_cast<std::size_t>(g)] = lo + step * g;
  return {std::move(tmpl), std::move(grid)};
}

void write_comparison_csv(const std::string& path, const std::vector<ComparisonBlock>& blocks) {
  std::vector<std::vector<std::string>> rows;
  for (const ComparisonBlock& blk : blocks) {
    for (Eigen::Index i = 0; i < blk.mean_a.size(); ++i)
      rows.push_back({"pair", blk.block, blk.label[static_cast<std::size_t>(i)],
                      format_double(blk.mean_a(i)), format_double(blk.mean_b(i)),
                      format_double(blk.sd_a(i)), format_double(blk.sd_b(i))});
    rows.push_back(
        {"summary", blk.block, "correlation", format_double(blk.correlation), "", "", ""});
    rows.push_back(
        {"summary", blk.block, "max_abs_dev", format_double(blk.max_abs_dev), "", "", ""});
  }
  write_table_csv(path, {"kind", "block", "label", "mean_a", "mean_b", "sd_a", "sd_b"}, rows);
}

std::string fnv1a_file_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open for checksumming");
  std::uint64_t hash = 1469598103934665603ull;
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      hash ^= static_cast<unsigned char>(buf[i]);
      hash *= 1099511628211ull;
    }
    if (got < static_cast<std::streamsize>(sizeof(buf))) break;
  }
  return hex64(hash);
}

namespace {

struct FittedEstimator {
  EstimatorChoice est;
  DrawSource source;  // empty for the naive frequency forecast
};

}  // namespace

RunManifest run_experiment(const ExperimentConfig& cfg, WorkerPool* pool) {
  const PhaseTimer total;
  RunManifest man;
  man.version = kVersion;
  man.config_json = experiment_config_json(cfg);

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  std::error_code ec;
  // A manifest certifies a completed run, so any stale one goes first.
  fs::remove(out / "manifest.json", ec);
  fs::remove(out / "manifest.json.tmp", ec);

  std::optional<WorkerPool> owned;
  WorkerPool* wp = pool;
  if (wp == nullptr && cfg.threads > 1) {
    owned.emplace(cfg.threads);
    wp = &*owned;
  }

  auto timed = [&man](const std::string& phase, auto&& fn) {
    const PhaseTimer timer;
    fn();
    man.timings.emplace_back(phase, timer.seconds());
  };
  auto record_file = [&man, &out](const std::string& name) {
    ManifestFile f;
    f.name = name;
    f.bytes = static_cast<std::uint64_t>(fs::file_size(out / name));
    f.fnv1a64 = fnv1a_file_hex((out / name).string());
    man.files.push_back(std::move(f));
  };

  try {
    const ChoiceStructure& sc = cfg.sc;

    Dataset all;
    std::optional<SyntheticTruth> truth;
    std::vector<int> train_rows, test_rows;
    timed("data", [&] {
      if (cfg.data_csv.empty()) {
        SyntheticData syn = generate_synthetic(sc, cfg.n_train + cfg.n_test, cfg.seed);
        all = std::move(syn.data);
        truth = std::move(syn.truth);
        // Generated rows are exchangeable, so the leading block trains; this
        // keeps the training set stable as n_test grows.
        for (int i = 0; i < cfg.n_train; ++i) train_rows.push_back(i);
        for (int i = cfg.n_train; i < cfg.n_train + cfg.n_test; ++i) test_rows.push_back(i);
        man.notes["data"] = "synthetic";
        man.notes["truth_scale"] =
            "truth is reported on the identified scale: per-choice unit-trace-average "
            "covariance with coefficients rescaled to match; the raw pair is outcome-equivalent";
      } else {
        all = load_csv(cfg.data_csv, sc);
        const SplitIndices split = split_dataset(all.N, cfg.train_fraction, cfg.seed);
        train_rows = split.train;
        test_rows = split.test;
        man.notes["data"] = cfg.data_csv;
      }
      man.notes["n_train"] = std::to_string(train_rows.size());
      man.notes["n_test"] = std::to_string(test_rows.size());
    });

    const Dataset train = subset_dataset(sc, all, train_rows);
    const DesignMatrix design_all = build_design(sc, all);
    const DesignMatrix design_train = build_design(sc, train);

    bool needs_prior = false;
    for (const EstimatorChoice& est : cfg.estimators)
      needs_prior = needs_prior || est.kind == "mcmc" || est.kind == "vb";
    AnglePrior prior;
    if (needs_prior)
      timed("calibrate", [&] {
        prior = calibrate_angle_prior(sc, cfg.prior, cfg.calibration_draws, cfg.seed, wp);
      });

    std::vector<FittedEstimator> fitted;
    std::vector<std::pair<std::string, VbResult>> vb_fits;
    std::optional<McmcResult> chain;
    for (const EstimatorChoice& est : cfg.estimators) {
      timed("fit " + est.label(), [&] {
        FittedEstimator f;
        f.est = est;
        if (est.kind == "oracle") {
          if (!truth) throw DomainError("run_experiment: the oracle needs generator truth");
          f.source = fixed_draw_source(truth->beta, truth->sigma);
        } else if (est.kind == "naive") {
          // Frequency forecast; no parameter draws.
        } else if (est.kind == "mcmc") {
          McmcConfig mc = cfg.mcmc;
          mc.seed = cfg.seed;
          chain = run_mcmc(sc, train, design_train, prior, mc, wp);
          f.source = mcmc_draw_source(sc, *chain);
          man.notes["mcmc_accept_rate_mean"] = format_double(chain->accept_rate.mean());
          man.notes["mcmc_stored"] = std::to_string(chain->stored);
        } else if (est.kind == "vb") {
          VbConfig vc = cfg.vb;
          vc.seed = cfg.seed;
          vc.subsample_fraction = est.fraction;
          VbResult res = run_vb(sc, train, design_train, prior, vc, wp);
          f.source = vb_draw_source(sc, res.lambda, cfg.seed, false);
          vb_fits.emplace_back(est.label(), std::move(res));
        } else {
          VbConfig vc = cfg.vb;
          vc.seed = cfg.seed;
          VbResult res = run_vb_identity(sc, train, design_train, vc, wp);
          f.source = vb_draw_source(sc, res.lambda, cfg.seed, true);
          vb_fits.emplace_back(est.label(), std::move(res));
        }
        fitted.push_back(std::move(f));
      });
    }

    auto forecast = [&](const FittedEstimator& f, const std::vector<int>& obs) {
      if (f.est.kind == "naive") return naive_forecast(sc, train.y, obs);
      return draw_predictive(sc, design_all, obs, f.source, cfg.predictive_draws, cfg.seed, wp,
                             f.est.label());
    };

    std::vector<std::string> score_header = {"sample", "metric", "choice"};
    for (const FittedEstimator& f : fitted) score_header.push_back(f.est.label());
    std::vector<std::vector<std::string>> score_rows;
    timed("predict", [&] {
      auto score_sample = [&](const std::string& sample, const std::vector<int>& obs) {
        if (obs.empty()) return;
        std::vector<ScoreReport> reports;
        for (const FittedEstimator& f : fitted) {
          const PredictiveSummary summary = forecast(f, obs);
          ScoreReport rep = score_pmfs(sc, summary, all.y);
          man.notes["floored_" + sample + "_" + f.est.label()] =
              std::to_string(rep.floored_cells);
          reports.push_back(std::move(rep));
        }
        auto emit = [&](const std::string& metric, auto&& pick) {
          for (int k = 0; k <= sc.K; ++k) {
            const bool total = k == sc.K;
            std::vector<std::string> row = {sample, metric,
                                            total ? std::string("total") : std::to_string(k)};
            for (const ScoreReport& rep : reports) row.push_back(format_double(pick(rep, k)));
            score_rows.push_back(std::move(row));
          }
        };
        emit("log_score", [&](const ScoreReport& rep, int k) {
          return k == sc.K ? rep.log_score.sum() : rep.log_score(k);
        });
        emit("hit_rate", [&](const ScoreReport& rep, int k) {
          return k == sc.K ? rep.hit_rate.mean() : rep.hit_rate(k);
        });
      };
      score_sample("train", train_rows);
      score_sample("test", test_rows);
      write_table_csv((out / "scores.csv").string(), score_header, score_rows);
    });
    record_file("scores.csv");

    timed("curves", [&] {
      std::vector<std::vector<std::string>> rows;
      if (cfg.curve.enabled) {
        const auto [tmpl, grid] = curve_template(sc, train, cfg.curve);
        for (const FittedEstimator& f : fitted) {
          if (f.est.kind == "naive") continue;  // flat in the covariates by construction
          const std::vector<CurvePoint> pts =
              price_response_curve(sc, tmpl, cfg.curve.choice, cfg.curve.alternative,
                                   cfg.curve.covariate, grid, f.source, cfg.curve.draws, cfg.seed,
                                   wp);
          for (const CurvePoint& pt : pts)
            for (int c = 0; c < pt.prob.size(); ++c)
              rows.push_back({f.est.label(), format_double(pt.value), std::to_string(c),
                              format_double(pt.prob(c))});
        }
      }
      write_table_csv((out / "curves.csv").string(),
                      {"estimator", "value", "category", "probability"}, rows);
    });
    record_file("curves.csv");

    timed("compare", [&] {
      const FittedEstimator* vb_side = nullptr;
      int vb_rank = 3;  // full fit beats subsampled beats identity
      const FittedEstimator* mcmc_side = nullptr;
      for (const FittedEstimator& f : fitted) {
        if (f.est.kind == "mcmc" && mcmc_side == nullptr) mcmc_side = &f;
        int rank = 3;
        if (f.est.kind == "vb") rank = f.est.fraction >= 1.0 ? 0 : 1;
        if (f.est.kind == "vb-identity") rank = 2;
        if (rank < vb_rank) {
          vb_rank = rank;
          vb_side = &f;
        }
      }
      std::vector<ComparisonBlock> blocks;
      if (vb_side != nullptr && mcmc_side != nullptr && chain.has_value()) {
        const PosteriorSummary a =
            summarize_posterior(sc, vb_side->source, cfg.predictive_draws);
        const PosteriorSummary b = summarize_posterior(sc, mcmc_side->source, chain->stored);
        man.notes["compare"] = vb_side->est.label() + " vs mcmc";
        blocks = compare_posteriors(a, b);
      }
      write_comparison_csv((out / "posterior_compare.csv").string(), blocks);
    });
    record_file("posterior_compare.csv");

    timed("write", [&] {
      std::ofstream lj((out / "lambda.json").string(), std::ios::binary);
      if (!lj) throw ParseError((out / "lambda.json").string() + ": cannot open for writing");
      lj << vb_fits_json(sc, vb_fits) << "\n";
      lj.close();
      if (chain.has_value()) write_chain_csv(sc, *chain, (out / "chain.csv").string());
    });
    record_file("lambda.json");
    if (chain.has_value()) record_file("chain.csv");

    man.timings.emplace_back("total", total.seconds());

    json mj;
    mj["version"] = man.version;
    mj["config"] = json::parse(man.config_json);
    json timings = json::object();
    for (const auto& [phase, seconds] : man.timings) timings[phase] = seconds;
    mj["timings"] = timings;
    json files = json::array();
    for (const ManifestFile& f : man.files)
      files.push_back({{"name", f.name}, {"bytes", f.bytes}, {"fnv1a64", f.fnv1a64}});
    mj["files"] = files;
    mj["notes"] = man.notes;
    {
      std::ofstream mf((out / "manifest.json.tmp").string(), std::ios::binary);
      if (!mf)
        throw ParseError((out / "manifest.json.tmp").string() + ": cannot open for writing");
      mf << mj.dump(2) << "\n";
    }
    fs::rename(out / "manifest.json.tmp", out / "manifest.json");
    return man;
  } catch (...) {
    std::error_code cleanup;
    fs::remove(out / "manifest.json.tmp", cleanup);
    throw;
  }
}

}  // namespace mvmnp
