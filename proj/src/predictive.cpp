#include "mvmnp/predictive.hpp"

#include "mvmnp/covariance.hpp"
#include "mvmnp/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace mvmnp {

namespace {

constexpr std::int64_t kGrain = 256;
// Draw indices feed the 24-bit iteration field of the stream id.
constexpr std::int64_t kMaxDraws = std::int64_t{1} << 24;

template <typename F>
void over_chunks(WorkerPool* pool, std::int64_t count, const F& f) {
  if (pool) {
    pool->for_chunks(0, count, kGrain, f);
  } else {
    const std::int64_t chunks = (count + kGrain - 1) / kGrain;
    for (std::int64_t c = 0; c < chunks; ++c) f(c, c * kGrain, std::min(count, (c + 1) * kGrain));
  }
}

inline std::int64_t chunk_count(std::int64_t count) { return (count + kGrain - 1) / kGrain; }

void check_draw_count(const char* where, std::int64_t draws) {
  if (draws < 1) throw DomainError(std::string(where) + ": draws must be positive");
  if (draws > kMaxDraws)
    throw DomainError(std::string(where) + ": draws " + std::to_string(draws) +
                      " exceeds the 2^24 stream budget");
}

void check_draw(const ChoiceStructure& sc, const ParameterDraw& draw, std::int64_t m) {
  if (draw.beta.size() != sc.r || draw.chol_l.rows() != sc.J_total ||
      draw.chol_l.cols() != sc.J_total)
    throw DimensionError("predictive: draw " + std::to_string(m) + " has beta length " +
                         std::to_string(draw.beta.size()) + " and factor " +
                         std::to_string(draw.chol_l.rows()) + "x" +
                         std::to_string(draw.chol_l.cols()) + ", expected " + std::to_string(sc.r) +
                         " and " + std::to_string(sc.J_total) + "x" + std::to_string(sc.J_total));
}

}  // namespace

DrawSource fixed_draw_source(const Vector& beta, const Matrix& sigma) {
  if (sigma.rows() != sigma.cols())
    throw DimensionError("fixed_draw_source: covariance must be square");
  const Matrix chol = chol_spd(sigma).L;
  const Vector b = beta;
  return [b, chol](std::int64_t) { return ParameterDraw{b, chol}; };
}

DrawSource mcmc_draw_source(const ChoiceStructure& sc, const McmcResult& chain) {
  if (chain.stored < 1) throw DimensionError("mcmc_draw_source: chain holds no draws");
  if (chain.beta.rows() != chain.stored || chain.beta.cols() != sc.r ||
      chain.kappa.rows() != chain.stored || chain.kappa.cols() != sc.n_angles)
    throw DimensionError("mcmc_draw_source: chain shape does not match the structure");
  auto betas = std::make_shared<std::vector<Vector>>();
  auto chols = std::make_shared<std::vector<Matrix>>();
  betas->reserve(static_cast<std::size_t>(chain.stored));
  chols->reserve(static_cast<std::size_t>(chain.stored));
  for (std::int64_t s = 0; s < chain.stored; ++s) {
    betas->push_back(chain.beta.row(s).transpose());
    const FactorCovariance fc = assemble_covariance_from_angles(sc, chain.kappa.row(s).transpose());
    chols->push_back(chol_spd(fc.sigma).L);
  }
  const std::int64_t stored = chain.stored;
  return [betas, chols, stored](std::int64_t m) {
    const std::int64_t row = m % stored;
    return ParameterDraw{(*betas)[static_cast<std::size_t>(row)],
                         (*chols)[static_cast<std::size_t>(row)]};
  };
}

DrawSource vb_draw_source(const ChoiceStructure& sc, const VariationalParams& lam,
                          std::uint64_t seed, bool identity) {
  const int want = identity ? sc.r : sc.theta_dim;
  if (lam.m() != want)
    throw DimensionError("vb_draw_source: variational dimension " + std::to_string(lam.m()) +
                         ", expected " + std::to_string(want));
  const std::uint64_t theta_seed = derive_seed(seed, "theta");
  const VariationalParams q = lam;
  const ChoiceStructure structure = sc;
  return [structure, q, theta_seed, identity](std::int64_t m) {
    Rng rng = make_stream(theta_seed, StreamPurpose::predictive, static_cast<std::uint64_t>(m));
    Vector w(q.s());
    Vector eps(q.m());
    for (int j = 0; j < q.s(); ++j) w(j) = rng.normal();
    for (int j = 0; j < q.m(); ++j) eps(j) = rng.normal();
    const Vector theta = reparameterize(q, w, eps);
    ParameterDraw draw;
    draw.beta = theta.head(structure.r);
    if (identity) {
      draw.chol_l = Matrix::Identity(structure.J_total, structure.J_total);
    } else {
      const FactorCovariance fc =
          assemble_covariance(structure, theta.tail(structure.n - structure.K));
      draw.chol_l = chol_spd(fc.sigma).L;
    }
    return draw;
  };
}

PredictiveSummary draw_predictive(const ChoiceStructure& sc, const DesignMatrix& design,
                                  const std::vector<int>& obs, const DrawSource& source,
                                  std::int64_t draws, std::uint64_t seed, WorkerPool* pool,
                                  const std::string& label) {
  if (!source) throw DomainError("draw_predictive: empty draw source");
  check_draw_count("draw_predictive", draws);
  const int T = static_cast<int>(obs.size());
  for (int t = 0; t < T; ++t)
    if (obs[t] < 0 || obs[t] >= design.N)
      throw DimensionError("draw_predictive: observation index " + std::to_string(obs[t]) +
                           " outside [0, " + std::to_string(design.N) + ")");

  const std::int64_t chunks = chunk_count(draws);
  std::vector<std::vector<IntMatrix>> partial(static_cast<std::size_t>(chunks));
  over_chunks(pool, draws, [&](std::int64_t c, std::int64_t lo, std::int64_t hi) {
    std::vector<IntMatrix> counts(static_cast<std::size_t>(sc.K));
    for (int k = 0; k < sc.K; ++k) counts[k] = IntMatrix::Zero(T, sc.J[k] + 1);
    Vector mean(sc.J_total), eps(sc.J_total), z(sc.J_total);
    for (std::int64_t m = lo; m < hi; ++m) {
      const ParameterDraw draw = source(m);
      check_draw(sc, draw, m);
      for (int t = 0; t < T; ++t) {
        const int i = obs[t];
        design.mean_into(i, draw.beta, mean);
        Rng rng = make_stream(seed, StreamPurpose::predictive, static_cast<std::uint64_t>(m),
                              static_cast<std::uint64_t>(i));
        for (int j = 0; j < sc.J_total; ++j) eps(j) = rng.normal();
        z = mean;
        z.noalias() += draw.chol_l.triangularView<Eigen::Lower>() * eps;
        for (int k = 0; k < sc.K; ++k)
          ++counts[k](t, outcome_from_utilities(z.segment(sc.util_offset[k], sc.J[k])));
      }
    }
    partial[static_cast<std::size_t>(c)] = std::move(counts);
  });

  std::vector<IntMatrix> total(static_cast<std::size_t>(sc.K));
  for (int k = 0; k < sc.K; ++k) total[k] = IntMatrix::Zero(T, sc.J[k] + 1);
  for (std::int64_t c = 0; c < chunks; ++c)
    for (int k = 0; k < sc.K; ++k) total[k] += partial[static_cast<std::size_t>(c)][k];

  PredictiveSummary out;
  out.obs = obs;
  out.draws = draws;
  out.seed = seed;
  out.source = label;
  out.pmf.resize(static_cast<std::size_t>(T));
  const double inv = 1.0 / static_cast<double>(draws);
  for (int t = 0; t < T; ++t) {
    out.pmf[t].resize(static_cast<std::size_t>(sc.K));
    for (int k = 0; k < sc.K; ++k) out.pmf[t][k] = total[k].row(t).transpose().cast<double>() * inv;
  }
  return out;
}

PredictiveSummary naive_forecast(const ChoiceStructure& sc, const IntMatrix& y_train,
                                 const std::vector<int>& obs) {
  const int n_train = static_cast<int>(y_train.rows());
  if (n_train < 1) throw DimensionError("naive_forecast: empty training outcomes");
  if (y_train.cols() != sc.K)
    throw DimensionError("naive_forecast: outcome columns " + std::to_string(y_train.cols()) +
                         ", expected " + std::to_string(sc.K));
  std::vector<Vector> freq(static_cast<std::size_t>(sc.K));
  for (int k = 0; k < sc.K; ++k) freq[k] = Vector::Zero(sc.J[k] + 1);
  for (int i = 0; i < n_train; ++i)
    for (int k = 0; k < sc.K; ++k) {
      const int cat = y_train(i, k);
      if (cat < 0 || cat > sc.J[k])
        throw DimensionError("naive_forecast: category " + std::to_string(cat) + " at row " +
                             std::to_string(i) + " outside [0, " + std::to_string(sc.J[k]) + "]");
      freq[k](cat) += 1.0;
    }
  for (int k = 0; k < sc.K; ++k) freq[k] /= static_cast<double>(n_train);

  PredictiveSummary out;
  out.obs = obs;
  out.draws = n_train;
  out.seed = 0;
  out.source = "naive";
  out.pmf.assign(obs.size(), freq);
  return out;
}

ScoreReport score_pmfs(const ChoiceStructure& sc, const PredictiveSummary& summary,
                       const IntMatrix& y) {
  const int T = static_cast<int>(summary.obs.size());
  if (T == 0) throw DimensionError("score_pmfs: empty predictive table");
  if (summary.pmf.size() != summary.obs.size())
    throw DimensionError("score_pmfs: pmf table and observation list disagree");
  if (summary.draws < 1) throw DomainError("score_pmfs: summary has a nonpositive draw count");
  if (y.cols() != sc.K)
    throw DimensionError("score_pmfs: outcome columns " + std::to_string(y.cols()) +
                         ", expected " + std::to_string(sc.K));

  ScoreReport rep;
  rep.floor = 1.0 / (10.0 * static_cast<double>(summary.draws));
  rep.log_score = Vector::Zero(sc.K);
  rep.hit_rate = Vector::Zero(sc.K);
  for (int t = 0; t < T; ++t) {
    const int i = summary.obs[t];
    if (i < 0 || i >= y.rows())
      throw DimensionError("score_pmfs: observation index " + std::to_string(i) + " outside [0, " +
                           std::to_string(y.rows()) + ")");
    if (static_cast<int>(summary.pmf[t].size()) != sc.K)
      throw DimensionError("score_pmfs: pmf row " + std::to_string(t) + " has " +
                           std::to_string(summary.pmf[t].size()) + " choices, expected " +
                           std::to_string(sc.K));
    for (int k = 0; k < sc.K; ++k) {
      const Vector& p = summary.pmf[t][k];
      if (p.size() != sc.J[k] + 1)
        throw DimensionError("score_pmfs: pmf of observation " + std::to_string(i) + " choice " +
                             std::to_string(k) + " has " + std::to_string(p.size()) +
                             " cells, expected " + std::to_string(sc.J[k] + 1));
      const int cat = y(i, k);
      if (cat < 0 || cat > sc.J[k])
        throw DimensionError("score_pmfs: outcome " + std::to_string(cat) + " at row " +
                             std::to_string(i) + " outside [0, " + std::to_string(sc.J[k]) + "]");
      double prob = p(cat);
      if (prob < rep.floor) {
        prob = rep.floor;
        ++rep.floored_cells;
      }
      rep.log_score(k) += std::log(prob);
      int mode = 0;
      for (int c = 1; c < p.size(); ++c)
        if (p(c) > p(mode)) mode = c;
      if (mode == cat) rep.hit_rate(k) += 1.0;
    }
  }
  rep.log_score /= static_cast<double>(T);
  rep.hit_rate /= static_cast<double>(T);
  return rep;
}

std::vector<CurvePoint> price_response_curve(const ChoiceStructure& sc,
                                             const Dataset& covariate_template, int k, int alt,
                                             int cov, const std::vector<double>& grid,
                                             const DrawSource& source, std::int64_t draws,
                                             std::uint64_t seed, WorkerPool* pool) {
  if (!source) throw DomainError("price_response_curve: empty draw source");
  check_draw_count("price_response_curve", draws);
  if (grid.empty()) throw DomainError("price_response_curve: empty grid");
  if (k < 0 || k >= sc.K)
    throw DimensionError("price_response_curve: choice " + std::to_string(k) + " outside [0, " +
                         std::to_string(sc.K) + ")");
  if (alt < 0 || alt > sc.J[k])
    throw DimensionError("price_response_curve: alternative " + std::to_string(alt) +
                         " outside [0, " + std::to_string(sc.J[k]) + "]");
  if (cov < 0 || cov >= sc.n_a)
    throw DimensionError("price_response_curve: covariate " + std::to_string(cov) +
                         " outside [0, " + std::to_string(sc.n_a) + ")");
  covariate_template.validate(sc);
  if (covariate_template.N < 1)
    throw DimensionError("price_response_curve: template dataset is empty");

  const int G = static_cast<int>(grid.size());
  Dataset sweep;
  sweep.N = G;
  sweep.y = IntMatrix::Zero(G, sc.K);
  sweep.x_d.resize(G, covariate_template.x_d.cols());
  for (int g = 0; g < G; ++g) sweep.x_d.row(g) = covariate_template.x_d.row(0);
  sweep.x_a.resize(static_cast<std::size_t>(sc.K));
  for (int kk = 0; kk < sc.K; ++kk) {
    sweep.x_a[kk].resize(G, covariate_template.x_a[kk].cols());
    for (int g = 0; g < G; ++g) sweep.x_a[kk].row(g) = covariate_template.x_a[kk].row(0);
  }
  for (int g = 0; g < G; ++g) sweep.x_a[k](g, alt * sc.n_a + cov) = grid[g];
  const DesignMatrix design = build_design(sc, sweep);

  const int cats = sc.J[k] + 1;
  const std::int64_t chunks = chunk_count(draws);
  std::vector<IntMatrix> partial(static_cast<std::size_t>(chunks));
  over_chunks(pool, draws, [&](std::int64_t c, std::int64_t lo, std::int64_t hi) {
    IntMatrix counts = IntMatrix::Zero(G, cats);
    Vector eps(sc.J_total), shock(sc.J_total), mean(sc.J_total), z(sc.J_total);
    for (std::int64_t m = lo; m < hi; ++m) {
      const ParameterDraw draw = source(m);
      check_draw(sc, draw, m);
      Rng rng = make_stream(seed, StreamPurpose::predictive, static_cast<std::uint64_t>(m));
      for (int j = 0; j < sc.J_total; ++j) eps(j) = rng.normal();
      shock.noalias() = draw.chol_l.triangularView<Eigen::Lower>() * eps;
      for (int g = 0; g < G; ++g) {
        design.mean_into(g, draw.beta, mean);
        z = mean + shock;
        ++counts(g, outcome_from_utilities(z.segment(sc.util_offset[k], sc.J[k])));
      }
    }
    partial[static_cast<std::size_t>(c)] = std::move(counts);
  });

  IntMatrix total = IntMatrix::Zero(G, cats);
  for (std::int64_t c = 0; c < chunks; ++c) total += partial[static_cast<std::size_t>(c)];

  std::vector<CurvePoint> out(static_cast<std::size_t>(G));
  const double inv = 1.0 / static_cast<double>(draws);
  for (int g = 0; g < G; ++g) {
    out[g].value = grid[g];
    out[g].prob = total.row(g).transpose().cast<double>() * inv;
  }
  return out;
}

PredictiveSummary pool_base_category(const std::vector<PredictiveSummary>& tables) {
  if (tables.empty()) throw DimensionError("pool_base_category: nothing to pool");
  const PredictiveSummary& head = tables.front();
  PredictiveSummary out = head;
  for (std::size_t a = 1; a < tables.size(); ++a) {
    const PredictiveSummary& tab = tables[a];
    if (tab.obs != head.obs)
      throw DimensionError("pool_base_category: observation lists differ at table " +
                           std::to_string(a));
    if (tab.pmf.size() != head.pmf.size())
      throw DimensionError("pool_base_category: table sizes differ at table " + std::to_string(a));
    // The pooled floor follows the coarsest member.
    out.draws = std::min(out.draws, tab.draws);
    out.source += "+" + tab.source;
    for (std::size_t t = 0; t < out.pmf.size(); ++t) {
      if (tab.pmf[t].size() != out.pmf[t].size())
        throw DimensionError("pool_base_category: choice counts differ at table " +
                             std::to_string(a));
      for (std::size_t kk = 0; kk < out.pmf[t].size(); ++kk) {
        if (tab.pmf[t][kk].size() != out.pmf[t][kk].size())
          throw DimensionError("pool_base_category: category counts differ at table " +
                               std::to_string(a));
        out.pmf[t][kk] += tab.pmf[t][kk];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(tables.size());
  for (auto& row : out.pmf)
    for (auto& p : row) p *= inv;
  return out;
}

std::vector<CurvePoint> pool_base_category(const std::vector<std::vector<CurvePoint>>& curves) {
  if (curves.empty()) throw DimensionError("pool_base_category: nothing to pool");
  std::vector<CurvePoint> out = curves.front();
  for (std::size_t a = 1; a < curves.size(); ++a) {
    const std::vector<CurvePoint>& cur = curves[a];
    if (cur.size() != out.size())
      throw DimensionError("pool_base_category: grid lengths differ at curve " + std::to_string(a));
    for (std::size_t g = 0; g < out.size(); ++g) {
      if (cur[g].value != out[g].value)
        throw DimensionError("pool_base_category: grid points differ at curve " +
                             std::to_string(a));
      if (cur[g].prob.size() != out[g].prob.size())
        throw DimensionError("pool_base_category: category counts differ at curve " +
                             std::to_string(a));
      out[g].prob += cur[g].prob;
    }
  }
  const double inv = 1.0 / static_cast<double>(curves.size());
  for (auto& pt : out) pt.prob *= inv;
  return out;
}

}  // namespace mvmnp
