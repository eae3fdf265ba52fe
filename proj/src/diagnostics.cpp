#include "bplnlc/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <future>

#include "bplnlc/synth.hpp"

namespace bplnlc {

namespace {

Eigen::Index idx(std::size_t k) { return static_cast<Eigen::Index>(k); }

// Bounded, so its second moment is not dominated by rare wide paths.
double lag1_autocorr(const Eigen::VectorXd& v) {
  const double mu = v.mean();
  double acc = 0.0, ss = 0.0;
  for (Eigen::Index t = 0; t < v.size(); ++t) ss += (v[t] - mu) * (v[t] - mu);
  for (Eigen::Index t = 0; t + 1 < v.size(); ++t) acc += (v[t] - mu) * (v[t + 1] - mu);
  return ss > 0.0 ? acc / ss : 0.0;
}

MortalityDataset gir_layout(const GirConfig& cfg) {
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < cfg.n_pops; ++i) labels.push_back("pop" + std::to_string(i + 1));
  MortalityDataset d(labels, 0, cfg.n_ages, 1, cfg.n_years);
  for (std::size_t i = 0; i < cfg.n_pops; ++i)
    for (std::size_t x = 0; x < cfg.n_ages; ++x)
      for (std::size_t t = 0; t < cfg.n_years; ++t) d.set_cell(i, x, t, 0, cfg.exposure, false);
  return d;
}

// Marginal-conditional simulator: iid prior draws, each with its own data set.
std::vector<std::vector<double>> marginal_conditional(const Hyperparams& h, const GirConfig& cfg,
                                                      std::uint64_t stream) {
  const MortalityDataset layout = gir_layout(cfg);
  const DriftDesign design = DriftDesign::from_dataset(layout);
  Rng rng(cfg.seed, stream);
  const double no_cap = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> out;
  out.reserve(cfg.prior_samples);
  for (std::size_t k = 0; k < cfg.prior_samples; ++k) {
    ModelState s = draw_from_prior(h, cfg.n_pops, cfg.n_ages, design, true, rng, no_cap);
    // Data are simulated for completeness of the joint draw; the test
    // functions only read the parameters.
    (void)simulate_deaths(s, layout, rng);
    out.push_back(gir_evaluate(s));
  }
  return out;
}

// Successive-conditional simulator: alternate a sweep with fresh data.
std::vector<std::vector<double>> successive_conditional(const Hyperparams& h, const GirConfig& cfg) {
  MortalityDataset data = gir_layout(cfg);
  const DriftDesign design = DriftDesign::from_dataset(data);
  Rng rng(cfg.seed, 2);
  const double no_cap = std::numeric_limits<double>::infinity();
  ModelState s = draw_from_prior(h, cfg.n_pops, cfg.n_ages, design, true, rng, no_cap);
  data = simulate_deaths(s, data, rng);

  SamplerConfig sc;
  sc.enforce_constraints = false;
  sc.alpha_shape_perturbation = cfg.alpha_shape_perturbation;
  sc.iterations = cfg.burn_in + cfg.sweeps;
  sc.burn_in = cfg.burn_in;
  SamplerContext ctx{data, h, design, sc};
  MhTuner tuner(data, s, sc);

  std::vector<std::vector<double>> out;
  out.reserve(cfg.sweeps);
  for (std::size_t j = 1; j <= cfg.burn_in + cfg.sweeps; ++j) {
    if (j == cfg.burn_in + 1) tuner.freeze();
    try {
      sweep(s, ctx, tuner, rng);
      data = simulate_deaths(s, data, rng);
    } catch (const std::exception& e) {
      throw DiagnosticsError("getting-it-right sweep " + std::to_string(j) + ": " + e.what());
    }
    tuner.end_iteration();
    if (j > cfg.burn_in) out.push_back(gir_evaluate(s));
  }
  return out;
}

struct Moments {
  double mean;
  double se;
};

Moments iid_moments(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double mu = 0.0;
  for (double x : v) mu += x;
  mu /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - mu) * (x - mu);
  return {mu, std::sqrt(ss / (n - 1.0) / n)};
}

Moments batch_moments(const std::vector<double>& v, std::size_t batches) {
  const std::size_t len = v.size() / batches;
  if (len < 2) return iid_moments(v);
  std::vector<double> means;
  for (std::size_t b = 0; b < batches; ++b) {
    double acc = 0.0;
    for (std::size_t k = b * len; k < (b + 1) * len; ++k) acc += v[k];
    means.push_back(acc / static_cast<double>(len));
  }
  double mu = 0.0;
  for (double x : v) mu += x;
  mu /= static_cast<double>(v.size());
  double bm = 0.0;
  for (double x : means) bm += x;
  bm /= static_cast<double>(batches);
  double ss = 0.0;
  for (double x : means) ss += (x - bm) * (x - bm);
  const double var_of_mean = ss / static_cast<double>(batches - 1) / static_cast<double>(batches);
  return {mu, std::sqrt(var_of_mean)};
}

}  // namespace

std::vector<std::array<double, 2>> inclusion_proportions(const std::vector<std::vector<Indicator>>& stream) {
  if (stream.empty()) throw DiagnosticsError("no indicator draws");
  const std::size_t n = stream.front().size();
  std::vector<std::array<double, 2>> out(n, {0.0, 0.0});
  for (const auto& row : stream) {
    if (row.size() != n) throw DiagnosticsError("ragged indicator stream");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < 2; ++l) out[i][l] += row[i][l];
  }
  for (auto& p : out)
    for (double& v : p) v /= static_cast<double>(stream.size());
  return out;
}

std::vector<std::array<double, 2>> inclusion_proportions(const ChainOutput& chain) {
  return inclusion_proportions(chain.indicators);
}

const char* drift_structure_name(DriftStructure d) {
  switch (d) {
    case DriftStructure::None: return "none";
    case DriftStructure::InterceptOnly: return "intercept-only";
    case DriftStructure::SlopeOnly: return "slope-only";
    case DriftStructure::Full: return "full";
  }
  return "?";
}

DriftStructure reduce_model(const std::array<double, 2>& p, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw DiagnosticsError("threshold must lie in (0, 1)");
  const bool a = p[0] > threshold, b = p[1] > threshold;
  if (a && b) return DriftStructure::Full;
  if (a) return DriftStructure::InterceptOnly;
  if (b) return DriftStructure::SlopeOnly;
  return DriftStructure::None;
}

std::map<std::string, double> acceptance_report(const ChainOutput& chain) {
  std::map<std::string, double> out;
  for (const auto& [name, c] : chain.acceptance)
    if (auto r = c.rate()) out[name] = *r;
  return out;
}

TraceSummary summarize_trace(const std::string& name, const std::vector<double>& v) {
  TraceSummary s{name, 0.0, 0.0, 0.0};
  if (v.empty()) return s;
  const double n = static_cast<double>(v.size());
  for (double x : v) s.mean += x;
  s.mean /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.sd = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  if (ss > 0.0 && v.size() > 1) {
    double c = 0.0;
    for (std::size_t k = 0; k + 1 < v.size(); ++k) c += (v[k] - s.mean) * (v[k + 1] - s.mean);
    s.lag1 = c / ss;
  }
  return s;
}

std::vector<TraceSummary> trace_summaries(const std::vector<ModelState>& draws, const StateLayout& layout) {
  const auto names = state_columns(layout);
  std::vector<std::vector<double>> cols(names.size());
  for (const auto& s : draws) {
    auto row = flatten_state(s, layout);
    for (std::size_t k = 0; k < row.size(); ++k) cols[k].push_back(row[k]);
  }
  std::vector<TraceSummary> out;
  for (std::size_t k = 0; k < names.size(); ++k) out.push_back(summarize_trace(names[k], cols[k]));
  return out;
}

// ---------------------------------------------------------------------------

double GirReport::fraction_below(double threshold) const {
  if (stats.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& s : stats)
    if (std::abs(s.z) < threshold) ++ok;
  return static_cast<double>(ok) / static_cast<double>(stats.size());
}

double GirReport::max_abs_z() const {
  double m = 0.0;
  for (const auto& s : stats) m = std::max(m, std::abs(s.z));
  return m;
}

double GirReport::max_abs_z(const std::string& family) const {
  double m = 0.0;
  for (const auto& s : stats)
    if (s.family == family) m = std::max(m, std::abs(s.z));
  return m;
}

Hyperparams gir_hyperparams(std::size_t n_pops) {
  // Shape 20 keeps the variance priors light-tailed: the fourth-moment test
  // functions (squared lag-1 autocovariance) otherwise have enormous variance.
  Hyperparams h;
  h.a_beta = 20.0;
  h.b_beta = 0.76;  // mean 0.04
  h.phi0 = Eigen::Vector2d(0.0, 0.0);
  h.sigma0 = Eigen::Vector2d(1.0, 0.04).asDiagonal();
  h.sigma2_rho = 0.25;
  h.a_kappa = 20.0;
  h.b_kappa = 19.0;  // mean 1
  h.a_p = 2.0;
  h.b_p = 2.0;
  PopulationPriors pp;
  pp.a_e = 3.0;
  pp.b_e = 40.0;  // e around 0.05
  pp.a_beta = 20.0;
  pp.b_beta = 0.76;
  pp.sigma2_rho = 0.25;
  pp.a_kappa = 20.0;
  pp.b_kappa = 19.0;
  pp.a_nu = 20.0;
  pp.b_nu = 0.95;  // mean 0.05
  pp.slab_scale = {1.0, 0.1};
  h.pops.assign(n_pops, pp);
  return h;
}

std::vector<GirFunction> gir_functions(std::size_t n) {
  std::vector<GirFunction> f;
  auto pop = [](const std::string& base, std::size_t i) { return base + "[pop" + std::to_string(i + 1) + "]"; };
  for (std::size_t i = 0; i < n; ++i) f.push_back({pop("alpha_mean", i), "alpha", false});
  f.push_back({"beta_mean", "beta", false});
  for (std::size_t i = 0; i < n; ++i) f.push_back({pop("beta_pop_mean", i), "beta_pop", false});
  f.push_back({"kappa_mean", "kappa", false});
  f.push_back({"kappa_lag1", "kappa", false});
  for (std::size_t i = 0; i < n; ++i) {
    f.push_back({pop("kappa_pop_mean", i), "kappa_pop", false});
    f.push_back({pop("kappa_pop_lag1", i), "kappa_pop", false});
  }
  f.push_back({"phi[1]", "phi", false});
  f.push_back({"phi[2]", "phi", false});
  for (std::size_t i = 0; i < n; ++i) {
    f.push_back({pop("phi_pop", i) + "[1]", "phi_pop", false});
    f.push_back({pop("phi_pop", i) + "[2]", "phi_pop", false});
  }
  f.push_back({"rho", "rho", false});
  for (std::size_t i = 0; i < n; ++i) f.push_back({pop("rho_pop", i), "rho_pop", false});
  f.push_back({"log_sigma2_beta", "variance", false});
  for (std::size_t i = 0; i < n; ++i) f.push_back({pop("log_sigma2_beta_pop", i), "variance", false});
  f.push_back({"log_sigma2_kappa", "variance", false});
  for (std::size_t i = 0; i < n; ++i) f.push_back({pop("log_sigma2_kappa_pop", i), "variance", false});
  for (std::size_t i = 0; i < n; ++i) f.push_back({pop("log_sigma2_nu", i), "variance", false});
  for (std::size_t i = 0; i < n; ++i) {
    f.push_back({pop("w", i) + "[1]", "w", true});
    f.push_back({pop("w", i) + "[2]", "w", true});
  }
  for (std::size_t i = 0; i < n; ++i) f.push_back({pop("p", i), "p", false});
  for (std::size_t i = 0; i < n; ++i) f.push_back({pop("nu_sq_mean", i), "nu", false});
  return f;
}

std::vector<double> gir_evaluate(const ModelState& s) {
  const std::size_t n = s.n_pops();
  std::vector<double> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(s.alpha.row(idx(i)).mean());
  v.push_back(s.beta.mean());
  for (std::size_t i = 0; i < n; ++i) v.push_back(s.beta_pop.row(idx(i)).mean());
  v.push_back(s.kappa.mean());
  v.push_back(lag1_autocorr(s.kappa));
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd k = s.kappa_pop.row(idx(i)).transpose();
    v.push_back(k.mean());
    v.push_back(lag1_autocorr(k));
  }
  v.push_back(s.phi[0]);
  v.push_back(s.phi[1]);
  for (std::size_t i = 0; i < n; ++i) {
    v.push_back(s.phi_pop(idx(i), 0));
    v.push_back(s.phi_pop(idx(i), 1));
  }
  v.push_back(s.rho);
  for (std::size_t i = 0; i < n; ++i) v.push_back(s.rho_pop[idx(i)]);
  v.push_back(std::log(s.sigma2_beta));
  for (std::size_t i = 0; i < n; ++i) v.push_back(std::log(s.sigma2_beta_pop[idx(i)]));
  v.push_back(std::log(s.sigma2_kappa));
  for (std::size_t i = 0; i < n; ++i) v.push_back(std::log(s.sigma2_kappa_pop[idx(i)]));
  for (std::size_t i = 0; i < n; ++i) v.push_back(std::log(s.sigma2_nu[idx(i)]));
  for (std::size_t i = 0; i < n; ++i) {
    v.push_back(s.w[i][0]);
    v.push_back(s.w[i][1]);
  }
  for (std::size_t i = 0; i < n; ++i) v.push_back(s.p[idx(i)]);
  for (std::size_t i = 0; i < n; ++i) v.push_back(s.nu[i].squaredNorm() / static_cast<double>(s.nu[i].size()));
  return v;
}

GirReport getting_it_right(const Hyperparams& h, const GirConfig& cfg) {
  if (cfg.n_ages > 5 || cfg.n_years > 8) throw DiagnosticsError("getting-it-right needs M <= 5 and N <= 8");
  if (cfg.n_ages < 2 || cfg.n_years < 3 || cfg.n_pops < 1) throw DiagnosticsError("dimensions too small");
  if (h.pops.size() != cfg.n_pops) throw DiagnosticsError("hyperparameters do not match the population count");
  if (cfg.prior_samples < 2 || cfg.sweeps < 2 * cfg.batches) throw DiagnosticsError("too few samples");

  auto run_a = [&] { return marginal_conditional(h, cfg, 1); };
  auto run_b = [&] {
    return cfg.self_compare ? marginal_conditional(h, cfg, 3) : successive_conditional(h, cfg);
  };
  std::vector<std::vector<double>> a, b;
  if (cfg.threads > 1) {
    auto fut = std::async(std::launch::async, run_b);
    a = run_a();
    b = fut.get();
  } else {
    a = run_a();
    b = run_b();
  }

  const auto funcs = gir_functions(cfg.n_pops);
  GirReport rep;
  for (std::size_t k = 0; k < funcs.size(); ++k) {
    for (int moment = 1; moment <= 2; ++moment) {
      if (moment == 2 && funcs[k].binary) continue;
      auto column = [&](const std::vector<std::vector<double>>& rows) {
        std::vector<double> c;
        c.reserve(rows.size());
        for (const auto& r : rows) c.push_back(moment == 1 ? r[k] : r[k] * r[k]);
        return c;
      };
      Moments ma = iid_moments(column(a));
      Moments mb = cfg.self_compare ? iid_moments(column(b)) : batch_moments(column(b), cfg.batches);
      GirStatistic st;
      st.name = funcs[k].name + (moment == 1 ? ":m1" : ":m2");
      st.family = funcs[k].family;
      st.mean_prior = ma.mean;
      st.mean_chain = mb.mean;
      st.se_prior = ma.se;
      st.se_chain = mb.se;
      const double se = std::sqrt(ma.se * ma.se + mb.se * mb.se);
      st.z = se > 0.0 ? (ma.mean - mb.mean) / se : (ma.mean == mb.mean ? 0.0 : std::copysign(1e300, ma.mean - mb.mean));
      rep.stats.push_back(st);
    }
  }
  return rep;
}

}  // namespace bplnlc
