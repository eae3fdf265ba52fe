#include "bplnlc/forecast.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <thread>

namespace bplnlc {

namespace {

Eigen::Index idx(std::size_t k) { return static_cast<Eigen::Index>(k); }

constexpr double kMaxMean = 1e12;

std::size_t window_count(std::size_t n, double level) {
  return static_cast<std::size_t>(std::ceil(level * static_cast<double>(n) - 1e-9));
}

Eigen::VectorXd ar1_forward(double last, const Eigen::Vector2d& phi, double rho, double sigma2,
                            const DriftDesign& design, std::size_t horizon, Rng& rng) {
  Eigen::VectorXd out(idx(horizon));
  const double t_last = design.year(design.size() - 1);
  const double sd = std::sqrt(sigma2);
  double prev = last;
  for (std::size_t h = 1; h <= horizon; ++h) {
    const double t = t_last + static_cast<double>(h);
    const double mean = design.eta_at_year(phi, t) + rho * (prev - design.eta_at_year(phi, t - 1.0));
    prev = mean + sd * rng.normal();
    out[idx(h - 1)] = prev;
  }
  return out;
}

template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& body) {
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&] {
    for (std::size_t k = next++; k < n; k = next++) {
      try {
        body(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

FuturePaths forecast_kappa(const ModelState& s, const DriftDesign& design, std::size_t horizon, Rng& rng) {
  FuturePaths out;
  const std::size_t nt = s.n_years();
  if (design.size() != nt) throw ForecastError("design length does not match the state");
  out.kappa = ar1_forward(s.kappa[idx(nt - 1)], s.phi, s.rho, s.sigma2_kappa, design, horizon, rng);
  out.kappa_pop.resize(idx(s.n_pops()), idx(horizon));
  for (std::size_t i = 0; i < s.n_pops(); ++i) {
    Eigen::Vector2d phi = s.phi_pop.row(idx(i)).transpose();
    out.kappa_pop.row(idx(i)) = ar1_forward(s.kappa_pop(idx(i), idx(nt - 1)), phi, s.rho_pop[idx(i)],
                                            s.sigma2_kappa_pop[idx(i)], design, horizon, rng)
                                    .transpose();
  }
  return out;
}

Eigen::VectorXd predictive_log_rate_row(const ModelState& s, const FuturePaths& future, std::size_t i,
                                        std::size_t x, OverdispersionMode mode, Rng& rng) {
  const std::size_t nt = s.n_years();
  const std::size_t h = static_cast<std::size_t>(future.kappa.size());
  Eigen::VectorXd out(idx(nt + h));
  for (std::size_t t = 0; t < nt; ++t) out[idx(t)] = linear_predictor(s, i, x, t);
  const double sd = std::sqrt(s.sigma2_nu[idx(i)]);
  for (std::size_t k = 0; k < h; ++k) {
    double v = s.alpha(idx(i), idx(x)) + s.beta[idx(x)] * future.kappa[idx(k)] +
               s.beta_pop(idx(i), idx(x)) * future.kappa_pop(idx(i), idx(k));
    if (mode == OverdispersionMode::Resample) v += sd * rng.normal();
    out[idx(nt + k)] = v;
  }
  return out;
}

std::vector<Eigen::MatrixXd> predictive_log_rates(const ModelState& s, const FuturePaths& future,
                                                  OverdispersionMode mode, Rng& rng) {
  const std::size_t cols = s.n_years() + static_cast<std::size_t>(future.kappa.size());
  std::vector<Eigen::MatrixXd> out(s.n_pops(), Eigen::MatrixXd(idx(s.n_ages()), idx(cols)));
  for (std::size_t i = 0; i < s.n_pops(); ++i)
    for (std::size_t x = 0; x < s.n_ages(); ++x)
      out[i].row(idx(x)) = predictive_log_rate_row(s, future, i, x, mode, rng).transpose();
  return out;
}

std::vector<std::int64_t> predictive_deaths(const Eigen::VectorXd& log_mu, const Eigen::VectorXd& exposure,
                                            Rng& rng) {
  if (log_mu.size() != exposure.size()) throw ForecastError("rate and exposure lengths differ");
  std::vector<std::int64_t> out(static_cast<std::size_t>(log_mu.size()));
  for (Eigen::Index k = 0; k < log_mu.size(); ++k) {
    const double mean = exposure[k] * std::exp(log_mu[k]);
    if (!(mean <= kMaxMean)) throw ForecastError("predictive Poisson mean exceeds 1e12");
    out[static_cast<std::size_t>(k)] = rng.poisson(mean);
  }
  return out;
}

Interval hpd_interval(std::vector<double> samples, double level) {
  if (!(level > 0.0 && level < 1.0)) throw ForecastError("HPD level must lie in (0, 1)");
  const std::size_t n = samples.size();
  const std::size_t k = window_count(n, level);
  if (k == 0 || n < k + 1) throw ForecastError("too few samples for the requested HPD level");
  std::sort(samples.begin(), samples.end());
  std::size_t best = 0;
  double width = samples[k - 1] - samples[0];
  for (std::size_t j = 1; j + k <= n; ++j) {
    double w = samples[j + k - 1] - samples[j];
    if (w < width) {
      width = w;
      best = j;
    }
  }
  return {samples[best], samples[best + k - 1]};
}

Interval equal_tailed_interval(std::vector<double> samples, double level) {
  if (samples.empty()) throw ForecastError("no samples");
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  const double tail = 0.5 * (1.0 - level);
  auto at = [&](double q) {
    double pos = q * (n - 1.0);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    auto hi = std::min(lo + 1, samples.size() - 1);
    double f = pos - static_cast<double>(lo);
    return samples[lo] + f * (samples[hi] - samples[lo]);
  };
  return {at(tail), at(1.0 - tail)};
}

double median(std::vector<double> samples) {
  if (samples.empty()) throw ForecastError("median of an empty sample");
  const std::size_t n = samples.size();
  auto mid = samples.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(samples.begin(), mid, samples.end());
  double upper = *mid;
  if (n % 2 == 1) return upper;
  double lower = *std::max_element(samples.begin(), mid);
  return 0.5 * (lower + upper);
}

Summary summarize(std::vector<double> samples, double level) {
  Summary s;
  s.median = median(samples);
  Interval iv = hpd_interval(std::move(samples), level);
  s.lo = iv.lo;
  s.hi = iv.hi;
  // The median can sit outside a very skewed HPD window; widen to keep lo <= median <= hi.
  s.lo = std::min(s.lo, s.median);
  s.hi = std::max(s.hi, s.median);
  return s;
}

const CellSummary& ForecastResult::cell(std::size_t i, std::size_t x, std::size_t t) const {
  const std::size_t cols = years.size();
  return cells[(i * n_ages + x) * cols + t];
}

ForecastResult run_forecast(const MortalityDataset& data, const std::vector<ModelState>& draws,
                            const ForecastConfig& cfg) {
  if (draws.empty()) throw ForecastError("no posterior draws");
  if (!(cfg.level > 0.0 && cfg.level < 1.0)) throw ForecastError("level must lie in (0, 1)");
  const std::size_t n = data.n_pops(), m = data.n_ages(), nt = data.n_years(), h = cfg.horizon;
  const std::size_t cols = nt + h, nd = draws.size();
  for (const auto& s : draws)
    if (s.n_pops() != n || s.n_ages() != m || s.n_years() != nt)
      throw ForecastError("draw dimensions do not match the dataset");
  if (!cfg.future_exposure.empty()) {
    if (cfg.future_exposure.size() != n) throw ForecastError("future exposures: wrong population count");
    for (const auto& e : cfg.future_exposure)
      if (e.rows() != idx(m) || e.cols() != idx(h)) throw ForecastError("future exposures: wrong shape");
  }

  const DriftDesign design = DriftDesign::from_dataset(data);
  ForecastResult out;
  out.horizon = h;
  out.level = cfg.level;
  out.n_ages = m;
  for (std::size_t t = 0; t < cols; ++t) out.years.push_back(data.first_year() + static_cast<int>(t));

  // Future time indices, one independent stream per draw.
  std::vector<FuturePaths> paths(nd);
  parallel_for(nd, cfg.threads, [&](std::size_t j) {
    Rng rng(cfg.seed, j, 0);
    paths[j] = forecast_kappa(draws[j], design, h, rng);
  });
  out.kappa_draws.resize(idx(nd), idx(cols));
  out.kappa_pop_draws.assign(n, Eigen::MatrixXd(idx(nd), idx(cols)));
  for (std::size_t j = 0; j < nd; ++j) {
    out.kappa_draws.row(idx(j)).head(idx(nt)) = draws[j].kappa.transpose();
    out.kappa_draws.row(idx(j)).tail(idx(h)) = paths[j].kappa.transpose();
    for (std::size_t i = 0; i < n; ++i) {
      out.kappa_pop_draws[i].row(idx(j)).head(idx(nt)) = draws[j].kappa_pop.row(idx(i));
      out.kappa_pop_draws[i].row(idx(j)).tail(idx(h)) = paths[j].kappa_pop.row(idx(i));
    }
  }
  auto column_summary = [&](const Eigen::MatrixXd& mat) {
    std::vector<Summary> res;
    for (std::size_t t = 0; t < cols; ++t) {
      std::vector<double> v(mat.col(idx(t)).data(), mat.col(idx(t)).data() + nd);
      res.push_back(summarize(std::move(v), cfg.level));
    }
    return res;
  };
  out.kappa_summary = column_summary(out.kappa_draws);
  for (std::size_t i = 0; i < n; ++i) out.kappa_pop_summary.push_back(column_summary(out.kappa_pop_draws[i]));

  // Rates and counts row by row: all draws for one (population, age) at a time.
  out.cells.resize(n * m * cols);
  if (cfg.keep_rate_draws)
    out.rate_draws.assign(nd, std::vector<Eigen::MatrixXd>(n, Eigen::MatrixXd(idx(m), idx(cols))));
  parallel_for(n * m, cfg.threads, [&](std::size_t unit) {
    const std::size_t i = unit / m, x = unit % m;
    Eigen::VectorXd exposure(idx(cols));
    for (std::size_t t = 0; t < nt; ++t) {
      // Masked cells without a usable exposure get zero counts.
      double e = data.exposure(i, x, t);
      exposure[idx(t)] = (e > 0.0 && std::isfinite(e)) ? e : 0.0;
    }
    for (std::size_t k = 0; k < h; ++k)
      exposure[idx(nt + k)] = cfg.future_exposure.empty() ? exposure[idx(nt - 1)]
                                                          : cfg.future_exposure[i](idx(x), idx(k));
    Eigen::MatrixXd rates(idx(nd), idx(cols));
    Eigen::MatrixXd deaths(idx(nd), idx(cols));
    for (std::size_t j = 0; j < nd; ++j) {
      Rng rng(cfg.seed, j, 1 + i * m + x);
      Eigen::VectorXd row = predictive_log_rate_row(draws[j], paths[j], i, x, cfg.mode, rng);
      auto d = predictive_deaths(row, exposure, rng);
      rates.row(idx(j)) = row.transpose();
      for (std::size_t t = 0; t < cols; ++t) deaths(idx(j), idx(t)) = static_cast<double>(d[t]);
      if (cfg.keep_rate_draws) out.rate_draws[j][i].row(idx(x)) = row.transpose();
    }
    for (std::size_t t = 0; t < cols; ++t) {
      CellSummary c;
      c.pop = i;
      c.age = x;
      c.year = t;
      c.future = t >= nt;
      std::vector<double> r(rates.col(idx(t)).data(), rates.col(idx(t)).data() + nd);
      std::vector<double> d(deaths.col(idx(t)).data(), deaths.col(idx(t)).data() + nd);
      c.log_mu = summarize(std::move(r), cfg.level);
      c.deaths = summarize(std::move(d), cfg.level);
      out.cells[(i * m + x) * cols + t] = c;
    }
  });
  return out;
}

}  // namespace bplnlc
