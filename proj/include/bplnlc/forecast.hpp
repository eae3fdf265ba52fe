#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "bplnlc/data.hpp"
#include "bplnlc/model.hpp"
#include "bplnlc/random.hpp"

namespace bplnlc {

class ForecastError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FuturePaths {
  Eigen::VectorXd kappa;      // H
  Eigen::MatrixXd kappa_pop;  // n x H
};

// AR(1)-with-drift recursion from the last training year, on the calendar
// year axis of `design`. Population drifts are used as stored (zero where
// the indicator is off).
FuturePaths forecast_kappa(const ModelState& s, const DriftDesign& design, std::size_t horizon, Rng& rng);

enum class OverdispersionMode { Resample, Zero };

// log mu for population i, age x over the training years followed by the
// horizon. Training years use the stored nu; future years draw nu ~ N(0, sigma_i^2)
// (Resample) or set it to zero.
Eigen::VectorXd predictive_log_rate_row(const ModelState& s, const FuturePaths& future, std::size_t i,
                                        std::size_t x, OverdispersionMode mode, Rng& rng);
// All rows: one M x (N + H) matrix per population.
std::vector<Eigen::MatrixXd> predictive_log_rates(const ModelState& s, const FuturePaths& future,
                                                  OverdispersionMode mode, Rng& rng);

// One Poisson draw per entry with mean E * exp(log_mu). Means above 1e12 are
// treated as an implausible state and raise ForecastError.
std::vector<std::int64_t> predictive_deaths(const Eigen::VectorXd& log_mu, const Eigen::VectorXd& exposure,
                                            Rng& rng);

struct Interval {
  double lo;
  double hi;
};

// Shortest window holding ceil(level * n) order statistics; ties go to the
// lowest start. Needs at least ceil(level * n) + 1 samples.
Interval hpd_interval(std::vector<double> samples, double level);
Interval equal_tailed_interval(std::vector<double> samples, double level);
double median(std::vector<double> samples);

struct Summary {
  double median;
  double lo;
  double hi;
};
Summary summarize(std::vector<double> samples, double level);

struct ForecastConfig {
  std::size_t horizon = 20;
  double level = 0.95;
  OverdispersionMode mode = OverdispersionMode::Resample;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  // Per population, an M x H matrix of future exposures. Empty means the
  // last training year's exposures are carried forward.
  std::vector<Eigen::MatrixXd> future_exposure;
  // Keep every draw's log-rate grid in the result (memory heavy).
  bool keep_rate_draws = false;
};

struct CellSummary {
  std::size_t pop;
  std::size_t age;   // offset
  std::size_t year;  // offset into training + horizon
  bool future;
  Summary log_mu;
  Summary deaths;
};

struct ForecastResult {
  std::size_t horizon = 0;
  double level = 0.95;
  std::vector<int> years;  // training years then horizon years
  Eigen::MatrixXd kappa_draws;                // draws x (N + H)
  std::vector<Eigen::MatrixXd> kappa_pop_draws;  // per population, draws x (N + H)
  std::vector<Summary> kappa_summary;         // per year
  std::vector<std::vector<Summary>> kappa_pop_summary;
  std::vector<CellSummary> cells;             // (pop, age, year) order
  // Only with keep_rate_draws: [draw][pop] -> M x (N + H).
  std::vector<std::vector<Eigen::MatrixXd>> rate_draws;

  const CellSummary& cell(std::size_t i, std::size_t x, std::size_t t) const;
  std::size_t n_ages = 0;
};

// Posterior predictive simulation over stored draws. Random numbers for the
// kappa paths of draw j come from stream (seed, j, 0) and those of row (i, x)
// from (seed, j, 1 + i * M + x), so results do not depend on `threads`.
ForecastResult run_forecast(const MortalityDataset& data, const std::vector<ModelState>& draws,
                            const ForecastConfig& cfg);

}  // namespace bplnlc
