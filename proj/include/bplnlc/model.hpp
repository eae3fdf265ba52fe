#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bplnlc/data.hpp"

namespace bplnlc {

class DomainError : public std::domain_error {
  using std::domain_error::domain_error;
};

// Prior constants that may differ between populations.
struct PopulationPriors {
  // Gamma(a, b) kernel for the age intercept, expressed on the alpha scale:
  // pi(alpha) ∝ exp((a - 1) alpha - b exp(alpha)).
  double a_e = 1.0;
  double b_e = 1.0;
  double a_beta = 0.001;  // InvGamma for the population beta variance
  double b_beta = 0.001;
  double sigma2_rho = 0.1;
  double a_kappa = 0.001;  // InvGamma for the population kappa innovation variance
  double b_kappa = 0.001;
  double a_nu = 2.5;  // InvGamma for the overdispersion variance
  double b_nu = 2.5;
  std::array<double, 2> slab_scale{10.0, 10.0};  // c_l; never fixed by the model
};

struct Hyperparams {
  double a_beta = 0.01;
  double b_beta = 0.01;
  Eigen::Vector2d phi0 = Eigen::Vector2d::Zero();
  Eigen::Matrix2d sigma0 = Eigen::Matrix2d::Identity() * 10.0;
  double sigma2_rho = 1.0;
  double a_kappa = 0.001;
  double b_kappa = 0.001;
  double a_p = 1.0;  // Beta prior on the inclusion probability
  double b_p = 1.0;
  double inclusion_threshold = 0.5;
  std::vector<PopulationPriors> pops;

  // Reference values used for the Japanese two-sex analysis.
  static Hyperparams reference(std::size_t n_pops);
  void validate() const;
};

using Indicator = std::array<std::uint8_t, 2>;

// Full parameter vector. Per-population quantities are stored row-wise
// (row i = population i).
struct ModelState {
  Eigen::MatrixXd alpha;     // n x M
  Eigen::VectorXd beta;      // M
  Eigen::MatrixXd beta_pop;  // n x M
  double sigma2_beta = 1.0;
  Eigen::VectorXd sigma2_beta_pop;  // n
  Eigen::VectorXd kappa;            // N
  Eigen::MatrixXd kappa_pop;        // n x N
  Eigen::Vector2d phi = Eigen::Vector2d::Zero();
  Eigen::MatrixXd phi_pop;  // n x 2
  double rho = 0.0;
  Eigen::VectorXd rho_pop;  // n
  double sigma2_kappa = 1.0;
  Eigen::VectorXd sigma2_kappa_pop;  // n
  std::vector<Indicator> w;          // n
  Eigen::VectorXd p;                 // n
  std::vector<Eigen::MatrixXd> nu;   // n matrices of M x N
  Eigen::VectorXd sigma2_nu;         // n

  static ModelState zeros(std::size_t n_pops, std::size_t n_ages, std::size_t n_years);

  std::size_t n_pops() const { return static_cast<std::size_t>(alpha.rows()); }
  std::size_t n_ages() const { return static_cast<std::size_t>(beta.size()); }
  std::size_t n_years() const { return static_cast<std::size_t>(kappa.size()); }

  double e(std::size_t i, std::size_t x) const { return std::exp(alpha(i, x)); }

  bool operator==(const ModelState& o) const;
};

struct InvariantTolerance {
  double beta_sum = 1e-10;
  double beta_norm = 1e-10;
  double kappa_sum_per_year = 1e-10;  // multiplied by N
};

// Human-readable list of violated invariants; empty if the state is valid.
// `check_constraints` toggles the identifiability constraints.
std::vector<std::string> invariant_violations(const ModelState& s, bool check_constraints = true,
                                              InvariantTolerance tol = {});

// W = [1, t] over the calendar years of the training window.
class DriftDesign {
 public:
  explicit DriftDesign(std::vector<double> years);
  static DriftDesign from_dataset(const MortalityDataset& data);

  std::size_t size() const { return years_.size(); }
  double year(std::size_t t) const { return years_[t]; }
  double eta(const Eigen::Vector2d& phi, std::size_t t) const { return phi[0] + phi[1] * years_[t]; }
  double eta_at_year(const Eigen::Vector2d& phi, double year) const { return phi[0] + phi[1] * year; }
  const Eigen::MatrixX2d& matrix() const { return w_; }
  Eigen::VectorXd mean(const Eigen::Vector2d& phi) const { return w_ * phi; }

 private:
  std::vector<double> years_;
  Eigen::MatrixX2d w_;
};

// Q = U'U with U unit lower-bidiagonal, -rho on the subdiagonal. Held as a
// symmetric tridiagonal operator.
class Ar1Precision {
 public:
  Ar1Precision(double rho, std::size_t n);

  double rho() const { return rho_; }
  std::size_t size() const { return n_; }
  double diag(std::size_t k) const { return diag_[k]; }
  double off(std::size_t k) const { return off_[k]; }  // Q(k, k+1)

  // v'Qv evaluated as |Uv|^2.
  double quad_form(const Eigen::VectorXd& v) const;
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const;
  // u'Qv for two vectors.
  double bilinear(const Eigen::VectorXd& u, const Eigen::VectorXd& v) const;
  // 2 * sum log|U_kk|.
  double log_det() const;
  Eigen::MatrixXd dense() const;

 private:
  double rho_;
  std::size_t n_;
  std::vector<double> u_diag_;
  std::vector<double> u_sub_;
  std::vector<double> diag_;
  std::vector<double> off_;
};

Ar1Precision build_precision(double rho, std::size_t n);

// log N(series; W phi, sigma2 Q^{-1}).
double ar1_logdensity(const Eigen::VectorXd& series, const Eigen::Vector2d& phi, double rho,
                      double sigma2, const DriftDesign& design);

inline double linear_predictor(const ModelState& s, std::size_t i, std::size_t x, std::size_t t) {
  return s.alpha(i, x) + s.beta[x] * s.kappa[t] + s.beta_pop(i, x) * s.kappa_pop(i, t) +
         s.nu[i](x, t);
}

enum class LoglikMode { Full, Kernel };

// Linear predictors above this value are treated as zero-density states.
inline constexpr double kMaxLogRate = 700.0;

// Single-cell Poisson log-pmf of D given log rate `lp`: D (log E + lp) - E e^lp [- log D!].
inline double poisson_cell_term(std::int64_t deaths, double exposure, double log_exposure,
                                double lp, double log_fact, LoglikMode mode) {
  if (lp > kMaxLogRate) return -std::numeric_limits<double>::infinity();
  double v = static_cast<double>(deaths) * (log_exposure + lp) - exposure * std::exp(lp);
  if (mode == LoglikMode::Full) v -= log_fact;
  return v;
}

double poisson_loglik(const MortalityDataset& data, const ModelState& s,
                      std::span<const CellIndex> scope, LoglikMode mode = LoglikMode::Full);
// Over every observed cell.
double poisson_loglik(const MortalityDataset& data, const ModelState& s,
                      LoglikMode mode = LoglikMode::Full);

}  // namespace bplnlc
