#pragma once

// Independent numerical references for the closed-form pieces of the sampler.
// Every density here is written out from the model definition and integrated
// by adaptive Gauss-Kronrod quadrature; nothing is taken from the library
// except the function under test.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

struct Moments {
  double mean;
  double var;
};

// Posterior moments of g(u) under the unnormalised log density logf on the
// real line. The integration window is found numerically around the mode.
Moments quad_moments(const std::function<double(double)>& logf, const std::function<double(double)>& g,
                     double start = 0.0);

// 2-D version for a density over R^2: mean vector and covariance.
void quad_moments_2d(const std::function<double(const Eigen::Vector2d&)>& logf, Eigen::Vector2d& mean,
                     Eigen::Matrix2d& cov);

// Dense U (unit lower bidiagonal, -rho below the diagonal) and Q = U'U built
// entry by entry.
Eigen::MatrixXd dense_u(double rho, std::size_t n);
Eigen::MatrixXd dense_q(double rho, std::size_t n);

// -(1/2) |U (kappa - W phi)|^2 with U applied as the AR(1) recursion.
double ar1_quadratic(const Eigen::VectorXd& kappa, const Eigen::Vector2d& phi, double rho,
                     const std::vector<double>& years);

// Moments of N(m, v) truncated to (lo, hi).
Moments truncated_normal_moments(double m, double v, double lo, double hi);

double rel_mean_error(const Moments& got, const Moments& ref);
double rel_var_error(const Moments& got, const Moments& ref);

struct SuiteResult {
  std::string name;
  std::size_t instances = 0;
  double max_error = 0.0;
  std::string worst;  // description of the worst instance
};

// Closed-form full conditionals against quadrature; one result per family.
std::vector<SuiteResult> conjugacy_suite(std::uint64_t seed, std::size_t instances_per_family);
// log R* from spike_terms against the marginal-likelihood integral; error is
// |R*_quad / R* - 1|.
SuiteResult spike_ratio_suite(std::uint64_t seed, std::size_t instances);
// kappa_prior_log_kernel differences against the dense conditional normal;
// error is absolute on log-density differences.
SuiteResult kernel_suite(std::uint64_t seed, std::size_t instances);

}  // namespace oracle
