#include "bplnlc/model.hpp"

#include <numbers>
#include <sstream>

namespace bplnlc {

Hyperparams Hyperparams::reference(std::size_t n_pops) {
  Hyperparams h;
  h.a_beta = 0.01;
  h.b_beta = 0.01;
  h.phi0 = Eigen::Vector2d::Zero();
  h.sigma0 = Eigen::Matrix2d::Identity() * 10.0;
  h.sigma2_rho = 1.0;
  h.a_kappa = 0.001;
  h.b_kappa = 0.001;
  h.a_p = 1.0;
  h.b_p = 1.0;
  h.inclusion_threshold = 0.5;
  PopulationPriors pp;
  pp.a_e = 1.0;
  pp.b_e = 1.0;
  pp.a_beta = 0.001;
  pp.b_beta = 0.001;
  pp.sigma2_rho = 0.1;
  pp.a_kappa = 0.001;
  pp.b_kappa = 0.001;
  pp.a_nu = 2.5;
  pp.b_nu = 2.5;
  pp.slab_scale = {10.0, 10.0};
  h.pops.assign(n_pops, pp);
  return h;
}

void Hyperparams::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw DomainError(std::string("hyperparameter ") + name + " must be positive");
  };
  positive(a_beta, "a_beta");
  positive(b_beta, "b_beta");
  positive(sigma2_rho, "sigma2_rho");
  positive(a_kappa, "a_kappa");
  positive(b_kappa, "b_kappa");
  positive(a_p, "a_p");
  positive(b_p, "b_p");
  if (!(inclusion_threshold > 0.0 && inclusion_threshold < 1.0)) {
    throw DomainError("inclusion threshold must lie in (0, 1)");
  }
  if (std::abs(sigma0(0, 1) - sigma0(1, 0)) > 1e-12 * sigma0.norm()) {
    throw DomainError("Sigma0 must be symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(sigma0);
  if (es.eigenvalues().minCoeff() <= 0.0) throw DomainError("Sigma0 must be positive definite");
  for (const auto& p : pops) {
    positive(p.a_e, "a_e");
    positive(p.b_e, "b_e");
    positive(p.a_beta, "a_beta(i)");
    positive(p.b_beta, "b_beta(i)");
    positive(p.sigma2_rho, "sigma2_rho(i)");
    positive(p.a_kappa, "a_kappa(i)");
    positive(p.b_kappa, "b_kappa(i)");
    positive(p.a_nu, "a_nu(i)");
    positive(p.b_nu, "b_nu(i)");
    positive(p.slab_scale[0], "slab_scale_1");
    positive(p.slab_scale[1], "slab_scale_2");
  }
}

ModelState ModelState::zeros(std::size_t n, std::size_t m, std::size_t nt) {
  ModelState s;
  const auto ni = static_cast<Eigen::Index>(n);
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ti = static_cast<Eigen::Index>(nt);
  s.alpha = Eigen::MatrixXd::Zero(ni, mi);
  s.beta = Eigen::VectorXd::Zero(mi);
  s.beta_pop = Eigen::MatrixXd::Zero(ni, mi);
  s.sigma2_beta = 1.0;
  s.sigma2_beta_pop = Eigen::VectorXd::Ones(ni);
  s.kappa = Eigen::VectorXd::Zero(ti);
  s.kappa_pop = Eigen::MatrixXd::Zero(ni, ti);
  s.phi = Eigen::Vector2d::Zero();
  s.phi_pop = Eigen::MatrixXd::Zero(ni, 2);
  s.rho = 0.0;
  s.rho_pop = Eigen::VectorXd::Zero(ni);
  s.sigma2_kappa = 1.0;
  s.sigma2_kappa_pop = Eigen::VectorXd::Ones(ni);
  s.w.assign(n, Indicator{0, 0});
  s.p = Eigen::VectorXd::Constant(ni, 0.5);
  s.nu.assign(n, Eigen::MatrixXd::Zero(mi, ti));
  s.sigma2_nu = Eigen::VectorXd::Ones(ni);
  return s;
}

bool ModelState::operator==(const ModelState& o) const {
  return alpha == o.alpha && beta == o.beta && beta_pop == o.beta_pop &&
         sigma2_beta == o.sigma2_beta && sigma2_beta_pop == o.sigma2_beta_pop &&
         kappa == o.kappa && kappa_pop == o.kappa_pop && phi == o.phi && phi_pop == o.phi_pop &&
         rho == o.rho && rho_pop == o.rho_pop && sigma2_kappa == o.sigma2_kappa &&
         sigma2_kappa_pop == o.sigma2_kappa_pop && w == o.w && p == o.p && nu == o.nu &&
         sigma2_nu == o.sigma2_nu;
}

std::vector<std::string> invariant_violations(const ModelState& s, bool check_constraints,
                                              InvariantTolerance tol) {
  std::vector<std::string> out;
  auto fail = [&](const std::string& m) { out.push_back(m); };
  const double n_years = static_cast<double>(s.n_years());

  if (check_constraints) {
    if (std::abs(s.beta.sum() - 1.0) > tol.beta_sum) fail("sum(beta) != 1");
    if (std::abs(s.kappa.sum()) > tol.kappa_sum_per_year * n_years) fail("sum(kappa) != 0");
    for (std::size_t i = 0; i < s.n_pops(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      if (std::abs(s.beta_pop.row(ii).norm() - 1.0) > tol.beta_norm) {
        fail("||beta_pop[" + std::to_string(i) + "]|| != 1");
      }
      if (std::abs(s.kappa_pop.row(ii).sum()) > tol.kappa_sum_per_year * n_years) {
        fail("sum(kappa_pop[" + std::to_string(i) + "]) != 0");
      }
    }
  }
  auto in_unit = [](double r) { return r > -1.0 && r < 1.0; };
  if (!in_unit(s.rho)) fail("rho outside (-1, 1)");
  if (!(s.sigma2_beta > 0.0)) fail("sigma2_beta <= 0");
  if (!(s.sigma2_kappa > 0.0)) fail("sigma2_kappa <= 0");
  for (std::size_t i = 0; i < s.n_pops(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const std::string tag = "[" + std::to_string(i) + "]";
    if (!in_unit(s.rho_pop[ii])) fail("rho_pop" + tag + " outside (-1, 1)");
    if (!(s.sigma2_beta_pop[ii] > 0.0)) fail("sigma2_beta_pop" + tag + " <= 0");
    if (!(s.sigma2_kappa_pop[ii] > 0.0)) fail("sigma2_kappa_pop" + tag + " <= 0");
    if (!(s.sigma2_nu[ii] > 0.0)) fail("sigma2_nu" + tag + " <= 0");
    if (!(s.p[ii] > 0.0 && s.p[ii] < 1.0)) fail("p" + tag + " outside (0, 1)");
    for (int l = 0; l < 2; ++l) {
      if (s.w[i][l] == 0 && s.phi_pop(ii, l) != 0.0) fail("w=0 but phi_pop" + tag + " nonzero");
    }
  }
  return out;
}

DriftDesign::DriftDesign(std::vector<double> years) : years_(std::move(years)) {
  w_.resize(static_cast<Eigen::Index>(years_.size()), 2);
  for (std::size_t t = 0; t < years_.size(); ++t) {
    w_(static_cast<Eigen::Index>(t), 0) = 1.0;
    w_(static_cast<Eigen::Index>(t), 1) = years_[t];
  }
}

DriftDesign DriftDesign::from_dataset(const MortalityDataset& data) {
  std::vector<double> ys;
  for (int y : data.years()) ys.push_back(static_cast<double>(y));
  return DriftDesign(std::move(ys));
}

Ar1Precision::Ar1Precision(double rho, std::size_t n) : rho_(rho), n_(n) {
  if (!(rho > -1.0 && rho < 1.0)) throw DomainError("AR(1) coefficient must lie in (-1, 1)");
  if (n < 2) throw DomainError("AR(1) precision needs at least two time points");
  u_diag_.assign(n, 1.0);
  u_sub_.assign(n - 1, -rho);  // U(k+1, k)
  diag_.resize(n);
  off_.resize(n - 1);
  // (U'U)(k,k) = U(k,k)^2 + U(k+1,k)^2 ; (U'U)(k,k+1) = U(k+1,k) U(k+1,k+1)
  for (std::size_t k = 0; k < n; ++k) {
    diag_[k] = u_diag_[k] * u_diag_[k] + (k + 1 < n ? u_sub_[k] * u_sub_[k] : 0.0);
  }
  for (std::size_t k = 0; k + 1 < n; ++k) off_[k] = u_sub_[k] * u_diag_[k + 1];
}

double Ar1Precision::quad_form(const Eigen::VectorXd& v) const {
  double acc = u_diag_[0] * v[0] * u_diag_[0] * v[0];
  for (std::size_t k = 1; k < n_; ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    double r = u_diag_[k] * v[kk] + u_sub_[k - 1] * v[kk - 1];
    acc += r * r;
  }
  return acc;
}

Eigen::VectorXd Ar1Precision::apply(const Eigen::VectorXd& v) const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(n_));
  for (std::size_t k = 0; k < n_; ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    double r = diag_[k] * v[kk];
    if (k > 0) r += off_[k - 1] * v[kk - 1];
    if (k + 1 < n_) r += off_[k] * v[kk + 1];
    out[kk] = r;
  }
  return out;
}

double Ar1Precision::bilinear(const Eigen::VectorXd& u, const Eigen::VectorXd& v) const {
  return u.dot(apply(v));
}

double Ar1Precision::log_det() const {
  double acc = 0.0;
  for (double d : u_diag_) acc += std::log(std::abs(d));
  return 2.0 * acc;
}

Eigen::MatrixXd Ar1Precision::dense() const {
  const auto n = static_cast<Eigen::Index>(n_);
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    q(k, k) = diag_[static_cast<std::size_t>(k)];
    if (k + 1 < n) {
      q(k, k + 1) = off_[static_cast<std::size_t>(k)];
      q(k + 1, k) = off_[static_cast<std::size_t>(k)];
    }
  }
  return q;
}

Ar1Precision build_precision(double rho, std::size_t n) { return Ar1Precision(rho, n); }

double ar1_logdensity(const Eigen::VectorXd& series, const Eigen::Vector2d& phi, double rho,
                      double sigma2, const DriftDesign& design) {
  if (!(sigma2 > 0.0)) throw DomainError("AR(1) innovation variance must be positive");
  const auto n = static_cast<std::size_t>(series.size());
  if (n != design.size()) throw DomainError("series length does not match the drift design");
  Ar1Precision q(rho, n);
  Eigen::VectorXd resid = series - design.mean(phi);
  const double nn = static_cast<double>(n);
  return -0.5 * nn * std::log(2.0 * std::numbers::pi * sigma2) + 0.5 * q.log_det() -
         0.5 * q.quad_form(resid) / sigma2;
}

double poisson_loglik(const MortalityDataset& data, const ModelState& s,
                      std::span<const CellIndex> scope, LoglikMode mode) {
  double acc = 0.0;
  for (const auto& c : scope) {
    if (data.missing(c.pop, c.age, c.year)) continue;
    double v = poisson_cell_term(data.deaths(c.pop, c.age, c.year), data.exposure(c.pop, c.age, c.year),
                                 data.log_exposure(c.pop, c.age, c.year),
                                 linear_predictor(s, c.pop, c.age, c.year),
                                 data.log_factorial(c.pop, c.age, c.year), mode);
    if (v == -std::numeric_limits<double>::infinity()) return v;
    acc += v;
  }
  return acc;
}

double poisson_loglik(const MortalityDataset& data, const ModelState& s, LoglikMode mode) {
  auto cells = data.observed_cells();
  return poisson_loglik(data, s, cells, mode);
}

}  // namespace bplnlc
