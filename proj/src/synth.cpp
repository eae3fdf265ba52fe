#include "bplnlc/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bplnlc {

namespace {

Eigen::Index idx(std::size_t k) { return static_cast<Eigen::Index>(k); }

constexpr double kMaxMean = 1e12;

double capped(double v, double cap, std::size_t* hits) {
  if (v > cap || !std::isfinite(v)) {
    if (hits) ++*hits;
    return cap;
  }
  return v;
}

MortalityDataset make_layout(const SynthSpec& spec) {
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < spec.n_pops; ++i) labels.push_back("pop" + std::to_string(i + 1));
  MortalityDataset d(labels, spec.first_age, spec.n_ages, spec.first_year, spec.n_years);
  for (std::size_t i = 0; i < spec.n_pops; ++i)
    for (std::size_t x = 0; x < spec.n_ages; ++x)
      for (std::size_t t = 0; t < spec.n_years; ++t) {
        double e = spec.exposure_by_age.empty() ? spec.exposure : spec.exposure_by_age[x];
        d.set_cell(i, x, t, 0, e, false);
      }
  return d;
}

void redraw_latent(ModelState& s, const DriftDesign& design, bool overdispersion, Rng& rng) {
  s.kappa = draw_ar1_path(s.phi, s.rho, s.sigma2_kappa, design, rng);
  for (std::size_t i = 0; i < s.n_pops(); ++i) {
    Eigen::Vector2d phi = s.phi_pop.row(idx(i)).transpose();
    s.kappa_pop.row(idx(i)) =
        draw_ar1_path(phi, s.rho_pop[idx(i)], s.sigma2_kappa_pop[idx(i)], design, rng).transpose();
  }
  for (std::size_t i = 0; i < s.n_pops(); ++i) {
    auto& nu = s.nu[i];
    if (!overdispersion || s.sigma2_nu[idx(i)] == 0.0) {
      nu.setZero();
      continue;
    }
    const double sd = std::sqrt(s.sigma2_nu[idx(i)]);
    for (Eigen::Index x = 0; x < nu.rows(); ++x)
      for (Eigen::Index t = 0; t < nu.cols(); ++t) nu(x, t) = rng.normal(0.0, sd);
  }
}

}  // namespace

void SynthSpec::validate() const {
  if (n_ages < 2 || n_years < 3 || n_pops < 1) throw SynthError("dimensions must be at least (2, 3, 1)");
  if (exposure_by_age.empty()) {
    if (!(exposure > 0.0) || !std::isfinite(exposure)) throw SynthError("exposure must be positive");
  } else {
    if (exposure_by_age.size() != n_ages) throw SynthError("age exposure profile has the wrong length");
    for (double e : exposure_by_age)
      if (!(e > 0.0) || !std::isfinite(e)) throw SynthError("exposure must be positive");
  }
  if (!prior_draw && !truth) throw SynthError("either a true state or prior-draw mode is required");
  if (truth && !prior_draw) {
    if (truth->n_pops() != n_pops || truth->n_ages() != n_ages || truth->n_years() != n_years)
      throw SynthError("true state dimensions do not match the spec");
  }
  if (!(variance_cap > 0.0)) throw SynthError("variance cap must be positive");
}

Eigen::VectorXd draw_ar1_path(const Eigen::Vector2d& phi, double rho, double sigma2,
                              const DriftDesign& design, Rng& rng) {
  const std::size_t n = design.size();
  const double sd = std::sqrt(sigma2);
  Eigen::VectorXd k(idx(n));
  double e = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    double eps = rng.normal(0.0, 1.0) * sd;
    e = (t == 0) ? eps : rho * e + eps;
    k[idx(t)] = design.eta(phi, t) + e;
  }
  return k;
}

ModelState draw_from_prior(const Hyperparams& h, std::size_t n, std::size_t m,
                           const DriftDesign& design, bool overdispersion, Rng& rng,
                           double cap, std::size_t* hits) {
  if (h.pops.size() != n) throw SynthError("hyperparameters do not match the population count");
  const std::size_t nt = design.size();
  ModelState s = ModelState::zeros(n, m, nt);
  const double centre = 1.0 / static_cast<double>(m);

  for (std::size_t i = 0; i < n; ++i) {
    const auto& pp = h.pops[i];
    if (!(pp.a_e > 1.0)) throw SynthError("prior draws of the age intercept need a_e > 1");
    for (std::size_t x = 0; x < m; ++x) {
      double e = rng.gamma(pp.a_e - 1.0, pp.b_e);
      s.alpha(idx(i), idx(x)) = std::log(std::max(e, std::numeric_limits<double>::min()));
    }
  }

  s.sigma2_beta = capped(rng.inv_gamma(h.a_beta, h.b_beta), cap, hits);
  for (std::size_t x = 0; x < m; ++x) s.beta[idx(x)] = rng.normal(centre, std::sqrt(s.sigma2_beta));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pp = h.pops[i];
    s.sigma2_beta_pop[idx(i)] = capped(rng.inv_gamma(pp.a_beta, pp.b_beta), cap, hits);
    const double sd = std::sqrt(s.sigma2_beta_pop[idx(i)]);
    for (std::size_t x = 0; x < m; ++x) s.beta_pop(idx(i), idx(x)) = rng.normal(centre, sd);
  }

  s.sigma2_kappa = capped(rng.inv_gamma(h.a_kappa, h.b_kappa), cap, hits);
  Eigen::LLT<Eigen::Matrix2d> llt(h.sigma0);
  s.phi = h.phi0 + llt.matrixL() * Eigen::Vector2d(rng.normal(), rng.normal());
  s.rho = rng.truncated_normal(0.0, std::sqrt(h.sigma2_rho), -1.0, 1.0);

  for (std::size_t i = 0; i < n; ++i) {
    const auto& pp = h.pops[i];
    s.sigma2_kappa_pop[idx(i)] = capped(rng.inv_gamma(pp.a_kappa, pp.b_kappa), cap, hits);
    s.rho_pop[idx(i)] = rng.truncated_normal(0.0, std::sqrt(pp.sigma2_rho), -1.0, 1.0);
    s.p[idx(i)] = rng.beta(h.a_p, h.b_p);
    for (std::size_t l = 0; l < 2; ++l) {
      s.w[i][l] = rng.bernoulli(s.p[idx(i)]) ? 1 : 0;
      s.phi_pop(idx(i), idx(l)) =
          s.w[i][l] ? rng.normal(0.0, std::sqrt(pp.slab_scale[l] * s.sigma2_kappa_pop[idx(i)])) : 0.0;
    }
    s.sigma2_nu[idx(i)] = capped(rng.inv_gamma(pp.a_nu, pp.b_nu), cap, hits);
  }

  redraw_latent(s, design, overdispersion, rng);
  return s;
}

ModelState lee_carter_scenario(std::size_t n, std::size_t m, const DriftDesign& design) {
  if (n < 1 || m < 2 || design.size() < 3) throw SynthError("dimensions must be at least (2, 3, 1)");
  const std::size_t nt = design.size();
  ModelState s = ModelState::zeros(n, m, nt);
  const double dm = static_cast<double>(m), dn = static_cast<double>(nt);
  double ybar = 0.0;
  for (std::size_t t = 0; t < nt; ++t) ybar += design.year(t);
  ybar /= dn;

  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t x = 0; x < m; ++x)
      s.alpha(idx(i), idx(x)) = -7.0 + 6.0 * static_cast<double>(x) / (dm - 1.0) - 0.2 * static_cast<double>(i);
  s.beta.setConstant(1.0 / dm);
  s.beta_pop.setConstant(1.0 / std::sqrt(dm));
  s.sigma2_beta = 1e-4;
  s.sigma2_beta_pop.setConstant(1e-4);

  // slope chosen so that beta * kappa drops by one over the window
  const double slope = -dm / dn;
  s.phi = Eigen::Vector2d(-slope * ybar, slope);
  s.rho = 0.5;
  s.sigma2_kappa = 0.01 * slope * slope;
  const double pop_slope = -0.5 * std::sqrt(dm) / dn;
  for (std::size_t i = 0; i < n; ++i) {
    s.rho_pop[idx(i)] = 0.3;
    s.sigma2_kappa_pop[idx(i)] = 0.01 * pop_slope * pop_slope * dn;
    s.p[idx(i)] = 0.5;
    s.sigma2_nu[idx(i)] = 0.01;
    if (n > 1 && i + 1 == n) {
      s.w[i] = {1, 1};
      s.phi_pop.row(idx(i)) = Eigen::RowVector2d(-pop_slope * ybar, pop_slope);
    } else {
      s.w[i] = {0, 0};
    }
  }
  s.kappa = design.mean(s.phi);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Vector2d phi = s.phi_pop.row(idx(i)).transpose();
    s.kappa_pop.row(idx(i)) = design.mean(phi).transpose();
  }
  return s;
}

void normalize_constraints(ModelState& s) {
  const double b = s.beta.sum();
  if (std::abs(b) < 1e-12) throw SynthError("cannot normalise beta: sum is zero");
  s.beta /= b;
  s.kappa *= b;
  for (std::size_t i = 0; i < s.n_pops(); ++i) {
    const double nb = s.beta_pop.row(idx(i)).norm();
    if (nb < 1e-12) throw SynthError("cannot normalise beta_pop: norm is zero");
    s.beta_pop.row(idx(i)) /= nb;
    s.kappa_pop.row(idx(i)) *= nb;
  }
  const double k = s.kappa.mean();
  s.kappa.array() -= k;
  for (std::size_t i = 0; i < s.n_pops(); ++i) {
    s.alpha.row(idx(i)) += s.beta.transpose() * k;
    const double ki = s.kappa_pop.row(idx(i)).mean();
    s.kappa_pop.row(idx(i)).array() -= ki;
    s.alpha.row(idx(i)) += s.beta_pop.row(idx(i)) * ki;
  }
}

MortalityDataset simulate_deaths(const ModelState& s, const MortalityDataset& layout, Rng& rng) {
  MortalityDataset d = layout;
  for (std::size_t i = 0; i < d.n_pops(); ++i)
    for (std::size_t x = 0; x < d.n_ages(); ++x)
      for (std::size_t t = 0; t < d.n_years(); ++t) {
        if (d.missing(i, x, t)) continue;
        const double lp = linear_predictor(s, i, x, t);
        const double mean = d.exposure(i, x, t) * std::exp(lp);
        if (!(lp <= kMaxLogRate) || !(mean <= kMaxMean))
          throw SynthError("simulated Poisson mean overflows");
        d.set_cell(i, x, t, rng.poisson(mean), d.exposure(i, x, t), false);
      }
  return d;
}

SynthResult simulate_dataset(const SynthSpec& spec, const Hyperparams& h) {
  spec.validate();
  MortalityDataset layout = make_layout(spec);
  DriftDesign design = DriftDesign::from_dataset(layout);
  Rng rng(spec.seed);

  SynthResult out;
  for (std::size_t attempt = 0;; ++attempt) {
    ModelState s;
    std::size_t hits = 0;
    if (spec.prior_draw) {
      s = draw_from_prior(h, spec.n_pops, spec.n_ages, design, spec.overdispersion, rng,
                          spec.variance_cap, &hits);
    } else {
      s = *spec.truth;
      if (spec.resample_latent) redraw_latent(s, design, spec.overdispersion, rng);
    }
    if (spec.enforce_constraints) normalize_constraints(s);
    try {
      out.data = simulate_deaths(s, layout, rng);
    } catch (const SynthError&) {
      const bool can_retry = spec.prior_draw || spec.resample_latent;
      if (!can_retry || attempt + 1 >= spec.max_retries) {
        throw SynthError("simulated rates overflow after " + std::to_string(attempt + 1) + " attempt(s)");
      }
      continue;
    }
    out.truth = std::move(s);
    out.variance_caps_applied = hits;
    out.retries = attempt;
    return out;
  }
}

}  // namespace bplnlc
