#include "bplnlc/sampler.hpp"

#include <algorithm>
#include <exception>
#include <atomic>
#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <thread>

namespace bplnlc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Eigen::Index idx(std::size_t k) { return static_cast<Eigen::Index>(k); }

void warn_once(std::atomic<bool>& flag, const std::string& msg) {
  if (flag.exchange(true)) return;
  std::clog << "bplnlc: warning: " << msg << '\n';
}

// Kernel of the Poisson terms at age x for a candidate common beta value.
double beta_common_target(const ModelState& s, const MortalityDataset& data, std::size_t x, double b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < data.n_pops(); ++i) {
    for (std::size_t t = 0; t < data.n_years(); ++t) {
      if (data.missing(i, x, t)) continue;
      double lp = s.alpha(idx(i), idx(x)) + b * s.kappa[idx(t)] +
                  s.beta_pop(idx(i), idx(x)) * s.kappa_pop(idx(i), idx(t)) + s.nu[i](idx(x), idx(t));
      if (lp > kMaxLogRate) return kNegInf;
      acc += static_cast<double>(data.deaths(i, x, t)) * b * s.kappa[idx(t)] -
             data.exposure(i, x, t) * std::exp(lp);
    }
  }
  return acc;
}

double beta_pop_target(const ModelState& s, const MortalityDataset& data, std::size_t i, std::size_t x,
                       double b) {
  double acc = 0.0;
  for (std::size_t t = 0; t < data.n_years(); ++t) {
    if (data.missing(i, x, t)) continue;
    double lp = s.alpha(idx(i), idx(x)) + s.beta[idx(x)] * s.kappa[idx(t)] +
                b * s.kappa_pop(idx(i), idx(t)) + s.nu[i](idx(x), idx(t));
    if (lp > kMaxLogRate) return kNegInf;
    acc += static_cast<double>(data.deaths(i, x, t)) * b * s.kappa_pop(idx(i), idx(t)) -
           data.exposure(i, x, t) * std::exp(lp);
  }
  return acc;
}

double kappa_common_likelihood(const ModelState& s, const MortalityDataset& data, std::size_t t, double k) {
  double acc = 0.0;
  for (std::size_t i = 0; i < data.n_pops(); ++i) {
    for (std::size_t x = 0; x < data.n_ages(); ++x) {
      if (data.missing(i, x, t)) continue;
      double lp = s.alpha(idx(i), idx(x)) + s.beta[idx(x)] * k +
                  s.beta_pop(idx(i), idx(x)) * s.kappa_pop(idx(i), idx(t)) + s.nu[i](idx(x), idx(t));
      if (lp > kMaxLogRate) return kNegInf;
      acc += static_cast<double>(data.deaths(i, x, t)) * s.beta[idx(x)] * k -
             data.exposure(i, x, t) * std::exp(lp);
    }
  }
  return acc;
}

double kappa_pop_likelihood(const ModelState& s, const MortalityDataset& data, std::size_t i, std::size_t t,
                            double k) {
  double acc = 0.0;
  for (std::size_t x = 0; x < data.n_ages(); ++x) {
    if (data.missing(i, x, t)) continue;
    double lp = s.alpha(idx(i), idx(x)) + s.beta[idx(x)] * s.kappa[idx(t)] +
                s.beta_pop(idx(i), idx(x)) * k + s.nu[i](idx(x), idx(t));
    if (lp > kMaxLogRate) return kNegInf;
    acc += static_cast<double>(data.deaths(i, x, t)) * s.beta_pop(idx(i), idx(x)) * k -
           data.exposure(i, x, t) * std::exp(lp);
  }
  return acc;
}

Eigen::Vector2d draw_mvn2(const Normal2Params& p, Rng& rng) {
  Eigen::LLT<Eigen::Matrix2d> llt(p.cov);
  if (llt.info() != Eigen::Success) throw SamplerError("2x2 posterior covariance is not positive definite");
  Eigen::Vector2d z(rng.normal(), rng.normal());
  return p.mean + llt.matrixL() * z;
}

// W'QW and W'Qv for the drift design.
Eigen::Matrix2d wqw(const Ar1Precision& q, const DriftDesign& design) {
  const auto& w = design.matrix();
  Eigen::VectorXd c0 = w.col(0), c1 = w.col(1);
  Eigen::VectorXd q0 = q.apply(c0), q1 = q.apply(c1);
  Eigen::Matrix2d m;
  m(0, 0) = c0.dot(q0);
  m(0, 1) = c0.dot(q1);
  m(1, 0) = m(0, 1);
  m(1, 1) = c1.dot(q1);
  return m;
}

Eigen::Vector2d wqv(const Ar1Precision& q, const DriftDesign& design, const Eigen::VectorXd& v) {
  Eigen::VectorXd qv = q.apply(v);
  return design.matrix().transpose() * qv;
}

}  // namespace

// ---------------------------------------------------------------------------

void SamplerConfig::set_variant(ModelVariant v) {
  overdispersion = (v == ModelVariant::Full);
  spike_selection = (v == ModelVariant::Full);
}

ModelVariant SamplerConfig::variant() const {
  return (overdispersion || spike_selection) ? ModelVariant::Full : ModelVariant::Model2;
}

void SamplerConfig::validate() const {
  if (iterations == 0) throw SamplerError("iterations must be positive");
  if (burn_in >= iterations) throw SamplerError("burn-in must be smaller than the iteration count");
  if (thin < 1) throw SamplerError("thinning stride must be at least 1");
  if (adapt_window < 1) throw SamplerError("adaptation window must be at least 1");
  if (!(target_accept_lo > 0.0 && target_accept_lo < target_accept_hi && target_accept_hi < 1.0)) {
    throw SamplerError("invalid acceptance band");
  }
}

std::vector<std::string> sweep_order() {
  return {"alpha",        "beta_common",  "beta_pop",     "kappa_common",
          "phi_common",   "rho_common",   "sigma2_kappa_common",
          "population: spike+phi+p, kappa_pop, rho_pop, sigma2_kappa_pop",
          "overdispersion", "sigma2_beta"};
}

void ProposalFamily::resize(std::size_t n, double initial) {
  scale.assign(n, initial);
  window_accepted.assign(n, 0);
  window_attempted.assign(n, 0);
  totals = {};
}

void ProposalFamily::record(std::size_t k, bool accepted) {
  ++window_attempted[k];
  ++totals.attempted;
  if (accepted) {
    ++window_accepted[k];
    ++totals.accepted;
  }
}

const char* MhTuner::family_name(Family f) {
  switch (f) {
    case BetaCommon: return "beta";
    case BetaPop: return "beta_pop";
    case KappaCommon: return "kappa";
    case KappaPop: return "kappa_pop";
    case Nu: return "nu";
    case AlphaFallback: return "alpha_mh";
    default: return "?";
  }
}

MhTuner::MhTuner(const MortalityDataset& data, const ModelState& s, const SamplerConfig& cfg)
    : window_(cfg.adapt_window), lo_(cfg.target_accept_lo), hi_(cfg.target_accept_hi), adapting_(cfg.adapt) {
  const std::size_t n = data.n_pops(), m = data.n_ages(), nt = data.n_years();
  auto scale_from = [](double info) {
    double sd = 2.38 / std::sqrt(std::max(info, 1e-12));
    return std::clamp(sd, 1e-6, 10.0);
  };
  auto mu_e = [&](std::size_t i, std::size_t x, std::size_t t) {
    if (data.missing(i, x, t)) return 0.0;
    double lp = std::min(linear_predictor(s, i, x, t), kMaxLogRate);
    return data.exposure(i, x, t) * std::exp(lp);
  };

  auto& bc = families_[BetaCommon];
  bc.resize(m, 0.01);
  for (std::size_t x = 0; x < m; ++x) {
    double info = 1.0 / s.sigma2_beta;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < nt; ++t) info += mu_e(i, x, t) * s.kappa[idx(t)] * s.kappa[idx(t)];
    bc.scale[x] = scale_from(info);
  }
  auto& bp = families_[BetaPop];
  bp.resize(n * m, 0.01);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t x = 0; x < m; ++x) {
      double info = 1.0 / s.sigma2_beta_pop[idx(i)];
      for (std::size_t t = 0; t < nt; ++t) {
        double k = s.kappa_pop(idx(i), idx(t));
        info += mu_e(i, x, t) * k * k;
      }
      bp.scale[i * m + x] = scale_from(info);
    }
  auto& kc = families_[KappaCommon];
  kc.resize(nt, 0.1);
  for (std::size_t t = 0; t < nt; ++t) {
    double info = (1.0 + s.rho * s.rho) / s.sigma2_kappa;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t x = 0; x < m; ++x) info += mu_e(i, x, t) * s.beta[idx(x)] * s.beta[idx(x)];
    kc.scale[t] = scale_from(info);
  }
  auto& kp = families_[KappaPop];
  kp.resize(n * nt, 0.1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < nt; ++t) {
      double r = s.rho_pop[idx(i)];
      double info = (1.0 + r * r) / s.sigma2_kappa_pop[idx(i)];
      for (std::size_t x = 0; x < m; ++x) {
        double b = s.beta_pop(idx(i), idx(x));
        info += mu_e(i, x, t) * b * b;
      }
      kp.scale[i * nt + t] = scale_from(info);
    }
  auto& nu = families_[Nu];
  nu.resize(n * m * nt, 0.1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t x = 0; x < m; ++x)
      for (std::size_t t = 0; t < nt; ++t)
        nu.scale[data.flat(i, x, t)] = scale_from(mu_e(i, x, t) + 1.0 / s.sigma2_nu[idx(i)]);
  families_[AlphaFallback].resize(n * m, 0.1);
}

void MhTuner::end_iteration() {
  ++iter_;
  if (!adapting_ || iter_ % window_ != 0) return;
  for (auto& f : families_) {
    for (std::size_t k = 0; k < f.scale.size(); ++k) {
      if (f.window_attempted[k] == 0) continue;
      double rate = static_cast<double>(f.window_accepted[k]) / static_cast<double>(f.window_attempted[k]);
      if (rate > hi_) f.scale[k] *= 1.1;
      else if (rate < lo_) f.scale[k] *= 0.9;
      f.window_accepted[k] = 0;
      f.window_attempted[k] = 0;
    }
  }
}

void MhTuner::reset_counts() {
  for (auto& f : families_) {
    f.totals = {};
    std::fill(f.window_accepted.begin(), f.window_accepted.end(), 0);
    std::fill(f.window_attempted.begin(), f.window_attempted.end(), 0);
  }
}

double MhTuner::scale_checksum() const {
  double acc = 0.0;
  for (const auto& f : families_)
    for (double v : f.scale) acc += v;
  return acc;
}

bool mh_accept(double log_target_current, double log_target_proposal, double u) {
  if (std::isnan(log_target_current) || log_target_current == kNegInf) {
    throw SamplerError("Metropolis-Hastings step from a zero-density state");
  }
  if (std::isnan(log_target_proposal) || log_target_proposal == kNegInf) return false;
  double diff = log_target_proposal - log_target_current;
  if (diff >= 0.0) return true;
  return u <= std::exp(diff);
}

// ---------------------------------------------------------------------------
// Closed-form conditionals

GammaParams alpha_conditional(const ModelState& s, const SamplerContext& ctx, std::size_t i, std::size_t x) {
  const auto& data = ctx.data;
  const auto& pp = ctx.hyper.pops[i];
  double c = 0.0;
  double total_deaths = 0.0;
  for (std::size_t t = 0; t < data.n_years(); ++t) {
    if (data.missing(i, x, t)) continue;
    double rest = s.beta[idx(x)] * s.kappa[idx(t)] + s.beta_pop(idx(i), idx(x)) * s.kappa_pop(idx(i), idx(t)) +
                  s.nu[i](idx(x), idx(t));
    c += data.exposure(i, x, t) * std::exp(rest);
    total_deaths += static_cast<double>(data.deaths(i, x, t));
  }
  // D_{x,.} = sum_t D - 1; the -1 is the Jacobian of e = exp(alpha).
  double d_dot = total_deaths - 1.0;
  return {pp.a_e + d_dot + ctx.config.alpha_shape_perturbation, pp.b_e + c};
}

InvGammaParams sigma2_beta_conditional(const ModelState& s, const Hyperparams& h) {
  const double m = static_cast<double>(s.n_ages());
  Eigen::VectorXd d = s.beta.array() - 1.0 / m;
  return {h.a_beta + 0.5 * m, h.b_beta + 0.5 * d.squaredNorm()};
}

InvGammaParams sigma2_beta_pop_conditional(const ModelState& s, const Hyperparams& h, std::size_t i) {
  const double m = static_cast<double>(s.n_ages());
  Eigen::VectorXd d = s.beta_pop.row(idx(i)).transpose().array() - 1.0 / m;
  return {h.pops[i].a_beta + 0.5 * m, h.pops[i].b_beta + 0.5 * d.squaredNorm()};
}

Normal2Params phi_conditional(const Eigen::VectorXd& kappa, double rho, double sigma2,
                              const Eigen::Vector2d& phi0, const Eigen::Matrix2d& sigma0,
                              const DriftDesign& design) {
  Ar1Precision q(rho, static_cast<std::size_t>(kappa.size()));
  Eigen::Matrix2d sigma0_inv = sigma0.inverse();
  Eigen::Matrix2d prec = wqw(q, design) + sigma2 * sigma0_inv;
  Eigen::LDLT<Eigen::Matrix2d> ldlt(prec);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw SamplerError("drift posterior precision is not positive definite");
  }
  Eigen::Matrix2d sigma_star = ldlt.solve(Eigen::Matrix2d::Identity());
  sigma_star = 0.5 * (sigma_star + sigma_star.transpose());
  Normal2Params out;
  out.mean = sigma_star * (wqv(q, design, kappa) + sigma2 * sigma0_inv * phi0);
  out.cov = sigma2 * sigma_star;
  return out;
}

NormalParams rho_conditional(const Eigen::VectorXd& kappa, const Eigen::Vector2d& phi, double sigma2,
                             double sigma2_rho, const DriftDesign& design) {
  double a_rho = 0.0, b_rho = 0.0;
  for (std::size_t t = 1; t < static_cast<std::size_t>(kappa.size()); ++t) {
    double prev = kappa[idx(t - 1)] - design.eta(phi, t - 1);
    double cur = kappa[idx(t)] - design.eta(phi, t);
    a_rho += prev * prev;
    b_rho += cur * prev;
  }
  double denom = a_rho + sigma2 / sigma2_rho;
  return {b_rho / denom, sigma2 / denom};
}

InvGammaParams sigma2_kappa_conditional(const Eigen::VectorXd& kappa, const Eigen::Vector2d& phi, double rho,
                                        double a, double b, const DriftDesign& design) {
  Ar1Precision q(rho, static_cast<std::size_t>(kappa.size()));
  Eigen::VectorXd r = kappa - design.mean(phi);
  return {a + 0.5 * static_cast<double>(kappa.size()), b + 0.5 * q.quad_form(r)};
}

InvGammaParams sigma2_kappa_pop_conditional(const Eigen::VectorXd& kappa, const Eigen::Vector2d& phi,
                                            double rho, const Indicator& w, const PopulationPriors& pp,
                                            bool slab_terms, const DriftDesign& design) {
  InvGammaParams c = sigma2_kappa_conditional(kappa, phi, rho, pp.a_kappa, pp.b_kappa, design);
  if (!slab_terms) return c;
  // The slab N(0, c_l sigma2) also carries the variance.
  for (std::size_t l = 0; l < 2; ++l) {
    if (!w[l]) continue;
    c.shape += 0.5;
    c.scale += 0.5 * phi[idx(l)] * phi[idx(l)] / pp.slab_scale[l];
  }
  return c;
}

BetaParams p_conditional(const Indicator& w, double a, double b) {
  const double on = static_cast<double>(w[0]) + static_cast<double>(w[1]);
  return {a + on, b + 2.0 - on};
}

InvGammaParams sigma2_nu_conditional(const ModelState& s, const MortalityDataset& data,
                                     const PopulationPriors& pp, std::size_t i) {
  const double cells = static_cast<double>(data.n_ages() * data.n_years());
  return {pp.a_nu + 0.5 * cells, pp.b_nu + 0.5 * s.nu[i].squaredNorm()};
}

double kappa_prior_log_kernel(const Eigen::VectorXd& kappa, std::size_t t, double value,
                              const Eigen::Vector2d& phi, double rho, double sigma2,
                              const DriftDesign& design) {
  const std::size_t n = static_cast<std::size_t>(kappa.size());
  auto dev = [&](std::size_t s) {
    double k = (s == t) ? value : kappa[idx(s)];
    return k - design.eta(phi, s);
  };
  double q = 0.0;
  if (t == 0) {
    double e0 = dev(0);
    double r1 = dev(1) - rho * e0;
    q = e0 * e0 + r1 * r1;
  } else if (t + 1 < n) {
    double r0 = dev(t) - rho * dev(t - 1);
    double r1 = dev(t + 1) - rho * dev(t);
    q = r0 * r0 + r1 * r1;
  } else {
    double r0 = dev(t) - rho * dev(t - 1);
    q = r0 * r0;
  }
  return -0.5 * q / sigma2;
}

SpikeTerms spike_terms(const Eigen::VectorXd& kappa, const Eigen::Vector2d& phi, int l, double rho,
                       double sigma2, double slab_scale, const DriftDesign& design) {
  Ar1Precision q(rho, static_cast<std::size_t>(kappa.size()));
  const int other = 1 - l;
  Eigen::VectorXd wl = design.matrix().col(l);
  // Residual with component l removed and the other component at its current value.
  Eigen::VectorXd z = kappa - design.matrix().col(other) * phi[other];
  Eigen::VectorXd qwl = q.apply(wl);
  const double s_l = wl.dot(qwl);
  const double g = qwl.dot(z);
  const double prec = s_l + 1.0 / slab_scale;
  SpikeTerms out;
  out.precision = prec;
  out.projection = g;
  out.log_ratio = 0.5 * std::log1p(slab_scale * s_l) - g * g / (2.0 * sigma2 * prec);
  return out;
}

double inclusion_probability(double p, double log_ratio) {
  // xi = 1 / (1 + exp(log((1-p)/p) + log R*))
  double logit_neg = std::log1p(-p) - std::log(p) + log_ratio;
  double xi;
  if (logit_neg > 0.0) {
    double e = std::exp(-logit_neg);
    xi = e / (1.0 + e);
  } else {
    xi = 1.0 / (1.0 + std::exp(logit_neg));
  }
  return std::clamp(xi, 1e-15, 1.0 - 1e-15);
}

Normal2Params slab_conditional(const Eigen::VectorXd& kappa, double rho, double sigma2,
                               const std::array<double, 2>& slab_scale, const DriftDesign& design) {
  Ar1Precision q(rho, static_cast<std::size_t>(kappa.size()));
  Eigen::Matrix2d prec = wqw(q, design);
  prec(0, 0) += 1.0 / slab_scale[0];
  prec(1, 1) += 1.0 / slab_scale[1];
  Eigen::LDLT<Eigen::Matrix2d> ldlt(prec);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw SamplerError("slab posterior precision is not positive definite");
  }
  Eigen::Matrix2d a_star = ldlt.solve(Eigen::Matrix2d::Identity());
  a_star = 0.5 * (a_star + a_star.transpose());
  Normal2Params out;
  out.mean = a_star * wqv(q, design, kappa);
  out.cov = sigma2 * a_star;
  return out;
}

// ---------------------------------------------------------------------------
// Renormalisation maps

void rescale_beta_common(ModelState& s, double factor) {
  s.beta /= factor;
  s.kappa *= factor;
}

void rescale_beta_pop(ModelState& s, std::size_t i, double factor) {
  s.beta_pop.row(idx(i)) /= factor;
  s.kappa_pop.row(idx(i)) *= factor;
}

void center_kappa_common(ModelState& s, double shift) {
  s.kappa.array() -= shift;
  for (std::size_t i = 0; i < s.n_pops(); ++i) s.alpha.row(idx(i)) += s.beta.transpose() * shift;
}

void center_kappa_pop(ModelState& s, std::size_t i, double shift) {
  s.kappa_pop.row(idx(i)).array() -= shift;
  s.alpha.row(idx(i)) += s.beta_pop.row(idx(i)) * shift;
}

// ---------------------------------------------------------------------------
// Update steps

void update_alpha(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng) {
  static std::atomic<bool> warned{false};
  auto& fb = tuner.family(MhTuner::AlphaFallback);
  const std::size_t m = ctx.data.n_ages();
  for (std::size_t i = 0; i < ctx.data.n_pops(); ++i) {
    for (std::size_t x = 0; x < m; ++x) {
      GammaParams g = alpha_conditional(s, ctx, i, x);
      if (g.shape > 0.0 && g.rate > 0.0) {
        double e = rng.gamma(g.shape, g.rate);
        e = std::max(e, std::numeric_limits<double>::min());
        s.alpha(idx(i), idx(x)) = std::log(e);
        continue;
      }
      warn_once(warned, "non-positive Gamma shape for an age intercept; using a Metropolis step");
      // Kernel in alpha: exp(shape * alpha - rate * e^alpha).
      auto target = [&](double a) { return g.shape * a - g.rate * std::exp(a); };
      const std::size_t k = i * m + x;
      double cur = s.alpha(idx(i), idx(x));
      double prop = cur + fb.scale[k] * rng.normal();
      bool acc = mh_accept(target(cur), target(prop), rng.uniform());
      fb.record(k, acc);
      if (acc) s.alpha(idx(i), idx(x)) = prop;
    }
  }
}

void update_beta_common(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng) {
  auto& fam = tuner.family(MhTuner::BetaCommon);
  const std::size_t m = ctx.data.n_ages();
  const double centre = 1.0 / static_cast<double>(m);
  for (std::size_t x = 0; x < m; ++x) {
    auto target = [&](double b) {
      double lik = beta_common_target(s, ctx.data, x, b);
      return lik - (b - centre) * (b - centre) / (2.0 * s.sigma2_beta);
    };
    double cur = s.beta[idx(x)];
    double prop = cur + fam.scale[x] * rng.normal();
    bool acc = mh_accept(target(cur), target(prop), rng.uniform());
    fam.record(x, acc);
    if (acc) s.beta[idx(x)] = prop;
    if (ctx.config.enforce_constraints) {
      double b_tilde = s.beta.sum();
      if (std::abs(b_tilde) < 1e-12) throw SamplerError("beta renormalisation failed: sum is zero");
      rescale_beta_common(s, b_tilde);
    }
  }
}

void update_beta_pop(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng, std::size_t i) {
  auto& fam = tuner.family(MhTuner::BetaPop);
  const std::size_t m = ctx.data.n_ages();
  const double centre = 1.0 / static_cast<double>(m);
  const double var = s.sigma2_beta_pop[idx(i)];
  for (std::size_t x = 0; x < m; ++x) {
    auto target = [&](double b) {
      return beta_pop_target(s, ctx.data, i, x, b) - (b - centre) * (b - centre) / (2.0 * var);
    };
    const std::size_t k = i * m + x;
    double cur = s.beta_pop(idx(i), idx(x));
    double prop = cur + fam.scale[k] * rng.normal();
    bool acc = mh_accept(target(cur), target(prop), rng.uniform());
    fam.record(k, acc);
    if (acc) s.beta_pop(idx(i), idx(x)) = prop;
    if (ctx.config.enforce_constraints) {
      double b_tilde = s.beta_pop.row(idx(i)).norm();
      if (b_tilde < 1e-12) throw SamplerError("beta_pop renormalisation failed: norm is zero");
      rescale_beta_pop(s, i, b_tilde);
    }
  }
}

void update_sigma2_beta(ModelState& s, const Hyperparams& h, Rng& rng) {
  auto c = sigma2_beta_conditional(s, h);
  s.sigma2_beta = rng.inv_gamma(c.shape, c.scale);
  for (std::size_t i = 0; i < s.n_pops(); ++i) {
    auto ci = sigma2_beta_pop_conditional(s, h, i);
    s.sigma2_beta_pop[idx(i)] = rng.inv_gamma(ci.shape, ci.scale);
  }
}

void update_kappa_common(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng) {
  auto& fam = tuner.family(MhTuner::KappaCommon);
  const std::size_t nt = ctx.data.n_years();
  for (std::size_t t = 0; t < nt; ++t) {
    auto target = [&](double k) {
      double lik = kappa_common_likelihood(s, ctx.data, t, k);
      if (lik == kNegInf) return lik;
      return lik + kappa_prior_log_kernel(s.kappa, t, k, s.phi, s.rho, s.sigma2_kappa, ctx.design);
    };
    double cur = s.kappa[idx(t)];
    double prop = cur + fam.scale[t] * rng.normal();
    bool acc = mh_accept(target(cur), target(prop), rng.uniform());
    fam.record(t, acc);
    if (acc) s.kappa[idx(t)] = prop;
    if (ctx.config.enforce_constraints) center_kappa_common(s, s.kappa.mean());
  }
}

void update_kappa_pop(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng, std::size_t i) {
  auto& fam = tuner.family(MhTuner::KappaPop);
  const std::size_t nt = ctx.data.n_years();
  const Eigen::Vector2d phi = s.phi_pop.row(idx(i)).transpose();
  const double rho = s.rho_pop[idx(i)];
  const double var = s.sigma2_kappa_pop[idx(i)];
  for (std::size_t t = 0; t < nt; ++t) {
    const Eigen::VectorXd row = s.kappa_pop.row(idx(i)).transpose();
    auto target = [&](double k) {
      double lik = kappa_pop_likelihood(s, ctx.data, i, t, k);
      if (lik == kNegInf) return lik;
      return lik + kappa_prior_log_kernel(row, t, k, phi, rho, var, ctx.design);
    };
    const std::size_t k = i * nt + t;
    double cur = s.kappa_pop(idx(i), idx(t));
    double prop = cur + fam.scale[k] * rng.normal();
    bool acc = mh_accept(target(cur), target(prop), rng.uniform());
    fam.record(k, acc);
    if (acc) s.kappa_pop(idx(i), idx(t)) = prop;
    if (ctx.config.enforce_constraints) center_kappa_pop(s, i, s.kappa_pop.row(idx(i)).mean());
  }
}

void update_phi_common(ModelState& s, const SamplerContext& ctx, Rng& rng) {
  auto c = phi_conditional(s.kappa, s.rho, s.sigma2_kappa, ctx.hyper.phi0, ctx.hyper.sigma0, ctx.design);
  s.phi = draw_mvn2(c, rng);
}

void update_rho_common(ModelState& s, const SamplerContext& ctx, Rng& rng) {
  auto c = rho_conditional(s.kappa, s.phi, s.sigma2_kappa, ctx.hyper.sigma2_rho, ctx.design);
  s.rho = rng.truncated_normal(c.mean, std::sqrt(c.var), -1.0, 1.0);
}

void update_rho_pop(ModelState& s, const SamplerContext& ctx, Rng& rng, std::size_t i) {
  Eigen::VectorXd row = s.kappa_pop.row(idx(i)).transpose();
  Eigen::Vector2d phi = s.phi_pop.row(idx(i)).transpose();
  auto c = rho_conditional(row, phi, s.sigma2_kappa_pop[idx(i)], ctx.hyper.pops[i].sigma2_rho, ctx.design);
  s.rho_pop[idx(i)] = rng.truncated_normal(c.mean, std::sqrt(c.var), -1.0, 1.0);
}

void update_sigma2_kappa_common(ModelState& s, const SamplerContext& ctx, Rng& rng) {
  auto c = sigma2_kappa_conditional(s.kappa, s.phi, s.rho, ctx.hyper.a_kappa, ctx.hyper.b_kappa, ctx.design);
  s.sigma2_kappa = rng.inv_gamma(c.shape, c.scale);
}

void update_sigma2_kappa_pop(ModelState& s, const SamplerContext& ctx, Rng& rng, std::size_t i) {
  Eigen::VectorXd row = s.kappa_pop.row(idx(i)).transpose();
  Eigen::Vector2d phi = s.phi_pop.row(idx(i)).transpose();
  auto c = sigma2_kappa_pop_conditional(row, phi, s.rho_pop[idx(i)], s.w[i], ctx.hyper.pops[i],
                                        ctx.config.spike_selection, ctx.design);
  s.sigma2_kappa_pop[idx(i)] = rng.inv_gamma(c.shape, c.scale);
}

void update_spike(ModelState& s, const SamplerContext& ctx, Rng& rng, std::size_t i) {
  const auto& pp = ctx.hyper.pops[i];
  const Eigen::VectorXd kappa = s.kappa_pop.row(idx(i)).transpose();
  const double rho = s.rho_pop[idx(i)];
  const double var = s.sigma2_kappa_pop[idx(i)];
  Eigen::Vector2d phi = s.phi_pop.row(idx(i)).transpose();
  Indicator& w = s.w[i];

  // Indicator l is drawn with phi_l integrated out and the other component at
  // its current value; phi_l is then refreshed from its conditional so that
  // the next indicator conditions on a state consistent with w_l.
  for (int l = 0; l < 2; ++l) {
    SpikeTerms st = spike_terms(kappa, phi, l, rho, var, pp.slab_scale[static_cast<std::size_t>(l)], ctx.design);
    double xi = inclusion_probability(s.p[idx(i)], st.log_ratio);
    w[static_cast<std::size_t>(l)] = rng.bernoulli(xi) ? 1 : 0;
    phi[l] = w[static_cast<std::size_t>(l)]
                 ? rng.normal(st.projection / st.precision, std::sqrt(var / st.precision))
                 : 0.0;
  }

  // Drift given the indicators.
  if (w[0] && w[1]) {
    phi = draw_mvn2(slab_conditional(kappa, rho, var, pp.slab_scale, ctx.design), rng);
  } else if (!w[0] && !w[1]) {
    phi.setZero();
  } else {
    const int l = w[0] ? 0 : 1;
    phi[1 - l] = 0.0;
    SpikeTerms st = spike_terms(kappa, phi, l, rho, var, pp.slab_scale[static_cast<std::size_t>(l)], ctx.design);
    phi[l] = rng.normal(st.projection / st.precision, std::sqrt(var / st.precision));
  }
  s.phi_pop.row(idx(i)) = phi.transpose();

  BetaParams bp = p_conditional(w, ctx.hyper.a_p, ctx.hyper.b_p);
  double p = rng.beta(bp.a, bp.b);
  s.p[idx(i)] = std::clamp(p, 1e-300, 1.0 - 1e-16);
}

void update_overdispersion(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng) {
  const auto& data = ctx.data;
  auto& fam = tuner.family(MhTuner::Nu);
  for (std::size_t i = 0; i < data.n_pops(); ++i) {
    auto c = sigma2_nu_conditional(s, data, ctx.hyper.pops[i], i);
    s.sigma2_nu[idx(i)] = rng.inv_gamma(c.shape, c.scale);
  }
  for (std::size_t i = 0; i < data.n_pops(); ++i) {
    const double var = s.sigma2_nu[idx(i)];
    const double sd = std::sqrt(var);
    for (std::size_t x = 0; x < data.n_ages(); ++x) {
      for (std::size_t t = 0; t < data.n_years(); ++t) {
        double& nu = s.nu[i](idx(x), idx(t));
        if (data.missing(i, x, t)) {
          nu = rng.normal(0.0, sd);
          continue;
        }
        const double base = linear_predictor(s, i, x, t) - nu;
        const double d = static_cast<double>(data.deaths(i, x, t));
        const double e = data.exposure(i, x, t);
        auto target = [&](double v) {
          double lp = base + v;
          if (lp > kMaxLogRate) return kNegInf;
          return d * v - e * std::exp(lp) - v * v / (2.0 * var);
        };
        const std::size_t k = data.flat(i, x, t);
        double prop = nu + fam.scale[k] * rng.normal();
        bool acc = mh_accept(target(nu), target(prop), rng.uniform());
        fam.record(k, acc);
        if (acc) nu = prop;
      }
    }
  }
}

void sweep(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng) {
  const std::size_t n = ctx.data.n_pops();
  update_alpha(s, ctx, tuner, rng);
  update_beta_common(s, ctx, tuner, rng);
  for (std::size_t i = 0; i < n; ++i) update_beta_pop(s, ctx, tuner, rng, i);
  update_kappa_common(s, ctx, tuner, rng);
  update_phi_common(s, ctx, rng);
  update_rho_common(s, ctx, rng);
  update_sigma2_kappa_common(s, ctx, rng);
  for (std::size_t i = 0; i < n; ++i) {
    if (ctx.config.spike_selection) update_spike(s, ctx, rng, i);
    update_kappa_pop(s, ctx, tuner, rng, i);
    update_rho_pop(s, ctx, rng, i);
    update_sigma2_kappa_pop(s, ctx, rng, i);
  }
  if (ctx.config.overdispersion) update_overdispersion(s, ctx, tuner, rng);
  update_sigma2_beta(s, ctx.hyper, rng);
}

// ---------------------------------------------------------------------------

ModelState initialize_state(const MortalityDataset& data, const Hyperparams& h) {
  (void)h;
  const std::size_t n = data.n_pops(), m = data.n_ages(), nt = data.n_years();
  ModelState s = ModelState::zeros(n, m, nt);
  const double md = static_cast<double>(m);

  std::vector<double> resid(data.n_cells(), 0.0);
  std::vector<std::uint8_t> have(data.n_cells(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t x = 0; x < m; ++x) {
      double acc = 0.0;
      std::size_t cnt = 0;
      for (std::size_t t = 0; t < nt; ++t) {
        if (data.missing(i, x, t)) continue;
        acc += std::log((static_cast<double>(data.deaths(i, x, t)) + 0.5) / data.exposure(i, x, t));
        ++cnt;
      }
      s.alpha(idx(i), idx(x)) = cnt ? acc / static_cast<double>(cnt) : std::log(0.5);
      for (std::size_t t = 0; t < nt; ++t) {
        if (data.missing(i, x, t)) continue;
        auto k = data.flat(i, x, t);
        resid[k] = std::log((static_cast<double>(data.deaths(i, x, t)) + 0.5) / data.exposure(i, x, t)) -
                   s.alpha(idx(i), idx(x));
        have[k] = 1;
      }
    }
  }

  // Common index: sum over ages of the population-averaged residual (beta = 1/M).
  Eigen::MatrixXd pop_mean = Eigen::MatrixXd::Zero(idx(m), idx(nt));
  for (std::size_t x = 0; x < m; ++x)
    for (std::size_t t = 0; t < nt; ++t) {
      double acc = 0.0;
      std::size_t cnt = 0;
      for (std::size_t i = 0; i < n; ++i) {
        auto k = data.flat(i, x, t);
        if (have[k]) {
          acc += resid[k];
          ++cnt;
        }
      }
      pop_mean(idx(x), idx(t)) = cnt ? acc / static_cast<double>(cnt) : 0.0;
    }
  s.beta = Eigen::VectorXd::Constant(idx(m), 1.0 / md);
  s.beta_pop = Eigen::MatrixXd::Constant(idx(n), idx(m), 1.0 / std::sqrt(md));
  for (std::size_t t = 0; t < nt; ++t) s.kappa[idx(t)] = pop_mean.col(idx(t)).sum();
  s.kappa.array() -= s.kappa.mean();

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < nt; ++t) {
      double acc = 0.0;
      std::size_t cnt = 0;
      for (std::size_t x = 0; x < m; ++x) {
        auto k = data.flat(i, x, t);
        if (!have[k]) continue;
        acc += resid[k] - pop_mean(idx(x), idx(t));
        ++cnt;
      }
      s.kappa_pop(idx(i), idx(t)) = cnt ? std::sqrt(md) * acc / static_cast<double>(cnt) : 0.0;
    }
    s.kappa_pop.row(idx(i)).array() -= s.kappa_pop.row(idx(i)).mean();
  }

  s.rho = 0.5;
  s.rho_pop.setConstant(0.5);
  // Least-squares line through the common index.
  DriftDesign design = DriftDesign::from_dataset(data);
  const auto& w = design.matrix();
  s.phi = (w.transpose() * w).ldlt().solve(w.transpose() * s.kappa);
  s.phi_pop.setZero();
  s.w.assign(n, Indicator{1, 0});
  s.p.setConstant(0.5);
  for (auto& nu : s.nu) nu.setZero();
  s.sigma2_beta = 1.0;
  s.sigma2_beta_pop.setOnes();
  s.sigma2_kappa = 1.0;
  s.sigma2_kappa_pop.setOnes();
  s.sigma2_nu.setOnes();
  return s;
}

ChainOutput run_chain(const MortalityDataset& data, const Hyperparams& h, const SamplerConfig& cfg,
                      std::optional<ModelState> initial, const IterationCallback& on_sweep) {
  cfg.validate();
  h.validate();
  data.validate();
  if (h.pops.size() != data.n_pops()) throw SamplerError("hyperparameters do not match the population count");
  if (data.n_years() < 2) throw SamplerError("at least two years are required");

  const auto start = std::chrono::steady_clock::now();
  DriftDesign design = DriftDesign::from_dataset(data);
  SamplerContext ctx{data, h, design, cfg};

  ModelState s = initial ? std::move(*initial) : initialize_state(data, h);
  if (s.n_pops() != data.n_pops() || s.n_ages() != data.n_ages() || s.n_years() != data.n_years()) {
    throw SamplerError("initial state dimensions do not match the dataset");
  }
  if (!cfg.spike_selection) {
    s.phi_pop.setZero();
    s.w.assign(data.n_pops(), Indicator{0, 0});
  }
  if (!cfg.overdispersion) {
    for (auto& nu : s.nu) nu.setZero();
  }

  MhTuner tuner(data, s, cfg);
  Rng rng(cfg.seed, cfg.chain_index);
  ChainOutput out;
  out.seed = cfg.seed;
  out.draws.reserve(cfg.stored_draws());

  if (cfg.burn_in == 0) tuner.freeze();
  for (std::size_t j = 1; j <= cfg.iterations; ++j) {
    if (j == cfg.burn_in + 1) {
      tuner.freeze();
      tuner.reset_counts();
    }
    try {
      sweep(s, ctx, tuner, rng);
    } catch (const std::exception& e) {
      throw SamplerError("iteration " + std::to_string(j) + ": " + e.what());
    }
    tuner.end_iteration();
    if (j > cfg.burn_in) {
      out.indicators.push_back(s.w);
      out.scale_trace.push_back(tuner.scale_checksum());
      if ((j - cfg.burn_in) % cfg.thin == 0) {
        out.draws.push_back(s);
        out.draw_iterations.push_back(j);
      }
    }
    if (on_sweep) on_sweep(j, s);
  }

  for (int f = 0; f < MhTuner::kNumFamilies; ++f) {
    const auto fam = static_cast<MhTuner::Family>(f);
    out.acceptance[MhTuner::family_name(fam)] = tuner.family(fam).totals;
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

std::vector<ChainOutput> run_chains(const MortalityDataset& data, const Hyperparams& h,
                                    const SamplerConfig& cfg, std::size_t n_chains,
                                    std::size_t threads) {
  std::vector<ChainOutput> out(n_chains);
  std::vector<std::exception_ptr> errors(n_chains);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < n_chains; k = next++) {
      try {
        SamplerConfig c = cfg;
        c.chain_index = k;
        out[k] = run_chain(data, h, c);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(threads, n_chains));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace bplnlc
