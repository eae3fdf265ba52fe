#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/minima.hpp>

#include "bplnlc/model.hpp"
#include "bplnlc/sampler.hpp"

namespace oracle {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double safe(const std::function<double(double)>& f, double u) {
  double v = f(u);
  return std::isfinite(v) ? v : kNegInf;
}

struct Window {
  double mode, lmax, lo, hi;
};

// Grid search plus Brent refinement for the mode, then walk outwards until
// the log density has dropped by 80.
Window find_window(const std::function<double(double)>& logf, double lo, double hi, double centre,
                   double halfwidth) {
  double a = std::max(lo, centre - halfwidth), b = std::min(hi, centre + halfwidth);
  const int n = 8000;
  const double step = (b - a) / n;
  double best = a + 0.5 * step, bv = kNegInf;
  for (int k = 0; k < n; ++k) {
    double u = a + (k + 0.5) * step;
    double v = safe(logf, u);
    if (v > bv) {
      bv = v;
      best = u;
    }
  }
  if (!std::isfinite(bv)) throw std::runtime_error("oracle: density vanishes on the search grid");
  auto neg = [&](double u) { return -safe(logf, u); };
  auto r = boost::math::tools::brent_find_minima(neg, std::max(a, best - step), std::min(b, best + step), 60);
  Window w{r.first, -r.second, 0, 0};
  if (bv > w.lmax) {
    w.mode = best;
    w.lmax = bv;
  }
  // local scale from the curvature, for the walking step
  const double h = 1e-4 * (1.0 + std::abs(w.mode));
  double c = -(safe(logf, w.mode + h) - 2.0 * w.lmax + safe(logf, w.mode - h)) / (h * h);
  double sd = (std::isfinite(c) && c > 0.0) ? 1.0 / std::sqrt(c) : step;
  sd = std::max(sd, 1e-9);
  auto walk = [&](double dir, double bound) {
    double u = w.mode;
    double s = 0.25 * sd;
    for (int k = 0; k < 100000; ++k) {
      double next = u + dir * s;
      if ((dir < 0 && next <= bound) || (dir > 0 && next >= bound)) return bound;
      u = next;
      if (safe(logf, u) < w.lmax - 80.0) return u;
      s *= 1.05;
    }
    return u;
  };
  w.lo = walk(-1.0, lo);
  w.hi = walk(1.0, hi);
  return w;
}

double integrate(const std::function<double(double)>& f, double a, double b) {
  double err = 0.0;
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 15, 1e-12, &err);
}

Moments moments_on(const std::function<double(double)>& logf, const std::function<double(double)>& g, double lo,
                   double hi, double centre, double halfwidth) {
  // the window has to cover g^2 f as well as f
  auto wide = [&](double u) {
    const double gv = g(u);
    return safe(logf, u) + 2.0 * std::log1p(std::abs(gv));
  };
  Window ww = find_window(wide, lo, hi, centre, halfwidth);
  Window w = find_window(logf, lo, hi, centre, halfwidth);
  w.lo = std::min(w.lo, ww.lo);
  w.hi = std::max(w.hi, ww.hi);
  auto dens = [&](double u) { return std::exp(safe(logf, u) - w.lmax); };
  // split at the mode so the peak sits on an interval boundary
  auto integ = [&](const std::function<double(double)>& f) {
    return integrate(f, w.lo, w.mode) + integrate(f, w.mode, w.hi);
  };
  const double z = integ(dens);
  const double m = integ([&](double u) { return g(u) * dens(u); }) / z;
  const double v = integ([&](double u) {
                     double d = g(u) - m;
                     return d * d * dens(u);
                   }) / z;
  return {m, v};
}

double log_integral(const std::function<double(double)>& logf, double centre, double halfwidth) {
  const double inf = std::numeric_limits<double>::infinity();
  Window w = find_window(logf, -inf, inf, centre, halfwidth);
  auto dens = [&](double u) { return std::exp(safe(logf, u) - w.lmax); };
  return w.lmax + std::log(integrate(dens, w.lo, w.mode) + integrate(dens, w.mode, w.hi));
}

std::vector<double> year_axis(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> start(-3, 10);
  int s = start(rng);
  std::vector<double> y;
  for (std::size_t t = 0; t < n; ++t) y.push_back(s + static_cast<double>(t));
  return y;
}

Eigen::VectorXd random_vector(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (auto& x : v) x = u(rng);
  return v;
}

double unif(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Moments gamma_moments(double shape, double rate) { return {shape / rate, shape / (rate * rate)}; }
Moments inv_gamma_moments(double a, double b) {
  return {b / (a - 1.0), b * b / ((a - 1.0) * (a - 1.0) * (a - 2.0))};
}
Moments beta_moments(double a, double b) {
  const double s = a + b;
  return {a / s, a * b / (s * s * (s + 1.0))};
}

// log-scale inverse gamma kernel with extra Gaussian terms: the density of
// u = log s for s ~ IG(a, b) times s^{-k/2} exp(-ss / s).
double log_ig_u(double u, double a, double b, double half_count, double half_ss) {
  const double s = std::exp(u);
  return -(a + 1.0) * u - b / s - half_count * u - half_ss / s + u;
}

void track(SuiteResult& r, double err, const std::string& what) {
  ++r.instances;
  if (!(err <= r.max_error)) {
    r.max_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
    r.worst = what;
  }
}

std::string describe(std::size_t k) { return "instance " + std::to_string(k); }

}  // namespace

Moments quad_moments(const std::function<double(double)>& logf, const std::function<double(double)>& g,
                     double start) {
  const double inf = std::numeric_limits<double>::infinity();
  return moments_on(logf, g, -inf, inf, start, 60.0);
}

void quad_moments_2d(const std::function<double(const Eigen::Vector2d&)>& logf, Eigen::Vector2d& mean,
                     Eigen::Matrix2d& cov) {
  // Newton step from a finite-difference gradient and Hessian to place the windows.
  auto hess_at = [&](const Eigen::Vector2d& p, Eigen::Vector2d& grad, Eigen::Matrix2d& hess) {
    const double h = 1e-3;
    for (int i = 0; i < 2; ++i) {
      Eigen::Vector2d e = Eigen::Vector2d::Zero();
      e[i] = h;
      grad[i] = (logf(p + e) - logf(p - e)) / (2 * h);
      for (int j = 0; j < 2; ++j) {
        Eigen::Vector2d f = Eigen::Vector2d::Zero();
        f[j] = h;
        hess(i, j) = (logf(p + e + f) - logf(p + e - f) - logf(p - e + f) + logf(p - e - f)) / (4 * h * h);
      }
    }
  };
  Eigen::Vector2d p = Eigen::Vector2d::Zero(), grad;
  Eigen::Matrix2d hess;
  for (int it = 0; it < 3; ++it) {
    hess_at(p, grad, hess);
    p -= hess.ldlt().solve(grad);
  }
  hess_at(p, grad, hess);
  const Eigen::Matrix2d prec = -hess;
  const double lmax = logf(p);
  const double sd_inner = 1.0 / std::sqrt(prec(0, 0));
  const double span = 14.0;

  // outer variable phi_2, inner phi_1 around its conditional mode
  auto inner = [&](double y, int which) {
    const double cm = p[0] - prec(0, 1) / prec(0, 0) * (y - p[1]);
    auto f = [&](double x) {
      const double d = std::exp(logf(Eigen::Vector2d(x, y)) - lmax);
      switch (which) {
        case 0: return d;
        case 1: return (x - p[0]) * d;
        case 2: return (y - p[1]) * d;
        case 3: return (x - p[0]) * (x - p[0]) * d;
        case 4: return (x - p[0]) * (y - p[1]) * d;
        default: return (y - p[1]) * (y - p[1]) * d;
      }
    };
    return integrate(f, cm - span * sd_inner, cm) + integrate(f, cm, cm + span * sd_inner);
  };
  double m[6];
  // marginal sd of phi_2
  const double sd_y = std::sqrt(prec(0, 0) / prec.determinant());
  for (int k = 0; k < 6; ++k) {
    auto f = [&](double y) { return inner(y, k); };
    m[k] = integrate(f, p[1] - span * sd_y, p[1]) + integrate(f, p[1], p[1] + span * sd_y);
  }
  const double z = m[0];
  const Eigen::Vector2d shift(m[1] / z, m[2] / z);
  mean = p + shift;
  cov << m[3] / z - shift[0] * shift[0], m[4] / z - shift[0] * shift[1], m[4] / z - shift[0] * shift[1],
      m[5] / z - shift[1] * shift[1];
}

Eigen::MatrixXd dense_u(double rho, std::size_t n) {
  Eigen::MatrixXd u = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t t = 0; t < n; ++t) {
    u(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(t)) = 1.0;
    if (t > 0) u(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(t - 1)) = -rho;
  }
  return u;
}

Eigen::MatrixXd dense_q(double rho, std::size_t n) {
  Eigen::MatrixXd u = dense_u(rho, n);
  const auto k = static_cast<Eigen::Index>(n);
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(k, k);
  // plain triple loop, independent of Eigen's product kernels
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j) {
      double acc = 0.0;
      for (Eigen::Index r = 0; r < k; ++r) acc += u(r, i) * u(r, j);
      q(i, j) = acc;
    }
  return q;
}

double ar1_quadratic(const Eigen::VectorXd& kappa, const Eigen::Vector2d& phi, double rho,
                     const std::vector<double>& years) {
  double acc = 0.0, prev = 0.0;
  for (Eigen::Index t = 0; t < kappa.size(); ++t) {
    const double d = kappa[t] - phi[0] - phi[1] * years[static_cast<std::size_t>(t)];
    const double r = t == 0 ? d : d - rho * prev;
    acc += r * r;
    prev = d;
  }
  return -0.5 * acc;
}

Moments truncated_normal_moments(double m, double v, double lo, double hi) {
  const double s = std::sqrt(v);
  boost::math::normal_distribution<double> nd;
  const double a = (lo - m) / s, b = (hi - m) / s;
  const double z = boost::math::cdf(nd, b) - boost::math::cdf(nd, a);
  const double pa = boost::math::pdf(nd, a), pb = boost::math::pdf(nd, b);
  const double mean = m + s * (pa - pb) / z;
  const double r = (pa - pb) / z;
  const double var = v * (1.0 + (a * pa - b * pb) / z - r * r);
  return {mean, var};
}

double rel_mean_error(const Moments& got, const Moments& ref) {
  return std::abs(got.mean - ref.mean) / std::max(std::abs(ref.mean), std::sqrt(ref.var));
}

double rel_var_error(const Moments& got, const Moments& ref) { return std::abs(got.var - ref.var) / ref.var; }

// ---------------------------------------------------------------------------

std::vector<SuiteResult> conjugacy_suite(std::uint64_t seed, std::size_t count) {
  using namespace bplnlc;
  std::mt19937_64 rng(seed);
  std::vector<SuiteResult> out;
  const double inf = std::numeric_limits<double>::infinity();

  auto record = [](SuiteResult& r, const Moments& closed, const Moments& quad, std::size_t k) {
    track(r, std::max(rel_mean_error(closed, quad), rel_var_error(closed, quad)), describe(k));
  };

  {  // e_x = exp(alpha_x), one age and three years
    SuiteResult r{"e_x"};
    for (std::size_t k = 0; k < count; ++k) {
      MortalityDataset data({"p"}, 0, 1, 1, 3);
      std::uniform_int_distribution<int> dd(0, 25);
      for (std::size_t t = 0; t < 3; ++t) data.set_cell(0, 0, t, dd(rng), unif(rng, 50, 500), false);
      ModelState s = ModelState::zeros(1, 1, 3);
      s.beta[0] = unif(rng, 0.5, 1.5);
      s.beta_pop(0, 0) = unif(rng, -1, 1);
      s.kappa = random_vector(rng, 3, -1, 1);
      s.kappa_pop.row(0) = random_vector(rng, 3, -1, 1).transpose();
      s.nu[0] = random_vector(rng, 3, -0.3, 0.3).transpose();
      Hyperparams h = Hyperparams::reference(1);
      h.pops[0].a_e = unif(rng, 1.5, 4.0);
      h.pops[0].b_e = unif(rng, 0.5, 3.0);
      SamplerConfig cfg;
      DriftDesign design({1.0, 2.0, 3.0});
      SamplerContext ctx{data, h, design, cfg};
      GammaParams g = alpha_conditional(s, ctx, 0, 0);
      const double a = h.pops[0].a_e, b = h.pops[0].b_e;
      auto logf = [&](double al) {
        double v = (a - 1.0) * al - b * std::exp(al);
        for (std::size_t t = 0; t < 3; ++t) {
          const double lp = al + s.beta[0] * s.kappa[static_cast<Eigen::Index>(t)] +
                            s.beta_pop(0, 0) * s.kappa_pop(0, static_cast<Eigen::Index>(t)) +
                            s.nu[0](0, static_cast<Eigen::Index>(t));
          v += static_cast<double>(data.deaths(0, 0, t)) * lp - data.exposure(0, 0, t) * std::exp(lp);
        }
        return v;
      };
      Moments q = moments_on(logf, [](double al) { return std::exp(al); }, -inf, inf, -3.0, 60.0);
      record(r, gamma_moments(g.shape, g.rate), q, k);
    }
    out.push_back(r);
  }

  auto beta_variance_family = [&](bool pop) {
    SuiteResult r{pop ? "sigma2_beta_pop" : "sigma2_beta"};
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t m = 3;
      ModelState s = ModelState::zeros(1, m, 3);
      Hyperparams h = Hyperparams::reference(1);
      const double a = unif(rng, 1.5, 4.0), b = unif(rng, 0.05, 2.0);
      Eigen::VectorXd beta = random_vector(rng, m, -0.5, 1.0);
      InvGammaParams c;
      if (pop) {
        h.pops[0].a_beta = a;
        h.pops[0].b_beta = b;
        s.beta_pop.row(0) = beta.transpose();
        c = sigma2_beta_pop_conditional(s, h, 0);
      } else {
        h.a_beta = a;
        h.b_beta = b;
        s.beta = beta;
        c = sigma2_beta_conditional(s, h);
      }
      const double ss = (beta.array() - 1.0 / static_cast<double>(m)).square().sum();
      auto logf = [&](double u) { return log_ig_u(u, a, b, 0.5 * static_cast<double>(m), 0.5 * ss); };
      Moments q = moments_on(logf, [](double u) { return std::exp(u); }, -inf, inf, 0.0, 60.0);
      record(r, inv_gamma_moments(c.shape, c.scale), q, k);
    }
    out.push_back(r);
  };
  beta_variance_family(false);
  beta_variance_family(true);

  {  // drift phi, 2-D
    SuiteResult r{"phi"};
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t n = 5;
      auto years = year_axis(rng, n);
      DriftDesign design(years);
      Eigen::VectorXd kappa = random_vector(rng, n, -3, 3);
      const double rho = unif(rng, -0.9, 0.9), s2 = unif(rng, 0.05, 2.0);
      Eigen::Vector2d phi0(unif(rng, -1, 1), unif(rng, -0.5, 0.5));
      Eigen::Matrix2d sigma0;
      const double d1 = unif(rng, 0.5, 5), d2 = unif(rng, 0.1, 2), off = unif(rng, -0.5, 0.5) * std::sqrt(d1 * d2);
      sigma0 << d1, off, off, d2;
      Normal2Params c = phi_conditional(kappa, rho, s2, phi0, sigma0, design);
      const Eigen::Matrix2d s0inv = sigma0.inverse();
      auto logf = [&](const Eigen::Vector2d& ph) {
        const Eigen::Vector2d d = ph - phi0;
        return ar1_quadratic(kappa, ph, rho, years) / s2 - 0.5 * d.dot(s0inv * d);
      };
      Eigen::Vector2d qm;
      Eigen::Matrix2d qc;
      quad_moments_2d(logf, qm, qc);
      double err = 0.0;
      for (int i = 0; i < 2; ++i) {
        const double sd = std::sqrt(qc(i, i));
        err = std::max(err, std::abs(c.mean[i] - qm[i]) / std::max(std::abs(qm[i]), sd));
        err = std::max(err, std::abs(c.cov(i, i) - qc(i, i)) / qc(i, i));
      }
      err = std::max(err, std::abs(c.cov(0, 1) - qc(0, 1)) / std::sqrt(qc(0, 0) * qc(1, 1)));
      track(r, err, describe(k));
    }
    out.push_back(r);
  }

  auto rho_family = [&](bool pop) {
    SuiteResult r{pop ? "rho_pop" : "rho"};
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t n = 5;
      auto years = year_axis(rng, n);
      DriftDesign design(years);
      Eigen::VectorXd kappa = random_vector(rng, n, -2, 2);
      Eigen::Vector2d phi(unif(rng, -1, 1), unif(rng, -0.3, 0.3));
      const double s2 = unif(rng, 0.05, 2.0);
      const double s2rho = pop ? unif(rng, 0.05, 0.5) : unif(rng, 0.3, 3.0);
      NormalParams c = rho_conditional(kappa, phi, s2, s2rho, design);
      auto logf = [&](double rho) { return ar1_quadratic(kappa, phi, rho, years) / s2 - 0.5 * rho * rho / s2rho; };
      Moments q = moments_on(logf, [](double x) { return x; }, -1.0, 1.0, 0.0, 1.0);
      record(r, truncated_normal_moments(c.mean, c.var, -1.0, 1.0), q, k);
    }
    out.push_back(r);
  };
  rho_family(false);
  rho_family(true);

  auto kappa_variance_family = [&](bool pop) {
    SuiteResult r{pop ? "sigma2_kappa_pop" : "sigma2_kappa"};
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t n = 4 + (k % 2);
      auto years = year_axis(rng, n);
      DriftDesign design(years);
      Eigen::VectorXd kappa = random_vector(rng, n, -2, 2);
      Eigen::Vector2d phi(unif(rng, -1, 1), unif(rng, -0.3, 0.3));
      const double rho = unif(rng, -0.9, 0.9);
      const double a = unif(rng, 1.0, 3.0), b = unif(rng, 0.05, 2.0);
      InvGammaParams c;
      double half_count = 0.5 * static_cast<double>(n);
      double half_ss = 0.0;
      if (pop) {
        PopulationPriors pp;
        pp.a_kappa = a;
        pp.b_kappa = b;
        pp.slab_scale = {unif(rng, 0.5, 20.0), unif(rng, 0.05, 10.0)};
        bplnlc::Indicator w{static_cast<std::uint8_t>(k % 2), static_cast<std::uint8_t>((k / 2) % 2)};
        if (k % 4 == 3) w = {1, 1};
        for (int l = 0; l < 2; ++l) {
          if (!w[static_cast<std::size_t>(l)]) {
            phi[l] = 0.0;
            continue;
          }
          half_count += 0.5;
          half_ss += 0.5 * phi[l] * phi[l] / pp.slab_scale[static_cast<std::size_t>(l)];
        }
        half_ss += -ar1_quadratic(kappa, phi, rho, years);
        c = sigma2_kappa_pop_conditional(kappa, phi, rho, w, pp, true, design);
      } else {
        half_ss = -ar1_quadratic(kappa, phi, rho, years);
        c = sigma2_kappa_conditional(kappa, phi, rho, a, b, design);
      }
      auto logf = [&](double u) { return log_ig_u(u, a, b, half_count, half_ss); };
      Moments q = moments_on(logf, [](double u) { return std::exp(u); }, -inf, inf, 0.0, 60.0);
      record(r, inv_gamma_moments(c.shape, c.scale), q, k);
    }
    out.push_back(r);
  };
  kappa_variance_family(false);
  kappa_variance_family(true);

  {  // inclusion probability
    SuiteResult r{"p"};
    for (std::size_t k = 0; k < count; ++k) {
      const double a = unif(rng, 0.5, 3.0), b = unif(rng, 0.5, 3.0);
      bplnlc::Indicator w{static_cast<std::uint8_t>(k % 2), static_cast<std::uint8_t>((k / 2) % 2)};
      BetaParams c = p_conditional(w, a, b);
      const double on = w[0] + w[1];
      auto logf = [&](double u) {
        const double lp = -std::log1p(std::exp(-u)), lq = -std::log1p(std::exp(u));
        return (a - 1.0 + on) * lp + (b - 1.0 + 2.0 - on) * lq + lp + lq;
      };
      Moments q = moments_on(logf, [](double u) { return 1.0 / (1.0 + std::exp(-u)); }, -inf, inf, 0.0, 60.0);
      record(r, beta_moments(c.a, c.b), q, k);
    }
    out.push_back(r);
  }

  {  // overdispersion variance
    SuiteResult r{"sigma2_nu"};
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t m = 2, n = 3;
      MortalityDataset data({"p"}, 0, m, 1, n);
      for (std::size_t x = 0; x < m; ++x)
        for (std::size_t t = 0; t < n; ++t) data.set_cell(0, x, t, 5, 100.0, false);
      ModelState s = ModelState::zeros(1, m, n);
      for (std::size_t x = 0; x < m; ++x)
        s.nu[0].row(static_cast<Eigen::Index>(x)) = random_vector(rng, n, -1, 1).transpose();
      PopulationPriors pp;
      pp.a_nu = unif(rng, 0.5, 3.0);
      pp.b_nu = unif(rng, 0.05, 3.0);
      InvGammaParams c = sigma2_nu_conditional(s, data, pp, 0);
      const double ss = s.nu[0].squaredNorm();
      auto logf = [&](double u) { return log_ig_u(u, pp.a_nu, pp.b_nu, 0.5 * static_cast<double>(m * n), 0.5 * ss); };
      Moments q = moments_on(logf, [](double u) { return std::exp(u); }, -inf, inf, 0.0, 60.0);
      record(r, inv_gamma_moments(c.shape, c.scale), q, k);
    }
    out.push_back(r);
  }
  return out;
}

SuiteResult spike_ratio_suite(std::uint64_t seed, std::size_t count) {
  using namespace bplnlc;
  std::mt19937_64 rng(seed);
  SuiteResult r{"R*"};
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t n = 5;
    auto years = year_axis(rng, n);
    DriftDesign design(years);
    const int l = static_cast<int>(k % 2);
    Eigen::VectorXd kappa = random_vector(rng, n, -2, 2);
    Eigen::Vector2d phi(unif(rng, -1, 1), unif(rng, -0.4, 0.4));
    const double rho = unif(rng, -0.9, 0.9), s2 = unif(rng, 0.05, 2.0), c = unif(rng, 0.5, 20.0);
    const double got = spike_terms(kappa, phi, l, rho, s2, c, design).log_ratio;

    // z excludes component l; the other component stays at its value
    Eigen::Vector2d other = phi;
    other[l] = 0.0;
    auto loglik = [&](double x) {
      Eigen::Vector2d ph = other;
      ph[l] = x;
      return ar1_quadratic(kappa, ph, rho, years) / s2;
    };
    auto integrand = [&](double x) {
      return loglik(x) - 0.5 * x * x / (c * s2) - 0.5 * std::log(2.0 * M_PI * c * s2);
    };
    const double log_m1 = log_integral(integrand, 0.0, 200.0);
    const double want = loglik(0.0) - log_m1;
    std::ostringstream what;
    what << describe(k) << " (l=" << l + 1 << ", log R*=" << want << ")";
    track(r, std::abs(std::expm1(got - want)), what.str());
  }
  return r;
}

SuiteResult kernel_suite(std::uint64_t seed, std::size_t count) {
  using namespace bplnlc;
  std::mt19937_64 rng(seed);
  SuiteResult r{"kernel"};
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t n = 5;
    auto years = year_axis(rng, n);
    DriftDesign design(years);
    Eigen::VectorXd kappa = random_vector(rng, n, -2, 2);
    Eigen::Vector2d phi(unif(rng, -1, 1), unif(rng, -0.3, 0.3));
    const double rho = unif(rng, -0.95, 0.95), s2 = unif(rng, 0.05, 2.0);
    Eigen::VectorXd mu(static_cast<Eigen::Index>(n));
    for (std::size_t t = 0; t < n; ++t) mu[static_cast<Eigen::Index>(t)] = phi[0] + phi[1] * years[t];
    const Eigen::MatrixXd cov = s2 * dense_q(rho, n).inverse();
    double err = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      // partition into t and the rest
      std::vector<Eigen::Index> rest;
      for (std::size_t j = 0; j < n; ++j)
        if (j != t) rest.push_back(static_cast<Eigen::Index>(j));
      const auto tt = static_cast<Eigen::Index>(t);
      const Eigen::Index nr = static_cast<Eigen::Index>(rest.size());
      Eigen::MatrixXd srr(nr, nr);
      Eigen::VectorXd str(nr), dr(nr);
      for (Eigen::Index a = 0; a < nr; ++a) {
        str[a] = cov(tt, rest[static_cast<std::size_t>(a)]);
        dr[a] = kappa[rest[static_cast<std::size_t>(a)]] - mu[rest[static_cast<std::size_t>(a)]];
        for (Eigen::Index b = 0; b < nr; ++b)
          srr(a, b) = cov(rest[static_cast<std::size_t>(a)], rest[static_cast<std::size_t>(b)]);
      }
      const Eigen::VectorXd sol = srr.ldlt().solve(str);
      const double cm = mu[tt] + sol.dot(dr);
      const double cv = cov(tt, tt) - sol.dot(str);
      for (int rep = 0; rep < 3; ++rep) {
        const double v1 = unif(rng, -3, 3), v2 = unif(rng, -3, 3);
        const double want = -0.5 * ((v1 - cm) * (v1 - cm) - (v2 - cm) * (v2 - cm)) / cv;
        const double got = kappa_prior_log_kernel(kappa, t, v1, phi, rho, s2, design) -
                           kappa_prior_log_kernel(kappa, t, v2, phi, rho, s2, design);
        err = std::max(err, std::abs(got - want));
      }
    }
    track(r, err, describe(k));
  }
  return r;
}

}  // namespace oracle
