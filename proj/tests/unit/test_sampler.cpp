#include <doctest.h>

#include <cmath>
#include <numeric>

#include "bplnlc/diagnostics.hpp"
#include "bplnlc/sampler.hpp"
#include "bplnlc/synth.hpp"
#include "oracles.hpp"

using namespace bplnlc;

namespace {

std::vector<double> years_from(double first, std::size_t n) {
  std::vector<double> y(n);
  std::iota(y.begin(), y.end(), first);
  return y;
}

}  // namespace

TEST_CASE("mh accept") {
  CHECK(mh_accept(-3.0, -3.0, 0.999));
  CHECK(mh_accept(0.0, std::log(0.5), 0.4));
  CHECK_FALSE(mh_accept(0.0, std::log(0.5), 0.6));
  CHECK_THROWS_AS(mh_accept(-INFINITY, 0.0, 0.5), SamplerError);
}

TEST_CASE("alpha conditional by substitution") {
  MortalityDataset data({"p"}, 0, 1, 1, 3);
  data.set_cell(0, 0, 0, 3, 1.0, false);
  data.set_cell(0, 0, 1, 3, 1.0, false);
  data.set_cell(0, 0, 2, 4, 2.0, false);
  ModelState s = ModelState::zeros(1, 1, 3);
  Hyperparams h = Hyperparams::reference(1);
  h.pops[0].a_e = 1.0;
  h.pops[0].b_e = 1.0;
  SamplerConfig cfg;
  DriftDesign design(years_from(1, 3));
  SamplerContext ctx{data, h, design, cfg};
  auto g = alpha_conditional(s, ctx, 0, 0);
  CHECK(g.shape == doctest::Approx(10.0));
  CHECK(g.rate == doctest::Approx(5.0));

  // sum D = 1, c = 0 is not representable with positive exposures; a tiny
  // exposure gets within rounding of Gamma(1, 1)
  data.set_cell(0, 0, 0, 1, 1e-300, false);
  data.set_cell(0, 0, 1, 0, 1e-300, false);
  data.set_cell(0, 0, 2, 0, 1e-300, false);
  g = alpha_conditional(s, ctx, 0, 0);
  CHECK(g.shape == doctest::Approx(1.0));
  CHECK(g.rate == doctest::Approx(1.0));
}

TEST_CASE("variance conditionals by substitution") {
  Hyperparams h = Hyperparams::reference(1);
  ModelState s = ModelState::zeros(1, 100, 50);
  s.beta.setConstant(0.01);
  auto b = sigma2_beta_conditional(s, h);
  CHECK(b.shape == doctest::Approx(50.01));
  CHECK(b.scale == doctest::Approx(h.b_beta).epsilon(1e-12));

  DriftDesign design(years_from(1951, 50));
  Eigen::Vector2d phi(3.0, -0.02);
  Eigen::VectorXd kappa = design.mean(phi);
  auto k = sigma2_kappa_conditional(kappa, phi, 0.3, 0.001, 0.001, design);
  CHECK(k.shape == doctest::Approx(25.001));
  CHECK(k.scale == doctest::Approx(0.001).epsilon(1e-9));

  MortalityDataset data({"p"}, 0, 100, 1951, 50);
  PopulationPriors pp;
  auto nu = sigma2_nu_conditional(s, data, pp, 0);
  CHECK(nu.shape == doctest::Approx(2502.5));
  CHECK(nu.scale == doctest::Approx(2.5));

  Indicator w{1, 1};
  auto p = p_conditional(w, 1.0, 1.0);
  CHECK(p.a == 3.0);
  CHECK(p.b == 1.0);
}

TEST_CASE("rho conditional by substitution") {
  // d = (1, 1, 0): sum d_{t-1}^2 = 2, sum d_t d_{t-1} = 1
  DriftDesign design(years_from(1, 3));
  Eigen::VectorXd kappa(3);
  kappa << 1, 1, 0;
  auto r = rho_conditional(kappa, Eigen::Vector2d::Zero(), 1.0, 1.0, design);
  CHECK(r.mean == doctest::Approx(1.0 / 3));
  CHECK(r.var == doctest::Approx(1.0 / 3));

  // b = 0 gives a centred normal
  kappa << 1, 0, 1;
  r = rho_conditional(kappa, Eigen::Vector2d::Zero(), 1.0, 1.0, design);
  CHECK(r.mean == 0.0);

  // truncated draws against the truncated-normal moments
  auto want = oracle::truncated_normal_moments(1.0 / 3, 1.0 / 3, -1.0, 1.0);
  Rng rng(5);
  const int n = 100000;
  double sum = 0, sum2 = 0;
  for (int k = 0; k < n; ++k) {
    double v = rng.truncated_normal(1.0 / 3, std::sqrt(1.0 / 3), -1.0, 1.0);
    CHECK_MESSAGE((v > -1.0 && v < 1.0), "draw outside (-1, 1)");
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / n, var = sum2 / n - mean * mean;
  CHECK(std::abs(mean - want.mean) < 3.0 * std::sqrt(want.var / n));
  // var of the sample variance ~ 2 var^2 / n is close enough for a bound
  CHECK(std::abs(var - want.var) < 3.0 * want.var * std::sqrt(3.0 / n));
}

TEST_CASE("drift conditional") {
  DriftDesign design(years_from(1, 6));
  Eigen::Vector2d phi0(0.5, -0.1);
  Eigen::Matrix2d sigma0 = Eigen::Matrix2d::Identity() * 10.0;
  // kappa on phi0's trend, rho = 0
  auto c = phi_conditional(design.mean(phi0), 0.0, 0.8, phi0, sigma0, design);
  CHECK((c.mean - phi0).norm() < 1e-12);

  // tiny innovation variance: generalised least squares
  Eigen::VectorXd kappa(6);
  kappa << 0.3, -0.2, 0.9, 0.1, -0.4, 0.6;
  const double rho = 0.6;
  auto g = phi_conditional(kappa, rho, 1e-12, Eigen::Vector2d::Zero(), sigma0, design);
  Eigen::MatrixXd q = oracle::dense_q(rho, 6);
  const Eigen::MatrixX2d& w = design.matrix();
  Eigen::Vector2d gls = (w.transpose() * q * w).ldlt().solve(w.transpose() * q * kappa);
  CHECK((g.mean - gls).norm() < 1e-8);

  Rng rng(2);
  for (int k = 0; k < 20; ++k) {
    for (auto& v : kappa) v = rng.normal();
    auto p = phi_conditional(kappa, 0.9 * (2 * rng.uniform() - 1), 0.1 + rng.uniform(), phi0, sigma0, design);
    CHECK((p.cov - p.cov.transpose()).norm() < 1e-14);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(p.cov);
    CHECK(es.eigenvalues().minCoeff() > 0.0);
  }
}

TEST_CASE("spike ratio by substitution") {
  // rho = 0 so Q = I; intercept column of ones has W'QW = N = 3
  DriftDesign design(years_from(1, 3));
  Eigen::VectorXd kappa(3);
  kappa << 1, -2, 1;  // orthogonal to the ones column
  auto st = spike_terms(kappa, Eigen::Vector2d::Zero(), 0, 0.0, 1.0, 10.0, design);
  CHECK(st.projection == doctest::Approx(0.0).scale(1.0));
  CHECK(std::exp(st.log_ratio) == doctest::Approx(std::sqrt(31.0)).epsilon(1e-12));
  CHECK(inclusion_probability(0.5, st.log_ratio) == doctest::Approx(1.0 / (1.0 + std::sqrt(31.0))));
  CHECK(inclusion_probability(0.5, st.log_ratio) == doctest::Approx(0.15222).epsilon(1e-4));
  // overflowing ratio stays inside the clamp
  CHECK(inclusion_probability(0.5, 1e6) == 1e-15);
  CHECK(inclusion_probability(0.5, -1e6) == 1.0 - 1e-15);
}

TEST_CASE("oracle suites at unit scale") {
  for (const auto& r : oracle::conjugacy_suite(17, 10)) {
    INFO(r.name << " worst " << r.worst);
    CHECK(r.max_error < 1e-6);
  }
  CHECK(oracle::spike_ratio_suite(18, 20).max_error < 1e-6);
  CHECK(oracle::kernel_suite(19, 10).max_error < 1e-9);
}

TEST_CASE("oracle notices a wrong shape") {
  // Gamma(k + 1, r) against Gamma(k, r): the suite's error measure must see it
  oracle::Moments right{3.0 / 2.0, 3.0 / 4.0}, wrong{4.0 / 2.0, 4.0 / 4.0};
  CHECK(oracle::rel_mean_error(wrong, right) > 1e-2);
  // and the quadrature reproduces a known Gamma(3, 2) on the log scale
  auto m = oracle::quad_moments([](double a) { return 3.0 * a - 2.0 * std::exp(a); },
                                [](double a) { return std::exp(a); });
  CHECK(oracle::rel_mean_error(m, right) < 1e-10);
  CHECK(oracle::rel_var_error(m, right) < 1e-10);
}

TEST_CASE("overdispersion single cell against quadrature") {
  // one cell, D = 5, E = 100, rest of the predictor -3, sigma2_nu = 0.01
  MortalityDataset data({"p"}, 0, 1, 1, 3);
  for (std::size_t t = 0; t < 3; ++t) data.set_cell(0, 0, t, 5, 100.0, t != 0);
  ModelState s = ModelState::zeros(1, 1, 3);
  s.alpha(0, 0) = -3.0;
  s.sigma2_nu[0] = 0.01;
  Hyperparams h = Hyperparams::reference(1);
  // the update also redraws sigma2_nu; a near-degenerate prior pins it at 0.01
  h.pops[0].a_nu = 1e8 + 1;
  h.pops[0].b_nu = 1e6;
  SamplerConfig cfg;
  cfg.enforce_constraints = false;
  DriftDesign design(years_from(1, 3));
  SamplerContext ctx{data, h, design, cfg};
  MhTuner tuner(data, s, cfg);
  Rng rng(3);
  for (int k = 0; k < 2000; ++k) {
    update_overdispersion(s, ctx, tuner, rng);
    tuner.end_iteration();
  }
  tuner.freeze();
  // 10^6 stored draws, thinned by 10 so they are close to independent
  const int n = 1000000, thin = 10, batches = 100;
  double sum = 0.0;
  std::vector<double> batch(batches, 0.0);
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < thin; ++j) update_overdispersion(s, ctx, tuner, rng);
    sum += s.nu[0](0, 0);
    batch[static_cast<std::size_t>(k / (n / batches))] += s.nu[0](0, 0) / (n / batches);
  }
  auto q = oracle::quad_moments(
      [](double v) { return 5.0 * v - 100.0 * std::exp(-3.0 + v) - 0.5 * v * v / 0.01; }, [](double v) { return v; });
  double bv = 0.0;
  for (double b : batch) bv += (b - sum / n) * (b - sum / n);
  const double se = std::sqrt(bv / (batches - 1) / batches);
  INFO("chain mean " << sum / n << ", quadrature " << q.mean << ", batch-means se " << se);
  CHECK(std::abs(sum / n - q.mean) < 3.0 * se);
  CHECK(std::abs(sum / n - q.mean) < 1e-4);
}

TEST_CASE("renormalisation maps keep the predictor") {
  Rng rng(9);
  ModelState s = ModelState::zeros(2, 4, 5);
  for (auto* m : {&s.alpha, &s.beta_pop, &s.kappa_pop})
    for (Eigen::Index k = 0; k < m->size(); ++k) m->data()[k] = rng.normal();
  for (auto& v : s.beta) v = rng.normal();
  for (auto& v : s.kappa) v = rng.normal();
  for (auto& nu : s.nu)
    for (Eigen::Index k = 0; k < nu.size(); ++k) nu.data()[k] = rng.normal();
  const ModelState before = s;
  rescale_beta_common(s, 1.7);
  rescale_beta_pop(s, 1, -0.4);
  center_kappa_common(s, 0.3);
  center_kappa_pop(s, 0, -1.1);
  double worst = 0.0;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t t = 0; t < 5; ++t)
        worst = std::max(worst, std::abs(linear_predictor(s, i, x, t) - linear_predictor(before, i, x, t)));
  CHECK(worst < 1e-10);
}

TEST_CASE("chain bookkeeping and determinism") {
  SynthSpec spec;
  spec.n_ages = 4;
  spec.n_years = 6;
  spec.n_pops = 2;
  spec.seed = 3;
  Hyperparams h = Hyperparams::reference(2);
  spec.truth = lee_carter_scenario(2, 4, DriftDesign(years_from(1, 6)));
  auto sim = simulate_dataset(spec, h);

  SamplerConfig cfg;
  cfg.iterations = 100;
  cfg.burn_in = 50;
  cfg.thin = 5;
  cfg.seed = 21;
  auto a = run_chain(sim.data, h, cfg);
  CHECK(a.draws.size() == 10);
  CHECK(a.draw_iterations.front() == 55);
  CHECK(a.draw_iterations.back() == 100);
  CHECK(a.indicators.size() == 50);
  auto b = run_chain(sim.data, h, cfg);
  REQUIRE(b.draws.size() == a.draws.size());
  bool same = true;
  for (std::size_t k = 0; k < a.draws.size(); ++k) same = same && a.draws[k] == b.draws[k];
  CHECK(same);
  CHECK(a.indicators == b.indicators);
  CHECK(a.scale_trace == b.scale_trace);

  // thread count does not change multi-chain output
  auto c1 = run_chains(sim.data, h, cfg, 2, 1);
  auto c2 = run_chains(sim.data, h, cfg, 2, 2);
  CHECK(c1[1].draws.back() == c2[1].draws.back());
  CHECK_FALSE(c1[0].draws.back() == c1[1].draws.back());
}

TEST_CASE("synthetic recovery and tuned acceptance") {
  // (M, N, n) = (10, 20, 2)
  const std::size_t m = 10, nt = 20;
  DriftDesign design(years_from(1, nt));
  Hyperparams h = Hyperparams::reference(2);
  SynthSpec spec;
  spec.n_ages = m;
  spec.n_years = nt;
  spec.n_pops = 2;
  spec.exposure = 20000.0;
  spec.seed = 12;
  spec.truth = lee_carter_scenario(2, m, design);
  auto sim = simulate_dataset(spec, h);

  SamplerConfig cfg;
  cfg.iterations = 6000;
  cfg.burn_in = 3000;
  cfg.seed = 4;
  auto out = run_chain(sim.data, h, cfg);

  std::size_t good = 0, total = 0;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t x = 0; x < m; ++x) {
      std::vector<double> v;
      for (const auto& d : out.draws) v.push_back(d.alpha(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(x)));
      std::sort(v.begin(), v.end());
      const double med = v[v.size() / 2];
      double mean = 0, ss = 0;
      for (double a : v) mean += a;
      mean /= static_cast<double>(v.size());
      for (double a : v) ss += (a - mean) * (a - mean);
      const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
      ++total;
      if (std::abs(med - sim.truth.alpha(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(x))) < 3.0 * sd) ++good;
    }
  INFO("alpha recovered " << good << " / " << total);
  CHECK(static_cast<double>(good) >= 0.9 * static_cast<double>(total));

  for (const auto& [family, rate] : acceptance_report(out)) {
    INFO(family << " " << rate);
    CHECK(rate >= 0.15);
    CHECK(rate <= 0.45);
  }
}
