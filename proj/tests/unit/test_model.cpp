#include <doctest.h>

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "bplnlc/model.hpp"
#include "oracles.hpp"

using namespace bplnlc;

TEST_CASE("linear predictor") {
  ModelState s = ModelState::zeros(1, 1, 1);
  CHECK(linear_predictor(s, 0, 0, 0) == 0.0);
  s.alpha(0, 0) = -4;
  s.beta[0] = 0.01;
  s.kappa[0] = 10;
  s.beta_pop(0, 0) = 0.1;
  s.kappa_pop(0, 0) = 1;
  CHECK(linear_predictor(s, 0, 0, 0) == doctest::Approx(-3.8).epsilon(1e-14));
  s.nu[0](0, 0) = 0.5;
  CHECK(linear_predictor(s, 0, 0, 0) == doctest::Approx(-3.3).epsilon(1e-14));
}

TEST_CASE("poisson loglik") {
  MortalityDataset d({"p"}, 0, 1, 2000, 1);
  ModelState s = ModelState::zeros(1, 1, 1);
  d.set_cell(0, 0, 0, 0, 2.0, false);
  CHECK(poisson_loglik(d, s) == doctest::Approx(-2.0).epsilon(1e-14));
  d.set_cell(0, 0, 0, 3, 2.0, false);
  const double want = -2.0 + 3.0 * std::log(2.0) - std::log(6.0);
  CHECK(poisson_loglik(d, s) == doctest::Approx(want).epsilon(1e-13));
  CHECK(want == doctest::Approx(-1.71231).epsilon(1e-5));
  CHECK(poisson_loglik(d, s, std::span<const CellIndex>{}) == 0.0);
  // kernel mode drops log D!
  CHECK(poisson_loglik(d, s, LoglikMode::Kernel) == doctest::Approx(want + std::log(6.0)));
}

TEST_CASE("ar1 precision") {
  auto q0 = build_precision(0.0, 4).dense();
  CHECK((q0 - Eigen::MatrixXd::Identity(4, 4)).norm() == 0.0);

  auto q = build_precision(0.5, 3).dense();
  Eigen::Matrix3d want;
  want << 1.25, -0.5, 0, -0.5, 1.25, -0.5, 0, -0.5, 1;
  CHECK((q - want).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((q - oracle::dense_q(0.5, 3)).cwiseAbs().maxCoeff() < 1e-15);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.99, 0.99);
  for (int k = 0; k < 20; ++k) {
    const double rho = u(rng);
    Eigen::MatrixXd m = build_precision(rho, 5).dense();
    CHECK((m - m.transpose()).norm() == 0.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    CHECK(es.eigenvalues().minCoeff() > 0.0);
    CHECK((m - oracle::dense_q(rho, 5)).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(build_precision(rho, 5).log_det() == doctest::Approx(0.0));
  }
  CHECK_THROWS_AS(build_precision(1.0, 4), DomainError);
  CHECK_THROWS_AS(build_precision(-1.2, 4), DomainError);
}

TEST_CASE("ar1 log density") {
  DriftDesign design({1.0, 2.0, 3.0, 4.0});
  Eigen::Vector2d phi(0.3, -0.2);
  const double s2 = 0.7;
  Eigen::VectorXd on_trend = design.mean(phi);
  CHECK(ar1_logdensity(on_trend, phi, 0.4, s2, design) ==
        doctest::Approx(-2.0 * std::log(2 * M_PI * s2)).epsilon(1e-14));

  // dense multivariate normal
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int k = 0; k < 10; ++k) {
    Eigen::VectorXd kappa(4);
    for (auto& v : kappa) v = 2 * u(rng);
    const double rho = 0.95 * u(rng), s = 0.1 + std::abs(u(rng));
    Eigen::MatrixXd cov = s * oracle::dense_q(rho, 4).inverse();
    Eigen::VectorXd d = kappa - design.mean(phi);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    const double logdet = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    const double want = -0.5 * (4 * std::log(2 * M_PI) + logdet + d.dot(llt.solve(d)));
    CHECK(std::abs(ar1_logdensity(kappa, phi, rho, s, design) - want) < 1e-10);
  }
  CHECK_THROWS_AS(ar1_logdensity(on_trend, phi, 0.4, 0.0, design), DomainError);
}

TEST_CASE("invariants") {
  ModelState s = ModelState::zeros(2, 3, 4);
  s.beta.setConstant(1.0 / 3);
  s.beta_pop.setConstant(1.0 / std::sqrt(3.0));
  CHECK(invariant_violations(s).empty());
  s.beta[0] += 1e-6;
  CHECK_FALSE(invariant_violations(s).empty());
  CHECK(invariant_violations(s, false).empty());
}
