#include "bplnlc/random.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <boost/math/distributions/normal.hpp>

namespace bplnlc {

Rng::Rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t substream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(substream),
                    static_cast<std::uint32_t>(substream >> 32), 0x9e3779b9u};
  engine_.seed(seq);
}

double Rng::uniform() { return std::generate_canonical<double, 53>(engine_); }

double Rng::normal() { return std_normal_(engine_); }

double Rng::gamma(double shape, double rate) {
  if (!(shape > 0.0) || !(rate > 0.0)) throw std::domain_error("gamma: shape and rate must be positive");
  std::gamma_distribution<double> g(shape, 1.0 / rate);
  return g(engine_);
}

double Rng::inv_gamma(double shape, double scale) { return 1.0 / gamma(shape, scale); }

double Rng::beta(double a, double b) {
  double x = gamma(a, 1.0);
  double y = gamma(b, 1.0);
  return x / (x + y);
}

std::int64_t Rng::poisson(double mean) {
  if (!(mean >= 0.0) || !std::isfinite(mean)) throw std::domain_error("poisson: invalid mean");
  if (mean == 0.0) return 0;
  std::poisson_distribution<std::int64_t> p(mean);
  return p(engine_);
}

double Rng::truncated_normal(double mean, double sd, double lo, double hi) {
  if (!(sd > 0.0) || !(lo < hi)) throw std::domain_error("truncated_normal: bad arguments");
  const boost::math::normal_distribution<double> z;
  double a = (lo - mean) / sd;
  double b = (hi - mean) / sd;
  // Reflect so that the interval is not entirely in the upper tail; the lower
  // tail CDF is accurate far below zero.
  bool flip = false;
  if (a > 0.0) {
    flip = true;
    double na = -b, nb = -a;
    a = na;
    b = nb;
  }
  const double pa = boost::math::cdf(z, a);
  const double pb = boost::math::cdf(z, b);
  const double mass = pb - pa;
  double std_draw = 0.0;
  if (mass > 1e-300 && std::isfinite(mass)) {
    double u = pa + uniform() * mass;
    if (u <= 0.0) u = std::nextafter(0.0, 1.0);
    if (u >= 1.0) u = std::nextafter(1.0, 0.0);
    std_draw = boost::math::quantile(z, u);
    std_draw = std::clamp(std_draw, a, b);
  } else {
    // Uniform proposal on [a, b]; the density is maximal at b (b < 0 here).
    const int cap = 1000000;
    int k = 0;
    for (; k < cap; ++k) {
      double x = a + (b - a) * uniform();
      if (std::log(uniform()) <= 0.5 * (b * b - x * x)) {
        std_draw = x;
        break;
      }
    }
    if (k == cap) throw std::runtime_error("truncated_normal: rejection sampler exhausted");
  }
  if (flip) std_draw = -std_draw;
  double v = mean + sd * std_draw;
  // Keep strictly inside the open interval.
  if (v <= lo) v = std::nextafter(lo, hi);
  if (v >= hi) v = std::nextafter(hi, lo);
  return v;
}

}  // namespace bplnlc
