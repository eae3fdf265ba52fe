#pragma once

#include <cstdint>
#include <random>

namespace bplnlc {

// Seeded random source. Streams derived from the same seed with different
// stream ids are independent for practical purposes (distinct seed_seq input).
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t substream = 0);

  std::mt19937_64& engine() { return engine_; }

  // Uniform on [0, 1).
  double uniform();
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }
  // Gamma with shape/rate parameterisation.
  double gamma(double shape, double rate);
  // InvGamma(shape, scale): 1 / Gamma(shape, rate = scale).
  double inv_gamma(double shape, double scale);
  double beta(double a, double b);
  bool bernoulli(double p) { return uniform() < p; }
  std::int64_t poisson(double mean);
  // Normal(mean, sd^2) restricted to (lo, hi), by inverse CDF; rejection
  // fallback when the interval carries negligible mass.
  double truncated_normal(double mean, double sd, double lo, double hi);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> std_normal_{0.0, 1.0};
};

}  // namespace bplnlc
