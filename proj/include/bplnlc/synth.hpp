#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bplnlc/data.hpp"
#include "bplnlc/model.hpp"
#include "bplnlc/random.hpp"

namespace bplnlc {

class SynthError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SynthSpec {
  std::size_t n_ages = 10;
  std::size_t n_years = 20;
  std::size_t n_pops = 2;
  int first_age = 0;
  int first_year = 1;
  // Parameters to simulate from. Ignored when `prior_draw` is set.
  std::optional<ModelState> truth;
  bool prior_draw = false;
  // Redraw kappa, kappa_pop (AR(1) paths) and nu from their distributions
  // given the truth's drift / AR / variance parameters. When false the truth's
  // latent values are used as given.
  bool resample_latent = true;
  bool overdispersion = true;
  bool enforce_constraints = true;
  // Exposure per cell: either one constant or one value per age.
  double exposure = 1000.0;
  std::vector<double> exposure_by_age;
  std::uint64_t seed = 1;
  // Variance draws in prior-draw mode are capped at this value.
  double variance_cap = 1e4;
  std::size_t max_retries = 100;

  void validate() const;
};

struct SynthResult {
  MortalityDataset data;
  ModelState truth;
  std::size_t variance_caps_applied = 0;
  std::size_t retries = 0;
};

// Draws every parameter from its prior. The age intercept uses the same
// alpha-scale Gamma kernel as the sampler, i.e. exp(alpha) ~ Gamma(a_e - 1, b_e),
// which requires a_e > 1.
ModelState draw_from_prior(const Hyperparams& h, std::size_t n_pops, std::size_t n_ages,
                           const DriftDesign& design, bool overdispersion, Rng& rng,
                           double variance_cap = 1e4, std::size_t* caps_applied = nullptr);

// kappa ~ N(W phi, sigma2 Q^{-1}) drawn through the AR(1) recursion.
Eigen::VectorXd draw_ar1_path(const Eigen::Vector2d& phi, double rho, double sigma2,
                              const DriftDesign& design, Rng& rng);

// A plain Lee-Carter shaped truth: log rates rising linearly with age, flat
// age loadings, a common index falling by about one log unit over the window,
// AR coefficients 0.5 (common) and 0.3 (populations), overdispersion variance
// 0.01. Only the last population has a drift (both components on); the others
// have w = (0, 0). Latent paths are left at their drift means.
ModelState lee_carter_scenario(std::size_t n_pops, std::size_t n_ages, const DriftDesign& design);

// Applies the four identifiability renormalisations (each predictor-neutral).
void normalize_constraints(ModelState& s);

// D ~ Poisson(E exp(linear predictor)) on every cell of `layout`, which
// supplies labels and exposures. Missing cells stay missing.
MortalityDataset simulate_deaths(const ModelState& s, const MortalityDataset& layout, Rng& rng);

SynthResult simulate_dataset(const SynthSpec& spec, const Hyperparams& h);

}  // namespace bplnlc
