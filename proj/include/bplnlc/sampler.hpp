#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bplnlc/data.hpp"
#include "bplnlc/model.hpp"
#include "bplnlc/random.hpp"

namespace bplnlc {

class SamplerError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ModelVariant {
  Full,    // overdispersion and spike-and-slab drift selection
  Model2,  // no overdispersion, population drifts pinned at zero
};

struct SamplerConfig {
  std::size_t iterations = 20000;
  std::size_t burn_in = 10000;
  std::size_t thin = 1;
  std::uint64_t seed = 1;
  std::uint64_t chain_index = 0;  // selects an independent RNG stream
  bool overdispersion = true;
  bool spike_selection = true;
  // Apply the sum / norm renormalisation maps after beta and kappa moves.
  bool enforce_constraints = true;
  bool adapt = true;
  std::size_t adapt_window = 50;
  double target_accept_lo = 0.20;
  double target_accept_hi = 0.40;
  // Test hook: added to the Gamma shape of the e_x draw.
  double alpha_shape_perturbation = 0.0;

  void set_variant(ModelVariant v);
  ModelVariant variant() const;
  void validate() const;
  std::size_t stored_draws() const { return (iterations - burn_in) / thin; }
};

// Block order of one sweep.
std::vector<std::string> sweep_order();

struct AcceptanceCounts {
  std::uint64_t accepted = 0;
  std::uint64_t attempted = 0;
  std::optional<double> rate() const {
    if (attempted == 0) return std::nullopt;
    return static_cast<double>(accepted) / static_cast<double>(attempted);
  }
};

// Per-coordinate random-walk scales for one family of MH targets.
struct ProposalFamily {
  std::vector<double> scale;
  std::vector<std::uint32_t> window_accepted;
  std::vector<std::uint32_t> window_attempted;
  AcceptanceCounts totals;

  void resize(std::size_t n, double initial);
  void record(std::size_t k, bool accepted);
};

// Random-walk scale adaptation towards the [lo, hi] acceptance band, run
// only while `adapting` is true.
class MhTuner {
 public:
  enum Family { BetaCommon, BetaPop, KappaCommon, KappaPop, Nu, AlphaFallback, kNumFamilies };
  static const char* family_name(Family f);

  MhTuner() = default;
  // Initial scales from the local curvature of the log target at `s`.
  MhTuner(const MortalityDataset& data, const ModelState& s, const SamplerConfig& cfg);

  ProposalFamily& family(Family f) { return families_[f]; }
  const ProposalFamily& family(Family f) const { return families_[f]; }

  bool adapting() const { return adapting_; }
  void freeze() { adapting_ = false; }
  void set_adapting(bool on) { adapting_ = on; }
  // Called once per sweep; rescales after every full window.
  void end_iteration();
  void reset_counts();
  double scale_checksum() const;

 private:
  std::array<ProposalFamily, kNumFamilies> families_;
  std::size_t window_ = 50;
  double lo_ = 0.2;
  double hi_ = 0.4;
  std::size_t iter_ = 0;
  bool adapting_ = true;
};

// Everything an update step reads besides the state.
struct SamplerContext {
  const MortalityDataset& data;
  const Hyperparams& hyper;
  const DriftDesign& design;
  const SamplerConfig& config;
};

// Accept iff u <= min(1, exp(proposal - current)).
bool mh_accept(double log_target_current, double log_target_proposal, double u);

// ---- closed-form full conditionals (exposed for oracle checks) ----

struct GammaParams {
  double shape;
  double rate;
};
struct InvGammaParams {
  double shape;
  double scale;
};
struct BetaParams {
  double a;
  double b;
};
struct NormalParams {
  double mean;
  double var;
};
struct Normal2Params {
  Eigen::Vector2d mean;
  Eigen::Matrix2d cov;
};

// e_x^(i) | . ~ Gamma(a + sum_t D - 1, b + c_x^(i)); shape may be <= 0.
GammaParams alpha_conditional(const ModelState& s, const SamplerContext& ctx, std::size_t i,
                              std::size_t x);
InvGammaParams sigma2_beta_conditional(const ModelState& s, const Hyperparams& h);
InvGammaParams sigma2_beta_pop_conditional(const ModelState& s, const Hyperparams& h, std::size_t i);
Normal2Params phi_conditional(const Eigen::VectorXd& kappa, double rho, double sigma2,
                              const Eigen::Vector2d& phi0, const Eigen::Matrix2d& sigma0,
                              const DriftDesign& design);
// Untruncated normal; the draw is restricted to (-1, 1).
NormalParams rho_conditional(const Eigen::VectorXd& kappa, const Eigen::Vector2d& phi, double sigma2,
                             double sigma2_rho, const DriftDesign& design);
InvGammaParams sigma2_kappa_conditional(const Eigen::VectorXd& kappa, const Eigen::Vector2d& phi,
                                        double rho, double a, double b, const DriftDesign& design);
// Population version. With spike selection on, each active slab component
// phi_l ~ N(0, c_l sigma2) adds 1/2 to the shape and phi_l^2 / (2 c_l) to the scale.
InvGammaParams sigma2_kappa_pop_conditional(const Eigen::VectorXd& kappa, const Eigen::Vector2d& phi,
                                            double rho, const Indicator& w, const PopulationPriors& pp,
                                            bool slab_terms, const DriftDesign& design);
BetaParams p_conditional(const Indicator& w, double a, double b);
InvGammaParams sigma2_nu_conditional(const ModelState& s, const MortalityDataset& data,
                                     const PopulationPriors& pp, std::size_t i);

// log f(kappa_t | kappa_{-t}) up to a constant: the AR(1) terms that involve
// kappa_t (first, interior and last year cases).
double kappa_prior_log_kernel(const Eigen::VectorXd& kappa, std::size_t t, double value,
                              const Eigen::Vector2d& phi, double rho, double sigma2,
                              const DriftDesign& design);

// Spike-and-slab quantities for component l (0 = intercept, 1 = slope).
struct SpikeTerms {
  double log_ratio;  // log R*_l = log m(w_l = 0) - log m(w_l = 1)
  double precision;  // W_l'QW_l + 1/c_l
  double projection; // W_l'Q z_l
};
SpikeTerms spike_terms(const Eigen::VectorXd& kappa, const Eigen::Vector2d& phi, int l, double rho,
                       double sigma2, double slab_scale, const DriftDesign& design);
// xi = p / (p + (1 - p) R*) evaluated in log space, clamped to [1e-15, 1 - 1e-15].
double inclusion_probability(double p, double log_ratio);
// Joint slab conditional when both components are active: N(a*, sigma2 A*).
Normal2Params slab_conditional(const Eigen::VectorXd& kappa, double rho, double sigma2,
                               const std::array<double, 2>& slab_scale, const DriftDesign& design);

// ---- update steps; each mutates the state in place ----

void update_alpha(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng);
void update_beta_common(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng);
void update_beta_pop(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng, std::size_t i);
void update_sigma2_beta(ModelState& s, const Hyperparams& h, Rng& rng);
void update_kappa_common(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng);
void update_phi_common(ModelState& s, const SamplerContext& ctx, Rng& rng);
void update_rho_common(ModelState& s, const SamplerContext& ctx, Rng& rng);
void update_rho_pop(ModelState& s, const SamplerContext& ctx, Rng& rng, std::size_t i);
void update_sigma2_kappa_common(ModelState& s, const SamplerContext& ctx, Rng& rng);
void update_sigma2_kappa_pop(ModelState& s, const SamplerContext& ctx, Rng& rng, std::size_t i);
void update_spike(ModelState& s, const SamplerContext& ctx, Rng& rng, std::size_t i);
void update_kappa_pop(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng, std::size_t i);
void update_overdispersion(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng);

// Renormalisation maps. Each leaves every linear predictor unchanged.
void rescale_beta_common(ModelState& s, double factor);            // beta /= f, kappa *= f
void rescale_beta_pop(ModelState& s, std::size_t i, double factor); // beta_pop /= f, kappa_pop *= f
void center_kappa_common(ModelState& s, double shift);             // kappa -= k, alpha += beta k
void center_kappa_pop(ModelState& s, std::size_t i, double shift);

// One full sweep in `sweep_order()`.
void sweep(ModelState& s, const SamplerContext& ctx, MhTuner& tuner, Rng& rng);

// Deterministic data-driven starting point.
ModelState initialize_state(const MortalityDataset& data, const Hyperparams& h);

struct ChainOutput {
  std::vector<ModelState> draws;
  std::vector<std::size_t> draw_iterations;  // 1-based sweep index of each stored draw
  // Inclusion indicators for every post-burn-in sweep, n_pops x 2 per sweep.
  std::vector<std::vector<Indicator>> indicators;
  std::map<std::string, AcceptanceCounts> acceptance;  // post-burn-in, by family name
  std::vector<double> scale_trace;  // proposal-scale checksum after each post-burn-in sweep
  std::uint64_t seed = 0;
  double seconds = 0.0;
};

using IterationCallback = std::function<void(std::size_t iteration, const ModelState&)>;

ChainOutput run_chain(const MortalityDataset& data, const Hyperparams& h, const SamplerConfig& cfg,
                      std::optional<ModelState> initial = std::nullopt,
                      const IterationCallback& on_sweep = {});

// Independent chains on streams (seed, k), k = 0..n_chains-1, run on up to
// `threads` worker threads. Results are identical for any thread count.
std::vector<ChainOutput> run_chains(const MortalityDataset& data, const Hyperparams& h,
                                    const SamplerConfig& cfg, std::size_t n_chains,
                                    std::size_t threads);

}  // namespace bplnlc
