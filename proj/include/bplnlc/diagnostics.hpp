#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "bplnlc/draws_io.hpp"
#include "bplnlc/model.hpp"
#include "bplnlc/sampler.hpp"

namespace bplnlc {

class DiagnosticsError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Mean of the stored indicators, per population and component.
std::vector<std::array<double, 2>> inclusion_proportions(const std::vector<std::vector<Indicator>>& stream);
std::vector<std::array<double, 2>> inclusion_proportions(const ChainOutput& chain);

enum class DriftStructure { None, InterceptOnly, SlopeOnly, Full };
const char* drift_structure_name(DriftStructure d);
// Component l is kept iff its proportion exceeds the threshold.
DriftStructure reduce_model(const std::array<double, 2>& proportions, double threshold);

// accepted / attempted per family; families with no attempts are left out.
std::map<std::string, double> acceptance_report(const ChainOutput& chain);

struct TraceSummary {
  std::string name;
  double mean;
  double sd;
  double lag1;  // lag-1 autocorrelation; 0 when the trace is constant
};
TraceSummary summarize_trace(const std::string& name, const std::vector<double>& trace);
std::vector<TraceSummary> trace_summaries(const std::vector<ModelState>& draws, const StateLayout& layout);

// ---- getting-it-right ----

struct GirConfig {
  std::size_t n_ages = 3;
  std::size_t n_years = 5;
  std::size_t n_pops = 2;
  std::size_t sweeps = 20000;         // recorded successive-conditional sweeps
  std::size_t burn_in = 1000;         // tuned, unrecorded sweeps before that
  std::size_t prior_samples = 20000;  // marginal-conditional draws
  std::size_t batches = 50;           // batch means for the chain's standard errors
  double exposure = 10.0;
  std::uint64_t seed = 1;
  double alpha_shape_perturbation = 0.0;
  // Compare the marginal-conditional simulator with an independent copy of
  // itself instead of the sampler.
  bool self_compare = false;
  std::size_t threads = 1;
};

struct GirStatistic {
  std::string name;    // e.g. "alpha_mean[pop1]:m1"
  std::string family;  // e.g. "alpha"
  double mean_prior;
  double mean_chain;
  double se_prior;
  double se_chain;
  double z;
};

struct GirReport {
  std::vector<GirStatistic> stats;
  double fraction_below(double threshold) const;
  double max_abs_z() const;
  double max_abs_z(const std::string& family) const;
};

// Proper priors used by the harness, so every test function has finite moments.
Hyperparams gir_hyperparams(std::size_t n_pops);

// Scalar test functions g(theta) and their families.
struct GirFunction {
  std::string name;
  std::string family;
  bool binary;
};
std::vector<GirFunction> gir_functions(std::size_t n_pops);
std::vector<double> gir_evaluate(const ModelState& s);

GirReport getting_it_right(const Hyperparams& h, const GirConfig& cfg);

}  // namespace bplnlc
