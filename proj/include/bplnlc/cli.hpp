#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "bplnlc/data.hpp"
#include "bplnlc/diagnostics.hpp"
#include "bplnlc/forecast.hpp"
#include "bplnlc/model.hpp"
#include "bplnlc/sampler.hpp"
#include "bplnlc/synth.hpp"

namespace bplnlc::cli {

namespace fs = std::filesystem;
using Settings = boost::property_tree::ptree;

// Raised for anything wrong with the run configuration or the manifest chain.
class UsageError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kOutputDirEnv = "BPLNLC_OUTPUT_DIR";
inline constexpr const char* kVersion = "1.0.0";

// Built-in defaults: the reference analysis (ages 0-99, years 1951-2000,
// 20000 sweeps with 10000 burn-in).
Settings default_settings();
// INI file with sections, layered over the defaults.
Settings load_settings(const fs::path& path);
void merge_settings(Settings& base, const Settings& over);
// "section.key=value"
void apply_override(Settings& s, const std::string& assignment);

std::string get_string(const Settings& s, const std::string& key);
double get_double(const Settings& s, const std::string& key);
long long get_int(const Settings& s, const std::string& key);
bool get_bool(const Settings& s, const std::string& key);
std::vector<double> get_doubles(const Settings& s, const std::string& key);
std::vector<std::string> get_strings(const Settings& s, const std::string& key);
IntRange get_range(const Settings& s, const std::string& key);

// Data source: [data] format = csv | hmd.
MortalityDataset load_dataset(const Settings& s);
// Same source restricted to other years (held-out validation).
MortalityDataset load_dataset(const Settings& s, IntRange ages, IntRange years);

Hyperparams hyperparams_from(const Settings& s, const std::vector<std::string>& populations);
SamplerConfig sampler_from(const Settings& s);
ForecastConfig forecast_from(const Settings& s);
SynthSpec synth_from(const Settings& s);
GirConfig gir_from(const Settings& s);
ModelVariant variant_from(const Settings& s);

fs::path output_dir(const Settings& s);

// Settings as {section: {key: value}}.
nlohmann::json settings_json(const Settings& s);
// Hash over the sections that determine a fit's draws, plus the dataset.
std::string fit_hash(const Settings& s, const std::string& dataset_hash);
std::string dataset_hash(const MortalityDataset& data);

struct Manifest {
  nlohmann::json body;  // everything except the hash
  std::string hash;
};
Manifest read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const Manifest& m);

// One row per scalar parameter family member (nu cells left out).
struct SummaryRow {
  std::string block;
  std::string population;
  std::string index;
  Summary value;
};
std::vector<SummaryRow> posterior_summary(const std::vector<ModelState>& draws, const MortalityDataset& data,
                                          ModelVariant variant, double level);

// Subcommands. Each returns the process exit code and writes into `out_dir`.
int cmd_fit(const Settings& s, const fs::path& out_dir, std::ostream& log);
int cmd_forecast(const Settings& s, const fs::path& out_dir, const fs::path& draws_path, std::ostream& log);
int cmd_simulate(const Settings& s, const fs::path& out_dir, std::ostream& log);
int cmd_diagnose(const Settings& s, const fs::path& out_dir, std::ostream& log);

int run(int argc, char** argv);

}  // namespace bplnlc::cli
