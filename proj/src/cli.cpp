#include "bplnlc/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>

#include "bplnlc/csv.hpp"
#include "bplnlc/draws_io.hpp"

namespace bplnlc::cli {

namespace pt = boost::property_tree;

namespace {

// Keep in sync with configs/reference.ini (a test compares the two).
constexpr const char* kDefaults = R"ini(
[general]
output_dir =
threads = 1

[data]
format = hmd
dataset =
deaths = Deaths_1x1.txt
exposures = Exposures_1x1.txt
populations = Female,Male
ages = 0-99
years = 1951-2000

[model]
variant = full
a_x = 1
b_x = 1
a_beta = 0.01
b_beta = 0.01
a_beta_pop = 0.001
b_beta_pop = 0.001
a_mu = 2.5
b_mu = 2.5
a_p = 1
b_p = 1
a_kappa = 0.001
b_kappa = 0.001
a_kappa_pop = 0.001
b_kappa_pop = 0.001
sigma2_rho = 1
sigma2_rho_pop = 0.1
phi0 = 0,0
sigma0 = 10,0,0,10
slab_scale = 10,10
threshold = 0.5

[sampler]
iterations = 20000
burn_in = 10000
thin = 1
seed = 1
chains = 1
adapt = true
adapt_window = 50
accept_lo = 0.2
accept_hi = 0.4
constraints = true

[forecast]
horizon = 20
level = 0.95
overdispersion = resample
seed = 1
plot_ages = 15,55,70
validation_years =
validation_dataset =

[simulate]
mode = scenario
truth =
ages = 10
years = 20
populations = 2
first_age = 0
first_year = 1
exposure = 1000
overdispersion = true
seed = 1

[diagnose]
ages = 3
years = 5
populations = 2
sweeps = 20000
burn_in = 1000
prior_samples = 20000
batches = 50
exposure = 10
seed = 1
self_compare = false
mutate_alpha_shape = 0
)ini";

std::string trim(std::string v) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  v.erase(v.begin(), std::find_if(v.begin(), v.end(), not_space));
  v.erase(std::find_if(v.rbegin(), v.rend(), not_space).base(), v.end());
  return v;
}

std::string raw(const Settings& s, const std::string& key) {
  auto v = s.get_optional<std::string>(key);
  if (!v) throw UsageError("missing setting " + key);
  return trim(*v);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const char* want) {
  throw UsageError("setting " + key + " = '" + v + "' is not " + want);
}

double to_double(const std::string& key, std::string_view v) {
  double d;
  if (!parse_double(v, d)) bad_value(key, std::string(v), "a number");
  return d;
}

std::string pop_key(const Settings& s, const std::string& pop, const std::string& key) {
  const std::string own = "population:" + pop + "." + key;
  if (s.get_optional<std::string>(own)) return own;
  return "model." + key;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
  if (!f) throw std::runtime_error("write failed for " + p.string());
}

std::ifstream open_in(const fs::path& p, std::ios::openmode mode = std::ios::in) {
  std::ifstream f(p, mode);
  if (!f) throw UsageError("cannot open " + p.string());
  return f;
}

Settings settings_from_json(const nlohmann::json& j) {
  Settings s;
  for (auto& [section, body] : j.items()) {
    if (body.is_object()) {
      for (auto& [k, v] : body.items()) s.put(pt::ptree::path_type(section + "." + k, '.'), v.get<std::string>());
    } else {
      s.put(section, body.get<std::string>());
    }
  }
  return s;
}

std::string summary_cell(double v) { return std::isfinite(v) ? format_double(v) : std::string("NA"); }

std::string manifest_line(const std::string& hash) { return "# manifest: " + hash + "\n"; }

struct ColumnName {
  std::string block, population, index;
};

bool per_population_block(const std::string& b) {
  static const char* kPop[] = {"alpha", "beta_pop", "sigma2_beta_pop", "kappa_pop", "phi_pop", "rho_pop",
                               "sigma2_kappa_pop", "w", "p", "nu", "sigma2_nu"};
  return std::find(std::begin(kPop), std::end(kPop), b) != std::end(kPop);
}

ColumnName split_column(const std::string& name) {
  ColumnName c;
  auto lb = name.find('[');
  c.block = name.substr(0, lb);
  std::vector<std::string> parts;
  while (lb != std::string::npos) {
    auto rb = name.find(']', lb);
    parts.push_back(name.substr(lb + 1, rb - lb - 1));
    lb = name.find('[', rb);
  }
  std::size_t k = 0;
  if (per_population_block(c.block) && !parts.empty()) c.population = parts[k++];
  for (; k < parts.size(); ++k) c.index += (c.index.empty() ? "" : ":") + parts[k];
  return c;
}

StateLayout layout_for(const MortalityDataset& data, ModelVariant v) { return StateLayout::from_dataset(data, v); }

const char* variant_name(ModelVariant v) { return v == ModelVariant::Full ? "full" : "model2"; }

std::string format_summary_row(const std::string& a, const std::string& b, const std::string& c, const Summary& s) {
  return a + "," + b + "," + c + "," + summary_cell(s.median) + "," + summary_cell(s.lo) + "," + summary_cell(s.hi) +
         "\n";
}

}  // namespace

// ---------------------------------------------------------------------------
// settings

Settings default_settings() {
  std::istringstream in(kDefaults);
  Settings s;
  pt::read_ini(in, s);
  return s;
}

void merge_settings(Settings& base, const Settings& over) {
  for (const auto& [section, body] : over) {
    if (body.empty()) {
      base.put(pt::ptree::path_type(section, '\x1f'), body.data());
      continue;
    }
    for (const auto& [k, v] : body) base.put(pt::ptree::path_type(section + "." + k, '.'), v.data());
  }
}

Settings load_settings(const fs::path& path) {
  Settings s = default_settings();
  Settings file;
  try {
    pt::read_ini(path.string(), file);
  } catch (const pt::ini_parser_error& e) {
    throw UsageError("config " + path.string() + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  merge_settings(s, file);
  return s;
}

void apply_override(Settings& s, const std::string& assignment) {
  auto eq = assignment.find('=');
  auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw UsageError("override '" + assignment + "' is not of the form section.key=value");
  const std::string key = trim(assignment.substr(0, eq));
  s.put(pt::ptree::path_type(key, '.'), trim(assignment.substr(eq + 1)));
}

std::string get_string(const Settings& s, const std::string& key) { return raw(s, key); }

double get_double(const Settings& s, const std::string& key) { return to_double(key, raw(s, key)); }

long long get_int(const Settings& s, const std::string& key) {
  const std::string v = raw(s, key);
  long long n;
  if (!parse_int(v, n)) bad_value(key, v, "an integer");
  return n;
}

bool get_bool(const Settings& s, const std::string& key) {
  std::string v = raw(s, key);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

std::vector<std::string> get_strings(const Settings& s, const std::string& key) {
  std::vector<std::string> out;
  const std::string v = raw(s, key);
  if (v.empty()) return out;
  for (auto part : split(v, ',')) out.push_back(trim(std::string(part)));
  return out;
}

std::vector<double> get_doubles(const Settings& s, const std::string& key) {
  std::vector<double> out;
  for (const auto& part : get_strings(s, key)) out.push_back(to_double(key, part));
  return out;
}

IntRange get_range(const Settings& s, const std::string& key) {
  const std::string v = raw(s, key);
  auto dash = v.find('-', 1);
  long long lo, hi;
  if (dash == std::string::npos) {
    if (!parse_int(v, lo)) bad_value(key, v, "a range like 0-99");
    hi = lo;
  } else if (!parse_int(trim(v.substr(0, dash)), lo) || !parse_int(trim(v.substr(dash + 1)), hi)) {
    bad_value(key, v, "a range like 0-99");
  }
  if (hi < lo) bad_value(key, v, "an increasing range");
  return {static_cast<int>(lo), static_cast<int>(hi)};
}

fs::path output_dir(const Settings& s) {
  const std::string v = raw(s, "general.output_dir");
  if (!v.empty()) return v;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
  return "bplnlc_out";
}

ModelVariant variant_from(const Settings& s) {
  const std::string v = raw(s, "model.variant");
  if (v == "full") return ModelVariant::Full;
  if (v == "model2") return ModelVariant::Model2;
  bad_value("model.variant", v, "full or model2");
}

// ---------------------------------------------------------------------------
// data

namespace {

MortalityDataset load_csv_window(const fs::path& path, const Settings& s, std::optional<IntRange> ages,
                                 std::optional<IntRange> years) {
  auto f = open_in(path);
  MortalityDataset d = read_dataset_csv(f);
  const IntRange all_ages{d.first_age(), d.age_label(d.n_ages() - 1)};
  const IntRange all_years{d.first_year(), d.year_label(d.n_years() - 1)};
  const IntRange a = ages.value_or(all_ages), y = years.value_or(all_years);
  if (a.lo == all_ages.lo && a.hi == all_ages.hi && y.lo == all_years.lo && y.hi == all_years.hi) return d;
  (void)s;
  return window_dataset(d, a, y);
}

std::optional<IntRange> optional_range(const Settings& s, const std::string& key) {
  const std::string v = raw(s, key);
  if (v.empty() || v == "all") return std::nullopt;
  return get_range(s, key);
}

}  // namespace

MortalityDataset load_dataset(const Settings& s, IntRange ages, IntRange years) {
  const std::string format = raw(s, "data.format");
  if (format == "csv") {
    const std::string path = raw(s, "data.dataset");
    if (path.empty()) throw UsageError("data.format = csv needs data.dataset");
    return load_csv_window(path, s, ages, years);
  }
  if (format != "hmd") bad_value("data.format", format, "csv or hmd");
  const auto pops = get_strings(s, "data.populations");
  if (pops.empty()) throw UsageError("data.populations is empty");
  std::vector<PopulationTables> tables;
  for (const auto& label : pops) {
    auto file_for = [&](const std::string& kind) {
      auto own = s.get_optional<std::string>(pt::ptree::path_type("data." + kind + "_" + label, '.'));
      std::string p = own ? trim(*own) : raw(s, "data." + kind);
      if (p.empty()) throw UsageError("no " + kind + " file for population " + label);
      return p;
    };
    PopulationTables t;
    t.label = label;
    {
      auto f = open_in(file_for("deaths"));
      t.deaths = parse_hmd_table(f, label);
    }
    {
      auto f = open_in(file_for("exposures"));
      t.exposures = parse_hmd_table(f, label);
    }
    tables.push_back(std::move(t));
  }
  return assemble_dataset(tables, ages, years);
}

MortalityDataset load_dataset(const Settings& s) {
  const std::string format = raw(s, "data.format");
  if (format == "csv") {
    const std::string path = raw(s, "data.dataset");
    if (path.empty()) throw UsageError("data.format = csv needs data.dataset");
    return load_csv_window(path, s, optional_range(s, "data.ages"), optional_range(s, "data.years"));
  }
  return load_dataset(s, get_range(s, "data.ages"), get_range(s, "data.years"));
}

// ---------------------------------------------------------------------------
// typed configs

Hyperparams hyperparams_from(const Settings& s, const std::vector<std::string>& populations) {
  Hyperparams h = Hyperparams::reference(populations.size());
  h.a_beta = get_double(s, "model.a_beta");
  h.b_beta = get_double(s, "model.b_beta");
  auto phi0 = get_doubles(s, "model.phi0");
  if (phi0.size() != 2) throw UsageError("model.phi0 needs two values");
  h.phi0 = Eigen::Vector2d(phi0[0], phi0[1]);
  auto sig = get_doubles(s, "model.sigma0");
  if (sig.size() != 4) throw UsageError("model.sigma0 needs four values (row-major 2x2)");
  h.sigma0 << sig[0], sig[1], sig[2], sig[3];
  h.sigma2_rho = get_double(s, "model.sigma2_rho");
  h.a_kappa = get_double(s, "model.a_kappa");
  h.b_kappa = get_double(s, "model.b_kappa");
  h.a_p = get_double(s, "model.a_p");
  h.b_p = get_double(s, "model.b_p");
  h.inclusion_threshold = get_double(s, "model.threshold");
  for (std::size_t i = 0; i < populations.size(); ++i) {
    const auto& label = populations[i];
    auto& pp = h.pops[i];
    auto g = [&](const char* key) { return get_double(s, pop_key(s, label, key)); };
    pp.a_e = g("a_x");
    pp.b_e = g("b_x");
    pp.a_beta = g("a_beta_pop");
    pp.b_beta = g("b_beta_pop");
    pp.sigma2_rho = g("sigma2_rho_pop");
    pp.a_kappa = g("a_kappa_pop");
    pp.b_kappa = g("b_kappa_pop");
    pp.a_nu = g("a_mu");
    pp.b_nu = g("b_mu");
    auto c = get_doubles(s, pop_key(s, label, "slab_scale"));
    if (c.size() != 2) throw UsageError("slab_scale needs two values");
    pp.slab_scale = {c[0], c[1]};
  }
  try {
    h.validate();
  } catch (const std::exception& e) {
    throw UsageError(std::string("hyperparameters: ") + e.what());
  }
  return h;
}

SamplerConfig sampler_from(const Settings& s) {
  SamplerConfig c;
  auto nonneg = [&](const char* key) {
    long long v = get_int(s, key);
    if (v < 0) bad_value(key, raw(s, key), "non-negative");
    return static_cast<std::size_t>(v);
  };
  c.iterations = nonneg("sampler.iterations");
  c.burn_in = nonneg("sampler.burn_in");
  c.thin = nonneg("sampler.thin");
  c.seed = static_cast<std::uint64_t>(nonneg("sampler.seed"));
  c.adapt = get_bool(s, "sampler.adapt");
  c.adapt_window = nonneg("sampler.adapt_window");
  c.target_accept_lo = get_double(s, "sampler.accept_lo");
  c.target_accept_hi = get_double(s, "sampler.accept_hi");
  c.enforce_constraints = get_bool(s, "sampler.constraints");
  c.set_variant(variant_from(s));
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw UsageError(std::string("sampler: ") + e.what());
  }
  return c;
}

ForecastConfig forecast_from(const Settings& s) {
  ForecastConfig c;
  long long h = get_int(s, "forecast.horizon");
  if (h < 0) bad_value("forecast.horizon", raw(s, "forecast.horizon"), "non-negative");
  c.horizon = static_cast<std::size_t>(h);
  c.level = get_double(s, "forecast.level");
  if (!(c.level > 0.0 && c.level < 1.0)) bad_value("forecast.level", raw(s, "forecast.level"), "in (0, 1)");
  const std::string mode = raw(s, "forecast.overdispersion");
  if (mode == "resample") c.mode = OverdispersionMode::Resample;
  else if (mode == "zero") c.mode = OverdispersionMode::Zero;
  else bad_value("forecast.overdispersion", mode, "resample or zero");
  c.seed = static_cast<std::uint64_t>(get_int(s, "forecast.seed"));
  long long t = get_int(s, "general.threads");
  c.threads = static_cast<std::size_t>(std::max(1LL, t));
  return c;
}

SynthSpec synth_from(const Settings& s) {
  SynthSpec spec;
  auto positive = [&](const char* key) {
    long long v = get_int(s, key);
    if (v < 1) bad_value(key, raw(s, key), "positive");
    return static_cast<std::size_t>(v);
  };
  spec.n_ages = positive("simulate.ages");
  spec.n_years = positive("simulate.years");
  spec.n_pops = positive("simulate.populations");
  spec.first_age = static_cast<int>(get_int(s, "simulate.first_age"));
  spec.first_year = static_cast<int>(get_int(s, "simulate.first_year"));
  auto expo = get_doubles(s, "simulate.exposure");
  if (expo.size() == 1) spec.exposure = expo[0];
  else spec.exposure_by_age = expo;
  spec.overdispersion = get_bool(s, "simulate.overdispersion");
  spec.seed = static_cast<std::uint64_t>(get_int(s, "simulate.seed"));
  return spec;
}

GirConfig gir_from(const Settings& s) {
  GirConfig c;
  auto count = [&](const char* key) {
    long long v = get_int(s, key);
    if (v < 0) bad_value(key, raw(s, key), "non-negative");
    return static_cast<std::size_t>(v);
  };
  c.n_ages = count("diagnose.ages");
  c.n_years = count("diagnose.years");
  c.n_pops = count("diagnose.populations");
  c.sweeps = count("diagnose.sweeps");
  c.burn_in = count("diagnose.burn_in");
  c.prior_samples = count("diagnose.prior_samples");
  c.batches = count("diagnose.batches");
  c.exposure = get_double(s, "diagnose.exposure");
  c.seed = static_cast<std::uint64_t>(count("diagnose.seed"));
  c.self_compare = get_bool(s, "diagnose.self_compare");
  c.alpha_shape_perturbation = get_double(s, "diagnose.mutate_alpha_shape");
  c.threads = static_cast<std::size_t>(std::max(1LL, get_int(s, "general.threads")));
  return c;
}

// ---------------------------------------------------------------------------
// manifests

nlohmann::json settings_json(const Settings& s) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [section, body] : s) {
    if (body.empty()) {
      j[section] = body.data();
      continue;
    }
    nlohmann::json sec = nlohmann::json::object();
    for (const auto& [k, v] : body) sec[k] = trim(v.data());
    j[section] = sec;
  }
  return j;
}

std::string dataset_hash(const MortalityDataset& data) {
  std::ostringstream out;
  write_dataset_csv(out, data);
  return fnv1a_hex(out.str());
}

std::string fit_hash(const Settings& s, const std::string& dhash) {
  nlohmann::json j = settings_json(s);
  nlohmann::json key = nlohmann::json::object();
  for (auto& [section, body] : j.items()) {
    if (section == "model" || section == "sampler" || section.rfind("population:", 0) == 0) key[section] = body;
  }
  // the data block only matters through the dataset itself
  key["dataset"] = dhash;
  return fnv1a_hex(key.dump());
}

Manifest read_manifest(const fs::path& path) {
  auto f = open_in(path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!j.contains("hash") || !j["hash"].is_string()) throw UsageError("manifest " + path.string() + " has no hash");
  Manifest m;
  m.hash = j["hash"].get<std::string>();
  j.erase("hash");
  m.body = std::move(j);
  return m;
}

void write_manifest(const fs::path& path, const Manifest& m) {
  nlohmann::json j = m.body;
  j["hash"] = m.hash;
  write_text(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// posterior summary

std::vector<SummaryRow> posterior_summary(const std::vector<ModelState>& draws, const MortalityDataset& data,
                                          ModelVariant variant, double level) {
  if (draws.empty()) throw UsageError("no stored draws to summarise");
  const auto layout = layout_for(data, variant);
  const auto names = state_columns(layout);
  std::vector<std::vector<double>> cols(names.size());
  for (const auto& s : draws) {
    auto row = flatten_state(s, layout);
    for (std::size_t k = 0; k < row.size(); ++k) cols[k].push_back(row[k]);
  }
  std::vector<SummaryRow> out;
  for (std::size_t k = 0; k < names.size(); ++k) {
    ColumnName c = split_column(names[k]);
    if (c.block == "nu" || c.block == "w") continue;
    try {
      out.push_back({c.block, c.population, c.index, summarize(cols[k], level)});
    } catch (const ForecastError& e) {
      throw UsageError(std::string("summary: ") + e.what() + "; store more draws or lower the level");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// fit

int cmd_fit(const Settings& s, const fs::path& out_dir, std::ostream& log) {
  MortalityDataset data = load_dataset(s);
  data.validate();
  const Hyperparams h = hyperparams_from(s, data.populations());
  const SamplerConfig cfg = sampler_from(s);
  const ModelVariant variant = cfg.variant();
  const long long chains_ll = get_int(s, "sampler.chains");
  if (chains_ll < 1) bad_value("sampler.chains", raw(s, "sampler.chains"), "positive");
  const auto chains = static_cast<std::size_t>(chains_ll);
  const auto threads = static_cast<std::size_t>(std::max(1LL, get_int(s, "general.threads")));
  const double level = get_double(s, "forecast.level");

  fs::create_directories(out_dir);
  std::ostringstream dcsv;
  write_dataset_csv(dcsv, data);
  write_text(out_dir / "dataset.csv", dcsv.str());
  const std::string dhash = fnv1a_hex(dcsv.str());
  const std::string hash = fit_hash(s, dhash);

  log << "fit: " << data.n_pops() << " populations, " << data.n_ages() << " ages, " << data.n_years()
      << " years; " << chains << " chain(s) of " << cfg.iterations << " sweeps (" << cfg.burn_in
      << " burn-in), variant " << variant_name(variant) << "\n";
  auto outs = run_chains(data, h, cfg, chains, threads);

  std::vector<ModelState> draws;
  std::vector<std::size_t> iters;
  std::vector<std::vector<Indicator>> indicators;
  for (std::size_t k = 0; k < outs.size(); ++k) {
    for (std::size_t j = 0; j < outs[k].draws.size(); ++j) {
      draws.push_back(outs[k].draws[j]);
      iters.push_back(k * cfg.iterations + outs[k].draw_iterations[j]);
    }
    indicators.insert(indicators.end(), outs[k].indicators.begin(), outs[k].indicators.end());
  }
  const auto layout = layout_for(data, variant);

  {
    std::ofstream f(out_dir / "draws.csv", std::ios::binary);
    write_draws_csv(f, hash, layout, draws, iters);
    if (!f) throw std::runtime_error("cannot write draws.csv");
  }
  {
    std::ofstream f(out_dir / "draws.bin", std::ios::binary);
    write_draws_bin(f, make_draws_table(hash, layout, draws, iters));
    if (!f) throw std::runtime_error("cannot write draws.bin");
  }

  std::string summary = manifest_line(hash) + "block,population,index,median,hpd_lo,hpd_hi\n";
  for (const auto& r : posterior_summary(draws, data, variant, level))
    summary += format_summary_row(r.block, r.population, r.index, r.value);
  write_text(out_dir / "summary.csv", summary);

  // diagnostics
  std::ostringstream txt, csv;
  csv << manifest_line(hash) << "metric,population,component,value\n";
  txt << "manifest " << hash << "\n";
  txt << "stored draws " << draws.size() << " from " << chains << " chain(s)\n";
  for (std::size_t k = 0; k < outs.size(); ++k) {
    txt << "chain " << k + 1 << ": " << format_double(outs[k].seconds) << " s\n";
    for (const auto& [fam, rate] : acceptance_report(outs[k])) {
      txt << "  acceptance " << fam << " " << format_double(rate) << "\n";
      csv << "acceptance_chain" << k + 1 << ",," << fam << "," << format_double(rate) << "\n";
    }
  }
  if (cfg.spike_selection && !indicators.empty()) {
    auto props = inclusion_proportions(indicators);
    for (std::size_t i = 0; i < props.size(); ++i) {
      const auto& label = data.populations()[i];
      const auto reduced = reduce_model(props[i], h.inclusion_threshold);
      txt << "population " << label << ": inclusion w1 " << format_double(props[i][0]) << ", w2 "
          << format_double(props[i][1]) << " -> " << drift_structure_name(reduced) << "\n";
      csv << "inclusion," << label << ",w1," << format_double(props[i][0]) << "\n";
      csv << "inclusion," << label << ",w2," << format_double(props[i][1]) << "\n";
      csv << "reduced_model," << label << ",," << drift_structure_name(reduced) << "\n";
    }
  }
  write_text(out_dir / "diagnostics.txt", txt.str());
  write_text(out_dir / "diagnostics.csv", csv.str());

  std::string traces = manifest_line(hash) + "parameter,mean,sd,lag1\n";
  for (const auto& t : trace_summaries(draws, layout)) {
    if (t.name.rfind("nu[", 0) == 0) continue;
    traces += t.name + "," + summary_cell(t.mean) + "," + summary_cell(t.sd) + "," + summary_cell(t.lag1) + "\n";
  }
  write_text(out_dir / "trace_summary.csv", traces);

  Manifest m;
  m.hash = hash;
  m.body = {{"tool", "bplnlc"},
            {"version", kVersion},
            {"subcommand", "fit"},
            {"seed", cfg.seed},
            {"chains", chains},
            {"variant", variant_name(variant)},
            {"dataset_file", "dataset.csv"},
            {"dataset_hash", dhash},
            {"draws", {{"csv", "draws.csv"}, {"bin", "draws.bin"}, {"count", draws.size()}}},
            {"config", settings_json(s)}};
  write_manifest(out_dir / "manifest.json", m);
  log << txt.str();
  log << "wrote " << out_dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// forecast

namespace {

struct FitRun {
  Manifest manifest;
  MortalityDataset data;
  ModelVariant variant;
  std::vector<ModelState> draws;
  Settings settings;
};

FitRun load_fit(const fs::path& draws_path, std::ostream& log) {
  const fs::path dir = draws_path.parent_path().empty() ? fs::path(".") : draws_path.parent_path();
  FitRun r;
  r.manifest = read_manifest(dir / "manifest.json");
  const auto& body = r.manifest.body;
  if (body.value("subcommand", "") != "fit") throw UsageError("manifest in " + dir.string() + " is not from fit");
  r.settings = settings_from_json(body.at("config"));
  const std::string dhash = body.at("dataset_hash").get<std::string>();
  if (fit_hash(r.settings, dhash) != r.manifest.hash)
    throw UsageError("manifest hash does not match its recorded configuration; refusing to forecast");
  {
    auto f = open_in(dir / body.at("dataset_file").get<std::string>(), std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    if (fnv1a_hex(ss.str()) != dhash) throw UsageError("training dataset does not match the manifest");
    r.data = read_dataset_csv(ss);
  }
  r.variant = variant_from(r.settings);
  if (body.value("variant", "") != variant_name(r.variant) ||
      body.value("seed", std::uint64_t{0}) != static_cast<std::uint64_t>(get_int(r.settings, "sampler.seed")) ||
      body.value("chains", 0LL) != get_int(r.settings, "sampler.chains"))
    throw UsageError("manifest fields disagree with its recorded configuration; refusing to forecast");
  const auto layout = layout_for(r.data, r.variant);

  DrawsTable table;
  bool have = false;
  fs::path bin = draws_path;
  bin.replace_extension(".bin");
  if (draws_path.extension() == ".csv" && fs::exists(bin)) {
    try {
      auto f = open_in(bin, std::ios::binary);
      table = read_draws_bin(f);
      have = table.manifest_hash == r.manifest.hash;
      if (have) log << "forecast: using binary cache " << bin.string() << "\n";
    } catch (const DrawsFormatError&) {
      have = false;
    }
  }
  if (!have) {
    auto f = open_in(draws_path, draws_path.extension() == ".bin" ? std::ios::binary : std::ios::in);
    table = draws_path.extension() == ".bin" ? read_draws_bin(f) : read_draws_csv(f);
  }
  if (table.manifest_hash != r.manifest.hash)
    throw UsageError("draws file manifest " + table.manifest_hash + " does not match " + r.manifest.hash);
  r.draws = states_from_table(table, layout);
  return r;
}

double log_rate(std::int64_t d, double e) {
  if (d <= 0 || !(e > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return std::log(static_cast<double>(d) / e);
}

}  // namespace

int cmd_forecast(const Settings& s, const fs::path& out_dir, const fs::path& draws_path, std::ostream& log) {
  FitRun fit = load_fit(draws_path, log);
  const std::string& hash = fit.manifest.hash;
  const ForecastConfig cfg = forecast_from(s);
  const auto& data = fit.data;
  const std::size_t M = data.n_ages(), N = data.n_years();

  log << "forecast: " << fit.draws.size() << " draws, horizon " << cfg.horizon << "\n";
  const ForecastResult res = run_forecast(data, fit.draws, cfg);
  fs::create_directories(out_dir);

  // held-out data for the overlay
  std::optional<MortalityDataset> held;
  if (auto vy = optional_range(s, "forecast.validation_years")) {
    const int last = data.year_label(N - 1);
    if (vy->lo <= last || vy->hi > last + static_cast<int>(cfg.horizon))
      throw UsageError("validation years must lie inside the forecast horizon");
    const IntRange ages{data.first_age(), data.age_label(M - 1)};
    const std::string vpath = raw(s, "forecast.validation_dataset");
    if (!vpath.empty()) {
      held = load_csv_window(vpath, s, ages, *vy);
    } else {
      // same source as the fit, other years
      held = load_dataset(fit.settings, ages, *vy);
    }
    if (held->populations() != data.populations()) throw UsageError("held-out populations differ from the fit");
  }

  {
    std::string fixed = manifest_line(hash) + "block,population,year,future,median,hpd_lo,hpd_hi\n";
    auto row = [&](const std::string& block, const std::string& pop, std::size_t t, const Summary& v) {
      fixed += block + "," + pop + "," + std::to_string(res.years[t]) + "," + (t >= N ? "1" : "0") + "," +
               summary_cell(v.median) + "," + summary_cell(v.lo) + "," + summary_cell(v.hi) + "\n";
    };
    for (std::size_t t = 0; t < res.years.size(); ++t) row("kappa", "", t, res.kappa_summary[t]);
    for (std::size_t i = 0; i < data.n_pops(); ++i)
      for (std::size_t t = 0; t < res.years.size(); ++t)
        row("kappa_pop", data.populations()[i], t, res.kappa_pop_summary[i][t]);
    write_text(out_dir / "forecast_kappa.csv", fixed);
  }

  auto observed = [&](std::size_t i, std::size_t x, std::size_t t, std::int64_t& d, double& lr) {
    if (t < N && !data.missing(i, x, t)) {
      d = data.deaths(i, x, t);
      lr = log_rate(d, data.exposure(i, x, t));
      return true;
    }
    if (held && t >= N) {
      const int year = res.years[t];
      if (year >= held->first_year() && year <= held->year_label(held->n_years() - 1)) {
        const auto ht = static_cast<std::size_t>(year - held->first_year());
        if (!held->missing(i, x, ht)) {
          d = held->deaths(i, x, ht);
          lr = log_rate(d, held->exposure(i, x, ht));
          return true;
        }
      }
    }
    return false;
  };

  const std::string cell_header =
      "population,age,year,future,log_mu_median,log_mu_lo,log_mu_hi,deaths_median,deaths_lo,deaths_hi,"
      "observed_deaths,observed_log_rate\n";
  std::string cells = manifest_line(hash) + cell_header;
  for (const auto& c : res.cells) {
    std::int64_t d = 0;
    double lr = std::numeric_limits<double>::quiet_NaN();
    const bool has = observed(c.pop, c.age, c.year, d, lr);
    cells += data.populations()[c.pop] + "," + std::to_string(data.age_label(c.age)) + "," +
             std::to_string(res.years[c.year]) + "," + (c.future ? "1" : "0") + "," + summary_cell(c.log_mu.median) +
             "," + summary_cell(c.log_mu.lo) + "," + summary_cell(c.log_mu.hi) + "," +
             summary_cell(c.deaths.median) + "," + summary_cell(c.deaths.lo) + "," + summary_cell(c.deaths.hi) + "," +
             (has ? std::to_string(d) : std::string("NA")) + "," + (has ? summary_cell(lr) : std::string("NA")) + "\n";
  }
  write_text(out_dir / "forecast_cells.csv", cells);

  // per-age series for plotting
  std::vector<int> plot_ages;
  for (double a : get_doubles(s, "forecast.plot_ages")) plot_ages.push_back(static_cast<int>(a));
  for (int age : plot_ages) {
    if (age < data.first_age() || age > data.age_label(M - 1)) {
      log << "forecast: plot age " << age << " is outside the fitted ages, skipped\n";
      continue;
    }
    const auto x = static_cast<std::size_t>(age - data.first_age());
    for (std::size_t i = 0; i < data.n_pops(); ++i) {
      std::string out = manifest_line(hash) +
                        "year,future,observed_log_rate,log_mu_median,log_mu_lo,log_mu_hi,deaths_median,deaths_lo,"
                        "deaths_hi,covered\n";
      for (std::size_t t = 0; t < res.years.size(); ++t) {
        const auto& c = res.cell(i, x, t);
        std::int64_t d = 0;
        double lr = std::numeric_limits<double>::quiet_NaN();
        const bool has = observed(i, x, t, d, lr) && std::isfinite(lr);
        std::string covered = "NA";
        if (has) covered = (lr >= c.log_mu.lo && lr <= c.log_mu.hi) ? "1" : "0";
        out += std::to_string(res.years[t]) + "," + (c.future ? "1" : "0") + "," +
               (has ? summary_cell(lr) : std::string("NA")) + "," + summary_cell(c.log_mu.median) + "," +
               summary_cell(c.log_mu.lo) + "," + summary_cell(c.log_mu.hi) + "," + summary_cell(c.deaths.median) +
               "," + summary_cell(c.deaths.lo) + "," + summary_cell(c.deaths.hi) + "," + covered + "\n";
      }
      write_text(out_dir / ("forecast_age_" + data.populations()[i] + "_" + std::to_string(age) + ".csv"), out);
    }
  }

  if (held) {
    std::string overlay = manifest_line(hash) + "population,age,year,observed_log_rate,log_mu_lo,log_mu_hi,covered\n";
    std::string cov = manifest_line(hash) + "population,age,cells,covered,coverage\n";
    std::size_t all_n = 0, all_c = 0;
    for (std::size_t i = 0; i < data.n_pops(); ++i) {
      for (std::size_t x = 0; x < M; ++x) {
        std::size_t n = 0, k = 0;
        for (std::size_t t = N; t < res.years.size(); ++t) {
          std::int64_t d = 0;
          double lr = std::numeric_limits<double>::quiet_NaN();
          if (!observed(i, x, t, d, lr) || !std::isfinite(lr)) continue;
          const auto& c = res.cell(i, x, t);
          const bool in = lr >= c.log_mu.lo && lr <= c.log_mu.hi;
          ++n;
          k += in ? 1 : 0;
          overlay += data.populations()[i] + "," + std::to_string(data.age_label(x)) + "," +
                     std::to_string(res.years[t]) + "," + summary_cell(lr) + "," + summary_cell(c.log_mu.lo) + "," +
                     summary_cell(c.log_mu.hi) + "," + (in ? "1" : "0") + "\n";
        }
        if (n == 0) continue;
        all_n += n;
        all_c += k;
        cov += data.populations()[i] + "," + std::to_string(data.age_label(x)) + "," + std::to_string(n) + "," +
               std::to_string(k) + "," + format_double(static_cast<double>(k) / static_cast<double>(n)) + "\n";
      }
    }
    if (all_n > 0) {
      cov += "all,all," + std::to_string(all_n) + "," + std::to_string(all_c) + "," +
             format_double(static_cast<double>(all_c) / static_cast<double>(all_n)) + "\n";
      log << "forecast: held-out coverage " << all_c << "/" << all_n << "\n";
    }
    write_text(out_dir / "forecast_validation.csv", overlay);
    write_text(out_dir / "forecast_coverage.csv", cov);
  }

  Manifest m;
  m.hash = hash;
  m.body = {{"tool", "bplnlc"},
            {"version", kVersion},
            {"subcommand", "forecast"},
            {"fit_manifest", (draws_path.parent_path() / "manifest.json").string()},
            {"draws", fit.draws.size()},
            {"config", settings_json(s)}};
  write_manifest(out_dir / "forecast_manifest.json", m);
  log << "wrote " << out_dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// simulate

int cmd_simulate(const Settings& s, const fs::path& out_dir, std::ostream& log) {
  SynthSpec spec = synth_from(s);
  const std::string mode = raw(s, "simulate.mode");
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < spec.n_pops; ++i) labels.push_back("pop" + std::to_string(i + 1));
  Hyperparams h = hyperparams_from(s, labels);

  std::vector<double> years;
  for (std::size_t t = 0; t < spec.n_years; ++t) years.push_back(spec.first_year + static_cast<double>(t));
  const DriftDesign design(years);
  if (mode == "prior") {
    spec.prior_draw = true;
  } else if (mode == "scenario") {
    spec.truth = lee_carter_scenario(spec.n_pops, spec.n_ages, design);
  } else if (mode == "truth") {
    const std::string path = raw(s, "simulate.truth");
    if (path.empty()) throw UsageError("simulate.mode = truth needs simulate.truth");
    auto f = open_in(path);
    nlohmann::json j;
    f >> j;
    spec.truth = state_from_json(j.contains("state") ? j["state"] : j);
    spec.resample_latent = false;
  } else {
    bad_value("simulate.mode", mode, "scenario, prior or truth");
  }
  SynthResult res;
  try {
    res = simulate_dataset(spec, h);
  } catch (const std::exception& e) {
    if (!spec.prior_draw) throw;
    throw UsageError(std::string(e.what()) +
                     "; the reference priors are too vague to draw from, use proper ones (see configs/prior_sim.ini)");
  }

  fs::create_directories(out_dir);
  std::ostringstream dcsv;
  write_dataset_csv(dcsv, res.data);
  write_text(out_dir / "dataset.csv", dcsv.str());

  nlohmann::json sim = settings_json(s)["simulate"];
  nlohmann::json key = {{"simulate", sim}, {"model", settings_json(s)["model"]}, {"dataset", fnv1a_hex(dcsv.str())}};
  const std::string hash = fnv1a_hex(key.dump());

  const auto layout = StateLayout::from_dataset(res.data, ModelVariant::Full);
  nlohmann::json truth = {{"manifest", hash},
                          {"mode", mode},
                          {"seed", spec.seed},
                          {"variance_cap", spec.variance_cap},
                          {"variance_caps_applied", res.variance_caps_applied},
                          {"retries", res.retries},
                          {"state", state_to_json(res.truth, layout)}};
  write_text(out_dir / "truth.json", truth.dump(2) + "\n");

  Manifest m;
  m.hash = hash;
  m.body = {{"tool", "bplnlc"},
            {"version", kVersion},
            {"subcommand", "simulate"},
            {"dataset_file", "dataset.csv"},
            {"dataset_hash", fnv1a_hex(dcsv.str())},
            {"config", settings_json(s)}};
  write_manifest(out_dir / "manifest.json", m);
  log << "simulate: " << spec.n_pops << " x " << spec.n_ages << " x " << spec.n_years << " (" << mode
      << "), " << res.retries << " retries, " << res.variance_caps_applied << " capped variances\n";
  log << "wrote " << out_dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// diagnose

int cmd_diagnose(const Settings& s, const fs::path& out_dir, std::ostream& log) {
  const GirConfig cfg = gir_from(s);
  if (cfg.n_ages > 5 || cfg.n_years > 8)
    throw UsageError("getting-it-right is only practical on tiny grids: set diagnose.ages <= 5 and "
                     "diagnose.years <= 8 (the default is 3 x 5)");
  const Hyperparams h = gir_hyperparams(cfg.n_pops);
  log << "diagnose: " << cfg.n_pops << " x " << cfg.n_ages << " x " << cfg.n_years << ", " << cfg.sweeps
      << " sweeps" << (cfg.self_compare ? " (self comparison)" : "") << "\n";
  const GirReport rep = getting_it_right(h, cfg);

  nlohmann::json key = {{"diagnose", settings_json(s)["diagnose"]}};
  const std::string hash = fnv1a_hex(key.dump());
  fs::create_directories(out_dir);

  std::string csv = manifest_line(hash) + "statistic,family,mean_prior,mean_chain,se_prior,se_chain,z\n";
  for (const auto& st : rep.stats)
    csv += st.name + "," + st.family + "," + summary_cell(st.mean_prior) + "," + summary_cell(st.mean_chain) + "," +
           summary_cell(st.se_prior) + "," + summary_cell(st.se_chain) + "," + summary_cell(st.z) + "\n";
  write_text(out_dir / "gir.csv", csv);

  std::ostringstream txt;
  const double below4 = rep.fraction_below(4.0);
  txt << "manifest " << hash << "\n";
  txt << "statistics " << rep.stats.size() << "\n";
  txt << "fraction |z| < 2: " << format_double(rep.fraction_below(2.0)) << "\n";
  txt << "fraction |z| < 4: " << format_double(below4) << "\n";
  std::vector<std::string> families;
  for (const auto& st : rep.stats)
    if (std::find(families.begin(), families.end(), st.family) == families.end()) families.push_back(st.family);
  for (const auto& f : families) txt << "max |z| " << f << ": " << format_double(rep.max_abs_z(f)) << "\n";
  txt << (below4 >= 0.95 ? "calibrated" : "NOT calibrated") << "\n";
  write_text(out_dir / "gir.txt", txt.str());

  Manifest m;
  m.hash = hash;
  m.body = {{"tool", "bplnlc"}, {"version", kVersion}, {"subcommand", "diagnose"}, {"config", settings_json(s)}};
  write_manifest(out_dir / "manifest.json", m);
  log << txt.str();
  return 0;
}

// ---------------------------------------------------------------------------
// entry point

int run(int argc, char** argv) {
  CLI::App app{"Bayesian Poisson log-normal Lee-Carter model with drift selection"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  struct Common {
    std::string config;
    std::string output;
    std::vector<std::string> sets;
    std::optional<long long> threads;
    std::optional<long long> seed;
  };
  Common common;
  std::optional<long long> chains, iterations, burn_in, thin, horizon;
  std::optional<double> level, mutate;
  std::optional<std::string> variant, validation_years;
  std::string draws;
  bool self_compare = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config, "INI configuration file")->check(CLI::ExistingFile);
    sub->add_option("-o,--output", common.output, "output directory (default: $BPLNLC_OUTPUT_DIR or bplnlc_out)");
    sub->add_option("--set", common.sets, "override a setting, e.g. --set sampler.thin=10")->take_all();
    sub->add_option("--threads", common.threads, "worker threads");
    sub->add_option("--seed", common.seed, "random seed for this subcommand");
  };

  auto* fit = app.add_subcommand("fit", "run the sampler and write draws, summary and diagnostics");
  add_common(fit);
  fit->add_option("--chains", chains, "independent chains");
  fit->add_option("--variant", variant, "full or model2")->check(CLI::IsMember({"full", "model2"}));
  fit->add_option("--iterations", iterations, "total sweeps");
  fit->add_option("--burn-in", burn_in, "discarded sweeps");
  fit->add_option("--thin", thin, "stride between stored draws");
  fit->add_option("--level", level, "HPD level for summary.csv");

  auto* fc = app.add_subcommand("forecast", "posterior predictive projection from stored draws");
  add_common(fc);
  fc->add_option("--draws", draws, "draws.csv written by fit (default: <output>/draws.csv)");
  fc->add_option("--horizon", horizon, "years beyond the training window");
  fc->add_option("--level", level, "HPD level");
  fc->add_option("--validation-years", validation_years, "held-out years, e.g. 2001-2016");

  auto* sim = app.add_subcommand("simulate", "simulate a dataset and its true parameters");
  add_common(sim);

  auto* diag = app.add_subcommand("diagnose", "getting-it-right check of the sampler");
  add_common(diag);
  diag->add_flag("--self-compare", self_compare, "compare the prior simulator with itself");
  diag->add_option("--mutate-alpha-shape", mutate, "deliberately perturb the alpha update (test hook)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    Settings s = common.config.empty() ? default_settings() : load_settings(common.config);
    for (const auto& a : common.sets) apply_override(s, a);
    const std::string name = app.get_subcommands().front()->get_name();
    auto put = [&](const std::string& key, const std::string& v) { s.put(pt::ptree::path_type(key, '.'), v); };
    if (!common.output.empty()) put("general.output_dir", common.output);
    if (common.threads) put("general.threads", std::to_string(*common.threads));
    if (common.seed) {
      const char* section = name == "fit" ? "sampler" : name.c_str();
      put(std::string(section) + ".seed", std::to_string(*common.seed));
    }
    if (chains) put("sampler.chains", std::to_string(*chains));
    if (variant) put("model.variant", *variant);
    if (iterations) put("sampler.iterations", std::to_string(*iterations));
    if (burn_in) put("sampler.burn_in", std::to_string(*burn_in));
    if (thin) put("sampler.thin", std::to_string(*thin));
    if (horizon) put("forecast.horizon", std::to_string(*horizon));
    if (level) put("forecast.level", format_double(*level));
    if (validation_years) put("forecast.validation_years", *validation_years);
    if (self_compare) put("diagnose.self_compare", "true");
    if (mutate) put("diagnose.mutate_alpha_shape", format_double(*mutate));

    const fs::path out = output_dir(s);
    if (name == "fit") return cmd_fit(s, out, std::cerr);
    if (name == "forecast") return cmd_forecast(s, out, draws.empty() ? out / "draws.csv" : fs::path(draws), std::cerr);
    if (name == "simulate") return cmd_simulate(s, out, std::cerr);
    return cmd_diagnose(s, out, std::cerr);
  } catch (const UsageError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error: input: " << e.what() << "\n";
    return 3;
  } catch (const AssemblyError& e) {
    std::cerr << "error: input: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const DrawsFormatError& e) {
    std::cerr << "error: draws: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: run: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace bplnlc::cli
