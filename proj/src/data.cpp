#include "bplnlc/data.hpp"

#include <algorithm>
#include <sstream>
#include <tuple>

#include "bplnlc/csv.hpp"

namespace bplnlc {

namespace {

bool is_header(const std::vector<std::string_view>& tok) {
  return tok.size() >= 2 && tok[0] == "Year" && tok[1] == "Age";
}

}  // namespace

std::vector<HmdRecord> parse_hmd_table(std::istream& in, const std::string& value_column) {
  std::vector<HmdRecord> out;
  std::string line;
  std::size_t lineno = 0;
  std::size_t n_columns = 0;
  std::size_t value_idx = 0;
  bool in_body = false;

  while (std::getline(in, line)) {
    ++lineno;
    auto tok = split_whitespace(line);
    if (!in_body) {
      if (!is_header(tok)) continue;
      n_columns = tok.size();
      auto it = std::find(tok.begin() + 2, tok.end(), std::string_view(value_column));
      if (it == tok.end()) throw ConfigError("unknown value column '" + value_column + "'");
      value_idx = static_cast<std::size_t>(it - tok.begin());
      in_body = true;
      continue;
    }
    if (tok.empty()) continue;
    if (tok.size() != n_columns) {
      throw ParseError("expected " + std::to_string(n_columns) + " columns, got " +
                           std::to_string(tok.size()),
                       lineno);
    }
    HmdRecord rec{};
    long long year = 0;
    if (!parse_int(tok[0], year)) throw ParseError("non-numeric year '" + std::string(tok[0]) + "'", lineno);
    rec.year = static_cast<int>(year);

    std::string_view age_tok = tok[1];
    if (!age_tok.empty() && age_tok.back() == '+') age_tok.remove_suffix(1);
    long long age = 0;
    if (!parse_int(age_tok, age)) throw ParseError("non-numeric age '" + std::string(tok[1]) + "'", lineno);
    rec.age = static_cast<int>(age);

    std::string_view v = tok[value_idx];
    if (v == ".") {
      rec.value = std::nullopt;
    } else {
      double d = 0.0;
      if (!parse_double(v, d)) throw ParseError("non-numeric value '" + std::string(v) + "'", lineno);
      rec.value = d;
    }
    out.push_back(rec);
  }
  if (!in_body) {
    // A stream with no header at all is treated as malformed input.
    throw ParseError("no 'Year Age ...' header found", lineno);
  }
  return out;
}

MortalityDataset::MortalityDataset(std::vector<std::string> populations, int first_age,
                                   std::size_t n_ages, int first_year, std::size_t n_years)
    : populations_(std::move(populations)),
      first_age_(first_age),
      n_ages_(n_ages),
      first_year_(first_year),
      n_years_(n_years) {
  std::size_t n = populations_.size() * n_ages_ * n_years_;
  deaths_.assign(n, 0);
  exposures_.assign(n, 1.0);
  missing_.assign(n, 1);
  log_fact_.assign(n, 0.0);
  log_exposure_.assign(n, 0.0);
}

std::vector<int> MortalityDataset::ages() const {
  std::vector<int> out(n_ages_);
  for (std::size_t x = 0; x < n_ages_; ++x) out[x] = age_label(x);
  return out;
}

std::vector<int> MortalityDataset::years() const {
  std::vector<int> out(n_years_);
  for (std::size_t t = 0; t < n_years_; ++t) out[t] = year_label(t);
  return out;
}

double MortalityDataset::observed_rate(std::size_t i, std::size_t x, std::size_t t) const {
  if (missing(i, x, t)) return std::nan("");
  return static_cast<double>(deaths(i, x, t)) / exposure(i, x, t);
}

void MortalityDataset::set_cell(std::size_t i, std::size_t x, std::size_t t, std::int64_t deaths,
                                double exposure, bool missing) {
  auto k = flat(i, x, t);
  deaths_[k] = deaths;
  exposures_[k] = exposure;
  missing_[k] = missing ? 1 : 0;
  log_fact_[k] = std::lgamma(static_cast<double>(deaths) + 1.0);
  log_exposure_[k] = exposure > 0.0 ? std::log(exposure) : 0.0;
}

void MortalityDataset::validate() const {
  if (populations_.empty() || n_ages_ == 0 || n_years_ == 0) {
    throw AssemblyError("dataset has an empty dimension");
  }
  for (std::size_t k = 0; k < deaths_.size(); ++k) {
    if (missing_[k]) continue;
    if (deaths_[k] < 0) throw AssemblyError("negative death count");
    if (!(exposures_[k] > 0.0) || !std::isfinite(exposures_[k])) {
      throw AssemblyError("non-positive exposure on an observed cell");
    }
  }
}

std::vector<CellIndex> MortalityDataset::observed_cells() const {
  std::vector<CellIndex> out;
  out.reserve(n_cells());
  for (std::size_t i = 0; i < n_pops(); ++i)
    for (std::size_t x = 0; x < n_ages_; ++x)
      for (std::size_t t = 0; t < n_years_; ++t)
        if (!missing(i, x, t)) out.push_back({i, x, t});
  return out;
}

MortalityDataset assemble_dataset(const std::vector<PopulationTables>& tables, IntRange ages,
                                  IntRange years) {
  if (tables.empty()) throw AssemblyError("no populations supplied");
  if (ages.hi < ages.lo || years.hi < years.lo) throw AssemblyError("empty age or year window");

  std::vector<std::string> labels;
  for (const auto& p : tables) labels.push_back(p.label);
  const auto n_ages = static_cast<std::size_t>(ages.hi - ages.lo + 1);
  const auto n_years = static_cast<std::size_t>(years.hi - years.lo + 1);
  MortalityDataset data(labels, ages.lo, n_ages, years.lo, n_years);

  using Key = std::pair<int, int>;  // (year, age)
  std::vector<std::string> absent;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    std::map<Key, std::optional<double>> deaths, expo;
    for (const auto& r : tables[i].deaths) deaths[{r.year, r.age}] = r.value;
    for (const auto& r : tables[i].exposures) expo[{r.year, r.age}] = r.value;

    for (std::size_t x = 0; x < n_ages; ++x) {
      for (std::size_t t = 0; t < n_years; ++t) {
        Key key{data.year_label(t), data.age_label(x)};
        auto d = deaths.find(key);
        auto e = expo.find(key);
        if (d == deaths.end() || e == expo.end()) {
          absent.push_back(tables[i].label + "/" + std::to_string(key.second) + "/" +
                           std::to_string(key.first) + (d == deaths.end() ? " deaths" : " exposure"));
          continue;
        }
        bool miss = !d->second || !e->second || !(*e->second > 0.0);
        std::int64_t dv = 0;
        double ev = e->second.value_or(0.0);
        if (d->second) {
          if (*d->second < 0.0) throw AssemblyError("negative death count in " + tables[i].label);
          dv = static_cast<std::int64_t>(std::floor(*d->second + 0.5));
        }
        data.set_cell(i, x, t, dv, miss ? (ev > 0.0 ? ev : 0.0) : ev, miss);
      }
    }
  }
  if (!absent.empty()) {
    std::ostringstream msg;
    msg << absent.size() << " cell(s) absent from source tables:";
    for (std::size_t k = 0; k < absent.size() && k < 20; ++k) msg << ' ' << absent[k];
    if (absent.size() > 20) msg << " ...";
    throw AssemblyError(msg.str());
  }
  return data;
}

void write_dataset_csv(std::ostream& out, const MortalityDataset& data) {
  out << "population,age,year,deaths,exposure,missing\n";
  for (std::size_t i = 0; i < data.n_pops(); ++i)
    for (std::size_t x = 0; x < data.n_ages(); ++x)
      for (std::size_t t = 0; t < data.n_years(); ++t) {
        out << data.populations()[i] << ',' << data.age_label(x) << ',' << data.year_label(t) << ','
            << data.deaths(i, x, t) << ',' << format_double(data.exposure(i, x, t)) << ','
            << (data.missing(i, x, t) ? 1 : 0) << '\n';
      }
}

MortalityDataset read_dataset_csv(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError("empty dataset file", 0);
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "population,age,year,deaths,exposure,missing") {
    throw ParseError("unexpected dataset header '" + line + "'", lineno);
  }

  struct Row {
    std::size_t pop;
    int age, year;
    long long deaths;
    double exposure;
    bool missing;
  };
  std::vector<Row> rows;
  std::vector<std::string> pops;
  std::map<std::string, std::size_t> pop_index;
  int age_lo = 0, age_hi = 0, year_lo = 0, year_hi = 0;

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (f.size() != 6) throw ParseError("expected 6 fields", lineno);
    Row r{};
    std::string label(f[0]);
    auto [it, inserted] = pop_index.try_emplace(label, pops.size());
    if (inserted) pops.push_back(label);
    r.pop = it->second;
    long long age = 0, year = 0, miss = 0;
    if (!parse_int(f[1], age) || !parse_int(f[2], year) || !parse_int(f[3], r.deaths) ||
        !parse_double(f[4], r.exposure) || !parse_int(f[5], miss)) {
      throw ParseError("malformed dataset row", lineno);
    }
    r.age = static_cast<int>(age);
    r.year = static_cast<int>(year);
    r.missing = miss != 0;
    if (rows.empty()) {
      age_lo = age_hi = r.age;
      year_lo = year_hi = r.year;
    }
    age_lo = std::min(age_lo, r.age);
    age_hi = std::max(age_hi, r.age);
    year_lo = std::min(year_lo, r.year);
    year_hi = std::max(year_hi, r.year);
    rows.push_back(r);
  }
  if (rows.empty()) throw ParseError("dataset has no rows", lineno);

  MortalityDataset data(pops, age_lo, static_cast<std::size_t>(age_hi - age_lo + 1), year_lo,
                        static_cast<std::size_t>(year_hi - year_lo + 1));
  if (rows.size() != data.n_cells()) {
    throw AssemblyError("dataset CSV does not cover a dense grid (" + std::to_string(rows.size()) +
                        " rows for " + std::to_string(data.n_cells()) + " cells)");
  }
  std::vector<std::uint8_t> seen(data.n_cells(), 0);
  for (const auto& r : rows) {
    auto x = static_cast<std::size_t>(r.age - age_lo);
    auto t = static_cast<std::size_t>(r.year - year_lo);
    auto k = data.flat(r.pop, x, t);
    if (seen[k]) throw AssemblyError("duplicate dataset row");
    seen[k] = 1;
    data.set_cell(r.pop, x, t, r.deaths, r.exposure, r.missing);
  }
  data.validate();
  return data;
}

MortalityDataset window_dataset(const MortalityDataset& data, IntRange ages, IntRange years) {
  if (ages.lo < data.first_age() || ages.hi > data.age_label(data.n_ages() - 1) ||
      years.lo < data.first_year() || years.hi > data.year_label(data.n_years() - 1) ||
      ages.hi < ages.lo || years.hi < years.lo) {
    throw AssemblyError("window outside dataset range");
  }
  MortalityDataset out(data.populations(), ages.lo, static_cast<std::size_t>(ages.hi - ages.lo + 1),
                       years.lo, static_cast<std::size_t>(years.hi - years.lo + 1));
  for (std::size_t i = 0; i < out.n_pops(); ++i)
    for (std::size_t x = 0; x < out.n_ages(); ++x)
      for (std::size_t t = 0; t < out.n_years(); ++t) {
        auto sx = static_cast<std::size_t>(out.age_label(x) - data.first_age());
        auto st = static_cast<std::size_t>(out.year_label(t) - data.first_year());
        out.set_cell(i, x, t, data.deaths(i, sx, st), data.exposure(i, sx, st),
                     data.missing(i, sx, st));
      }
  return out;
}

}  // namespace bplnlc
