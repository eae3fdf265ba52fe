#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bplnlc {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class AssemblyError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One data line of an HMD 1x1 table, restricted to a single value column.
struct HmdRecord {
  int year;
  int age;
  std::optional<double> value;  // nullopt for "."
};

// Parses an HMD 1x1 period table (Deaths_1x1 / Exposures_1x1). Header lines
// are skipped up to the "Year Age ..." column header. `value_column` selects
// one of the named value columns (e.g. "Female").
std::vector<HmdRecord> parse_hmd_table(std::istream& in, const std::string& value_column);

struct CellIndex {
  std::size_t pop;
  std::size_t age;
  std::size_t year;
};

// Deaths and exposures on a dense population x age x year grid. Index
// arguments are zero-based offsets into populations/ages/years.
class MortalityDataset {
 public:
  MortalityDataset() = default;
  MortalityDataset(std::vector<std::string> populations, int first_age, std::size_t n_ages,
                   int first_year, std::size_t n_years);

  std::size_t n_pops() const { return populations_.size(); }
  std::size_t n_ages() const { return n_ages_; }
  std::size_t n_years() const { return n_years_; }
  std::size_t n_cells() const { return deaths_.size(); }

  const std::vector<std::string>& populations() const { return populations_; }
  int first_age() const { return first_age_; }
  int first_year() const { return first_year_; }
  int age_label(std::size_t x) const { return first_age_ + static_cast<int>(x); }
  int year_label(std::size_t t) const { return first_year_ + static_cast<int>(t); }
  std::vector<int> ages() const;
  std::vector<int> years() const;

  std::size_t flat(std::size_t i, std::size_t x, std::size_t t) const {
    return (i * n_ages_ + x) * n_years_ + t;
  }

  std::int64_t deaths(std::size_t i, std::size_t x, std::size_t t) const {
    return deaths_[flat(i, x, t)];
  }
  double exposure(std::size_t i, std::size_t x, std::size_t t) const {
    return exposures_[flat(i, x, t)];
  }
  bool missing(std::size_t i, std::size_t x, std::size_t t) const {
    return missing_[flat(i, x, t)] != 0;
  }
  // log(D!) for the cell, cached at construction / set_cell time.
  double log_factorial(std::size_t i, std::size_t x, std::size_t t) const {
    return log_fact_[flat(i, x, t)];
  }
  double log_exposure(std::size_t i, std::size_t x, std::size_t t) const {
    return log_exposure_[flat(i, x, t)];
  }

  // Observed central death rate D/E. NaN on missing cells.
  double observed_rate(std::size_t i, std::size_t x, std::size_t t) const;

  void set_cell(std::size_t i, std::size_t x, std::size_t t, std::int64_t deaths,
                double exposure, bool missing);

  // Throws AssemblyError if an invariant is broken.
  void validate() const;

  // Non-missing cells, in (pop, age, year) order.
  std::vector<CellIndex> observed_cells() const;

  bool operator==(const MortalityDataset&) const = default;

 private:
  std::vector<std::string> populations_;
  int first_age_ = 0;
  std::size_t n_ages_ = 0;
  int first_year_ = 0;
  std::size_t n_years_ = 0;
  std::vector<std::int64_t> deaths_;
  std::vector<double> exposures_;
  std::vector<std::uint8_t> missing_;
  std::vector<double> log_fact_;
  std::vector<double> log_exposure_;
};

struct PopulationTables {
  std::string label;
  std::vector<HmdRecord> deaths;
  std::vector<HmdRecord> exposures;
};

struct IntRange {
  int lo;
  int hi;  // inclusive
};

// Builds the dense grid restricted to the window. Deaths are rounded half-up;
// cells with non-positive or missing exposure, or missing deaths, are masked.
MortalityDataset assemble_dataset(const std::vector<PopulationTables>& tables, IntRange ages,
                                  IntRange years);

// Canonical CSV: population,age,year,deaths,exposure,missing
void write_dataset_csv(std::ostream& out, const MortalityDataset& data);
MortalityDataset read_dataset_csv(std::istream& in);

// Restricts an existing dataset to a sub-window (used for train/hold-out splits).
MortalityDataset window_dataset(const MortalityDataset& data, IntRange ages, IntRange years);

}  // namespace bplnlc
