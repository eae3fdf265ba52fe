#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "bplnlc/data.hpp"
#include "bplnlc/model.hpp"
#include "bplnlc/sampler.hpp"

namespace bplnlc {

class DrawsFormatError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Labels used to name the scalar columns of a state.
struct StateLayout {
  std::vector<std::string> populations;
  std::vector<int> ages;
  std::vector<int> years;
  ModelVariant variant = ModelVariant::Full;

  static StateLayout from_dataset(const MortalityDataset& data, ModelVariant variant);
  std::size_t n_pops() const { return populations.size(); }
  std::size_t n_ages() const { return ages.size(); }
  std::size_t n_years() const { return years.size(); }
};

// One name per scalar, e.g. alpha[F][25], kappa[1951], nu[M][3][1960].
// The Model2 variant has no nu or sigma2_nu columns.
std::vector<std::string> state_columns(const StateLayout& layout);
std::vector<double> flatten_state(const ModelState& s, const StateLayout& layout);
ModelState unflatten_state(const std::vector<double>& values, const StateLayout& layout);

// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);

struct DrawsTable {
  std::string manifest_hash;
  std::vector<std::string> columns;  // without the leading iteration column
  std::vector<std::size_t> iterations;
  std::vector<std::vector<double>> rows;
};

// First line "# manifest: <hash>", then "iteration,<columns>", one row per draw.
void write_draws_csv(std::ostream& out, const std::string& manifest_hash, const StateLayout& layout,
                     const std::vector<ModelState>& draws, const std::vector<std::size_t>& iterations);
DrawsTable read_draws_csv(std::istream& in);

// Compact binary copy of the same table.
void write_draws_bin(std::ostream& out, const DrawsTable& table);
DrawsTable read_draws_bin(std::istream& in);

DrawsTable make_draws_table(const std::string& manifest_hash, const StateLayout& layout,
                            const std::vector<ModelState>& draws, const std::vector<std::size_t>& iterations);
// Checks the columns against the layout and rebuilds the states.
std::vector<ModelState> states_from_table(const DrawsTable& table, const StateLayout& layout);

nlohmann::json state_to_json(const ModelState& s, const StateLayout& layout);
ModelState state_from_json(const nlohmann::json& j);

}  // namespace bplnlc
