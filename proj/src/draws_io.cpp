#include "bplnlc/draws_io.hpp"

#include <cstdio>
#include <cstring>
#include <type_traits>

#include "bplnlc/csv.hpp"

namespace bplnlc {

namespace {

Eigen::Index idx(std::size_t k) { return static_cast<Eigen::Index>(k); }

constexpr char kMagic[8] = {'B', 'P', 'L', 'N', 'L', 'C', 'D', '1'};

std::string br(const std::string& a) { return "[" + a + "]"; }
std::string br(int a) { return "[" + std::to_string(a) + "]"; }

// Visits every scalar of the state in column order. `f(name, ref)`.
template <class State, class F>
void visit(State& s, const StateLayout& l, F&& f) {
  const std::size_t n = l.n_pops(), m = l.n_ages(), nt = l.n_years();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t x = 0; x < m; ++x) f("alpha" + br(l.populations[i]) + br(l.ages[x]), s.alpha(idx(i), idx(x)));
  for (std::size_t x = 0; x < m; ++x) f("beta" + br(l.ages[x]), s.beta[idx(x)]);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t x = 0; x < m; ++x)
      f("beta_pop" + br(l.populations[i]) + br(l.ages[x]), s.beta_pop(idx(i), idx(x)));
  f(std::string("sigma2_beta"), s.sigma2_beta);
  for (std::size_t i = 0; i < n; ++i) f("sigma2_beta_pop" + br(l.populations[i]), s.sigma2_beta_pop[idx(i)]);
  for (std::size_t t = 0; t < nt; ++t) f("kappa" + br(l.years[t]), s.kappa[idx(t)]);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < nt; ++t)
      f("kappa_pop" + br(l.populations[i]) + br(l.years[t]), s.kappa_pop(idx(i), idx(t)));
  f(std::string("phi[1]"), s.phi[0]);
  f(std::string("phi[2]"), s.phi[1]);
  for (std::size_t i = 0; i < n; ++i) {
    f("phi_pop" + br(l.populations[i]) + "[1]", s.phi_pop(idx(i), 0));
    f("phi_pop" + br(l.populations[i]) + "[2]", s.phi_pop(idx(i), 1));
  }
  f(std::string("rho"), s.rho);
  for (std::size_t i = 0; i < n; ++i) f("rho_pop" + br(l.populations[i]), s.rho_pop[idx(i)]);
  f(std::string("sigma2_kappa"), s.sigma2_kappa);
  for (std::size_t i = 0; i < n; ++i) f("sigma2_kappa_pop" + br(l.populations[i]), s.sigma2_kappa_pop[idx(i)]);
  for (std::size_t i = 0; i < n; ++i) {
    f("w" + br(l.populations[i]) + "[1]", s.w[i][0]);
    f("w" + br(l.populations[i]) + "[2]", s.w[i][1]);
  }
  for (std::size_t i = 0; i < n; ++i) f("p" + br(l.populations[i]), s.p[idx(i)]);
  if (l.variant == ModelVariant::Full) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t x = 0; x < m; ++x)
        for (std::size_t t = 0; t < nt; ++t)
          f("nu" + br(l.populations[i]) + br(l.ages[x]) + br(l.years[t]), s.nu[i](idx(x), idx(t)));
    for (std::size_t i = 0; i < n; ++i) f("sigma2_nu" + br(l.populations[i]), s.sigma2_nu[idx(i)]);
  }
}

template <class T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DrawsFormatError("truncated binary draws file");
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  auto n = get<std::uint64_t>(in);
  if (n > (1u << 20)) throw DrawsFormatError("corrupt string length in binary draws file");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw DrawsFormatError("truncated binary draws file");
  return s;
}

}  // namespace

StateLayout StateLayout::from_dataset(const MortalityDataset& data, ModelVariant variant) {
  return {data.populations(), data.ages(), data.years(), variant};
}

std::vector<std::string> state_columns(const StateLayout& layout) {
  ModelState s = ModelState::zeros(layout.n_pops(), layout.n_ages(), layout.n_years());
  std::vector<std::string> out;
  visit(s, layout, [&](const std::string& name, auto&) { out.push_back(name); });
  return out;
}

std::vector<double> flatten_state(const ModelState& s, const StateLayout& layout) {
  if (s.n_pops() != layout.n_pops() || s.n_ages() != layout.n_ages() || s.n_years() != layout.n_years())
    throw DrawsFormatError("state dimensions do not match the layout");
  std::vector<double> out;
  visit(s, layout, [&](const std::string&, const auto& v) { out.push_back(static_cast<double>(v)); });
  return out;
}

ModelState unflatten_state(const std::vector<double>& values, const StateLayout& layout) {
  ModelState s = ModelState::zeros(layout.n_pops(), layout.n_ages(), layout.n_years());
  std::size_t k = 0;
  const std::size_t total = state_columns(layout).size();
  if (values.size() != total) throw DrawsFormatError("value count does not match the layout");
  visit(s, layout, [&](const std::string& name, auto& v) {
    using T = std::remove_reference_t<decltype(v)>;
    if constexpr (std::is_same_v<T, std::uint8_t>) {
      double d = values[k++];
      if (d != 0.0 && d != 1.0) throw DrawsFormatError("indicator " + name + " is not 0 or 1");
      v = static_cast<std::uint8_t>(d);
    } else {
      v = values[k++];
    }
  });
  if (layout.variant == ModelVariant::Model2) s.sigma2_nu.setOnes();
  return s;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

DrawsTable make_draws_table(const std::string& manifest_hash, const StateLayout& layout,
                            const std::vector<ModelState>& draws, const std::vector<std::size_t>& iterations) {
  if (draws.size() != iterations.size()) throw DrawsFormatError("draw and iteration counts differ");
  DrawsTable t;
  t.manifest_hash = manifest_hash;
  t.columns = state_columns(layout);
  t.iterations = iterations;
  t.rows.reserve(draws.size());
  for (const auto& s : draws) t.rows.push_back(flatten_state(s, layout));
  return t;
}

void write_draws_csv(std::ostream& out, const std::string& manifest_hash, const StateLayout& layout,
                     const std::vector<ModelState>& draws, const std::vector<std::size_t>& iterations) {
  if (draws.size() != iterations.size()) throw DrawsFormatError("draw and iteration counts differ");
  out << "# manifest: " << manifest_hash << '\n';
  out << "iteration";
  for (const auto& c : state_columns(layout)) out << ',' << c;
  out << '\n';
  for (std::size_t j = 0; j < draws.size(); ++j) {
    out << iterations[j];
    for (double v : flatten_state(draws[j], layout)) out << ',' << format_double(v);
    out << '\n';
  }
}

DrawsTable read_draws_csv(std::istream& in) {
  DrawsTable t;
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw ParseError("empty draws file", 1);
  const std::string prefix = "# manifest: ";
  if (line.rfind(prefix, 0) != 0) throw ParseError("missing manifest line", lineno);
  t.manifest_hash = line.substr(prefix.size());
  if (!std::getline(in, line)) throw ParseError("missing header", 2);
  ++lineno;
  auto head = split(line, ',');
  if (head.empty() || head[0] != "iteration") throw ParseError("header must start with 'iteration'", lineno);
  for (std::size_t k = 1; k < head.size(); ++k) t.columns.emplace_back(head[k]);
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (f.size() != head.size()) throw ParseError("wrong number of fields", lineno);
    long long it = 0;
    if (!parse_int(f[0], it) || it < 0) throw ParseError("bad iteration value", lineno);
    t.iterations.push_back(static_cast<std::size_t>(it));
    std::vector<double> row(f.size() - 1);
    for (std::size_t k = 1; k < f.size(); ++k)
      if (!parse_double(f[k], row[k - 1])) throw ParseError("bad number '" + std::string(f[k]) + "'", lineno);
    t.rows.push_back(std::move(row));
  }
  return t;
}

void write_draws_bin(std::ostream& out, const DrawsTable& t) {
  out.write(kMagic, sizeof(kMagic));
  put_string(out, t.manifest_hash);
  put<std::uint64_t>(out, t.columns.size());
  for (const auto& c : t.columns) put_string(out, c);
  put<std::uint64_t>(out, t.rows.size());
  for (std::size_t j = 0; j < t.rows.size(); ++j) {
    put<std::uint64_t>(out, t.iterations[j]);
    out.write(reinterpret_cast<const char*>(t.rows[j].data()),
              static_cast<std::streamsize>(t.rows[j].size() * sizeof(double)));
  }
}

DrawsTable read_draws_bin(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DrawsFormatError("not a binary draws file");
  DrawsTable t;
  t.manifest_hash = get_string(in);
  auto nc = get<std::uint64_t>(in);
  for (std::uint64_t k = 0; k < nc; ++k) t.columns.push_back(get_string(in));
  auto nr = get<std::uint64_t>(in);
  for (std::uint64_t j = 0; j < nr; ++j) {
    t.iterations.push_back(get<std::uint64_t>(in));
    std::vector<double> row(nc);
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(nc * sizeof(double)));
    if (!in) throw DrawsFormatError("truncated binary draws file");
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::vector<ModelState> states_from_table(const DrawsTable& table, const StateLayout& layout) {
  if (table.columns != state_columns(layout))
    throw DrawsFormatError("draws columns do not match the dataset and model variant");
  std::vector<ModelState> out;
  out.reserve(table.rows.size());
  for (const auto& r : table.rows) out.push_back(unflatten_state(r, layout));
  return out;
}

nlohmann::json state_to_json(const ModelState& s, const StateLayout& layout) {
  using nlohmann::json;
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  auto mat = [&](const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(vec(m.row(r).transpose()));
    return rows;
  };
  json j;
  j["populations"] = layout.populations;
  j["ages"] = layout.ages;
  j["years"] = layout.years;
  j["alpha"] = mat(s.alpha);
  j["beta"] = vec(s.beta);
  j["beta_pop"] = mat(s.beta_pop);
  j["sigma2_beta"] = s.sigma2_beta;
  j["sigma2_beta_pop"] = vec(s.sigma2_beta_pop);
  j["kappa"] = vec(s.kappa);
  j["kappa_pop"] = mat(s.kappa_pop);
  j["phi"] = vec(s.phi);
  j["phi_pop"] = mat(s.phi_pop);
  j["rho"] = s.rho;
  j["rho_pop"] = vec(s.rho_pop);
  j["sigma2_kappa"] = s.sigma2_kappa;
  j["sigma2_kappa_pop"] = vec(s.sigma2_kappa_pop);
  json w = json::array();
  for (const auto& ind : s.w) w.push_back({ind[0], ind[1]});
  j["w"] = w;
  j["p"] = vec(s.p);
  json nu = json::array();
  for (const auto& m : s.nu) nu.push_back(mat(m));
  j["nu"] = nu;
  j["sigma2_nu"] = vec(s.sigma2_nu);
  return j;
}

ModelState state_from_json(const nlohmann::json& j) {
  try {
    const std::size_t n = j.at("populations").size(), m = j.at("ages").size(), nt = j.at("years").size();
    ModelState s = ModelState::zeros(n, m, nt);
    auto vec = [](const nlohmann::json& a, Eigen::Index len) {
      if (static_cast<Eigen::Index>(a.size()) != len) throw DrawsFormatError("array length mismatch");
      Eigen::VectorXd v(len);
      for (Eigen::Index k = 0; k < len; ++k) v[k] = a.at(static_cast<std::size_t>(k)).get<double>();
      return v;
    };
    auto mat = [&](const nlohmann::json& a, Eigen::Index r, Eigen::Index c) {
      if (static_cast<Eigen::Index>(a.size()) != r) throw DrawsFormatError("matrix row count mismatch");
      Eigen::MatrixXd out(r, c);
      for (Eigen::Index k = 0; k < r; ++k) out.row(k) = vec(a.at(static_cast<std::size_t>(k)), c).transpose();
      return out;
    };
    s.alpha = mat(j.at("alpha"), idx(n), idx(m));
    s.beta = vec(j.at("beta"), idx(m));
    s.beta_pop = mat(j.at("beta_pop"), idx(n), idx(m));
    s.sigma2_beta = j.at("sigma2_beta").get<double>();
    s.sigma2_beta_pop = vec(j.at("sigma2_beta_pop"), idx(n));
    s.kappa = vec(j.at("kappa"), idx(nt));
    s.kappa_pop = mat(j.at("kappa_pop"), idx(n), idx(nt));
    s.phi = vec(j.at("phi"), 2);
    s.phi_pop = mat(j.at("phi_pop"), idx(n), 2);
    s.rho = j.at("rho").get<double>();
    s.rho_pop = vec(j.at("rho_pop"), idx(n));
    s.sigma2_kappa = j.at("sigma2_kappa").get<double>();
    s.sigma2_kappa_pop = vec(j.at("sigma2_kappa_pop"), idx(n));
    const auto& w = j.at("w");
    if (w.size() != n) throw DrawsFormatError("indicator count mismatch");
    for (std::size_t i = 0; i < n; ++i)
      s.w[i] = {w.at(i).at(0).get<std::uint8_t>(), w.at(i).at(1).get<std::uint8_t>()};
    s.p = vec(j.at("p"), idx(n));
    const auto& nu = j.at("nu");
    if (nu.size() != n) throw DrawsFormatError("overdispersion block count mismatch");
    for (std::size_t i = 0; i < n; ++i) s.nu[i] = mat(nu.at(i), idx(m), idx(nt));
    s.sigma2_nu = vec(j.at("sigma2_nu"), idx(n));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DrawsFormatError(std::string("state JSON: ") + e.what());
  }
}

}  // namespace bplnlc
