#include <doctest.h>

#include <sstream>

#include "bplnlc/data.hpp"

using namespace bplnlc;

namespace {

const char* kHeader =
    "Japan, Deaths (period 1x1)  Last modified: 01 Jan 2020;  Methods Protocol: v6 (2017)\n"
    "\n"
    "  Year          Age             Female            Male           Total\n";

std::vector<HmdRecord> parse(const std::string& body, const std::string& column) {
  std::istringstream in(std::string(kHeader) + body);
  return parse_hmd_table(in, column);
}

}  // namespace

TEST_CASE("hmd rows") {
  auto r = parse("  1951   0   9136.44   11937.53   21073.97\n", "Female");
  REQUIRE(r.size() == 1);
  CHECK(r[0].year == 1951);
  CHECK(r[0].age == 0);
  CHECK(*r[0].value == doctest::Approx(9136.44));

  r = parse("  1951   110+   0.00   1.00   1.00\n", "Male");
  CHECK(r[0].age == 110);
  CHECK(*r[0].value == 1.0);

  r = parse("  1951   3   .   .   .\n", "Total");
  CHECK(r[0].year == 1951);
  CHECK(r[0].age == 3);
  CHECK_FALSE(r[0].value.has_value());
}

TEST_CASE("hmd errors") {
  CHECK_THROWS_AS(parse("1951 0 1 2 3\n", "Both"), ConfigError);
  try {
    parse("1951 0 1 2 3\n1951 1 2 3\n", "Male");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 5);
  }
  CHECK_THROWS_AS(parse("19x1 0 1 2 3\n", "Male"), ParseError);
}

TEST_CASE("assembly") {
  PopulationTables t;
  t.label = "F";
  t.deaths = {{2000, 0, 12.6}};
  t.exposures = {{2000, 0, 100.0}};
  auto d = assemble_dataset({t}, {0, 0}, {2000, 2000});
  CHECK(d.n_pops() == 1);
  CHECK(d.n_ages() == 1);
  CHECK(d.n_years() == 1);
  CHECK(d.deaths(0, 0, 0) == 13);

  t.deaths = {{2000, 0, 5.0}};
  d = assemble_dataset({t}, {0, 0}, {2000, 2000});
  CHECK(d.deaths(0, 0, 0) == 5);
  CHECK(d.exposure(0, 0, 0) == 100.0);
  CHECK_FALSE(d.missing(0, 0, 0));

  // absent cell
  CHECK_THROWS_AS(assemble_dataset({t}, {0, 1}, {2000, 2000}), AssemblyError);

  // zero exposure is masked, not fatal
  t.exposures = {{2000, 0, 0.0}};
  d = assemble_dataset({t}, {0, 0}, {2000, 2000});
  CHECK(d.missing(0, 0, 0));
}

TEST_CASE("canonical csv round trip") {
  MortalityDataset d({"F", "M"}, 10, 2, 1990, 3);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t x = 0; x < 2; ++x)
      for (std::size_t t = 0; t < 3; ++t) d.set_cell(i, x, t, static_cast<std::int64_t>(i + x + t), 10.5 + t, t == 2 && x == 1);
  std::stringstream ss;
  write_dataset_csv(ss, d);
  auto back = read_dataset_csv(ss);
  CHECK(back == d);

  auto w = window_dataset(d, {11, 11}, {1991, 1992});
  CHECK(w.n_ages() == 1);
  CHECK(w.n_years() == 2);
  CHECK(w.deaths(1, 0, 0) == d.deaths(1, 1, 1));
  CHECK_THROWS_AS(window_dataset(d, {0, 11}, {1991, 1992}), AssemblyError);
}
