#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "cgp/binary_io.hpp"
#include "cgp/digest.hpp"
#include "cgp/errors.hpp"
#include "cgp/rng.hpp"
#include "cgp/text.hpp"

using namespace cgp;

TEST_SUITE("util") {
  TEST_CASE("sha256 matches the published test vectors") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    Sha256 h;
    h.update(std::string_view("ab")).update(std::string_view("c"));
    CHECK(h.hex() == sha256_hex("abc"));
  }

  TEST_CASE("fnv1a64 reference values") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  }

  TEST_CASE("canonicalize normalizes case, punctuation and spacing") {
    CHECK(canonicalize("  Hard   Exudates. ") == "hard exudates");
    CHECK(canonicalize("Orange-Red") == "orange red");
    CHECK(canonicalize("cotton_wool/spots") == "cotton wool spots");
    CHECK(canonicalize("\"Drusen\"") == "drusen");
  }

  TEST_CASE("canonicalize is idempotent on random strings") {
    Rng rng(7);
    const std::string alphabet = "abcXYZ -_/.,;'\"!?()  \t";
    for (int trial = 0; trial < 500; ++trial) {
      std::string s;
      const auto len = rng.uniform_below(30);
      for (std::uint64_t i = 0; i < len; ++i) s += alphabet[rng.uniform_below(alphabet.size())];
      const auto once = canonicalize(s);
      CHECK(canonicalize(once) == once);
      CHECK(once == trim(once));
      CHECK(once.find("  ") == std::string::npos);
    }
  }

  TEST_CASE("parse_int_list handles ranges and lists") {
    CHECK(parse_int_list("1-5") == std::vector<long long>{1, 2, 3, 4, 5});
    CHECK(parse_int_list("2,4,8,16") == std::vector<long long>{2, 4, 8, 16});
    CHECK(parse_int_list("2, 4-6") == std::vector<long long>{2, 4, 5, 6});
    CHECK_THROWS_AS(parse_int_list("5-1"), ConfigError);
    CHECK_THROWS_AS(parse_int_list("x"), ConfigError);
  }

  TEST_CASE("csv fields round-trip through quoting") {
    const std::vector<std::string> fields{"plain", "with,comma", "with \"quote\"", ""};
    std::string line;
    for (std::size_t i = 0; i < fields.size(); ++i) line += (i ? "," : "") + csv_field(fields[i]);
    CHECK(split_csv_line(line) == fields);
  }

  TEST_CASE("rng is deterministic and derive separates labels") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
    auto x = Rng::derive(1, "disease a");
    auto y = Rng::derive(1, "disease b");
    auto z = Rng::derive(1, "disease a");
    const auto xv = x.next();
    CHECK(xv != y.next());
    CHECK(xv == z.next());
  }

  TEST_CASE("uniform_below passes a chi-square uniformity check") {
    Rng rng(3);
    const int bins = 10, draws = 100000;
    std::vector<int> counts(bins, 0);
    for (int i = 0; i < draws; ++i) ++counts[rng.uniform_below(bins)];
    double chi2 = 0;
    const double expected = static_cast<double>(draws) / bins;
    for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
    CHECK(chi2 < 27.88);  // 99.9th percentile, 9 degrees of freedom
  }

  TEST_CASE("normal draws have unit variance") {
    Rng rng(11);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
      const double v = rng.normal();
      s += v;
      s2 += v * v;
    }
    CHECK(std::abs(s / n) < 0.01);
    CHECK(std::abs(s2 / n - 1.0) < 0.02);
  }

  TEST_CASE("shuffle yields permutations") {
    Rng rng(5);
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
    for (int t = 0; t < 50; ++t) {
      rng.shuffle(v);
      CHECK(std::set<int>(v.begin(), v.end()).size() == 8);
    }
  }

  TEST_CASE("binary matrix payload round-trips at float32 precision") {
    Eigen::MatrixXd m(2, 3);
    m << 1.0, -2.5, 1.0 / 3.0, 1e-8, 7.0, -0.1;
    std::stringstream ss;
    binio::write_header(ss, "TEST 1", {{"rows", 2}});
    binio::write_matrix(ss, m);
    const auto header = binio::read_header(ss, "TEST 1", "test", "<memory>");
    CHECK(header.at("rows").get<int>() == 2);
    const auto back = binio::read_matrix(ss, 2, 3);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) CHECK(back(i, j) == binio::to_f32(m(i, j)));
  }

  TEST_CASE("binary header rejects a wrong magic") {
    std::stringstream ss;
    binio::write_header(ss, "A 1", {});
    CHECK_THROWS_AS(binio::read_header(ss, "B 1", "test", "<memory>"), ValidationError);
  }
}
