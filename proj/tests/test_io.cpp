#include <gtest/gtest.h>

#include "rarecell/errors.hpp"
#include "rarecell/io.hpp"
#include "rarecell/random.hpp"
#include "support.hpp"

using namespace rarecell;

TEST(Hash, CanonicalJsonIgnoresKeyOrder) {
  const auto a = nlohmann::json::parse(R"({"b": 1, "a": [1, 2], "c": {"y": 0, "x": 1}})");
  const auto b = nlohmann::json::parse(R"({"c": {"x": 1, "y": 0}, "a": [1, 2], "b": 1})");
  EXPECT_EQ(content_hash(a), content_hash(b));
  EXPECT_EQ(content_hash(a).size(), 16u);
  EXPECT_NE(content_hash(a), content_hash(nlohmann::json::parse(R"({"b": 2, "a": [1, 2], "c": {"y": 0, "x": 1}})")));
}

TEST(Hash, Fnv1aKnownValues) {
  EXPECT_EQ(content_hash_bytes(""), "cbf29ce484222325");
  EXPECT_EQ(content_hash_bytes("a"), "af63dc4c8601ec8c");
}

TEST(Files, AtomicWriteAndRead) {
  support::TempDir tmp("io");
  const auto p = tmp.path() / "sub" / "x.json";
  write_json_atomic(p, {{"k", 3}});
  EXPECT_EQ(read_json(p).at("k"), 3);
  write_file_atomic(p, "{\"k\": 4}");
  EXPECT_EQ(read_json(p).at("k"), 4);
  write_file_atomic(tmp.path() / "bad.json", "{oops");
  EXPECT_THROW(read_json(tmp.path() / "bad.json"), ParseError);
  EXPECT_THROW(read_file(tmp.path() / "none"), Error);
}

TEST(Doubles, ShortestRoundTrip) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(49.0 / 396.0), "0.12373737373737374");
  EXPECT_EQ(format_double(5), "5");
  for (double v : {1.0 / 3.0, 1e-300, 123456.789, -2.5e10}) EXPECT_EQ(std::stod(format_double(v)), v);
}

TEST(Csv, QuoteAndSplit) {
  EXPECT_EQ(csv_field("plain"), "plain");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  const auto fields = parse_csv_line("x,\"a,b\",\"q\"\"q\",");
  ASSERT_EQ(fields.size(), 4u);
  EXPECT_EQ(fields[1], "a,b");
  EXPECT_EQ(fields[2], "q\"q");
  EXPECT_EQ(fields[3], "");
  try {
    parse_csv_line("a,\"open", 7);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 7u);
  }
}

TEST(Rng, ReproducibleAndInRange) {
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  Rng r(1);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) ++counts[r.uniform_index(7)];
  for (int c : counts) EXPECT_GT(c, 800);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
  EXPECT_NE(derive_seed(1, {2}), derive_seed(1, {3}));
  EXPECT_EQ(derive_seed(1, {2, 3}), derive_seed(1, {2, 3}));
}
