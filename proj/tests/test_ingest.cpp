#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <unistd.h>
#include <zlib.h>

#include "ftp/ingest.hpp"

using namespace ftp;

namespace {

std::string criteo_line(const std::string& s, const std::string& t) {
  std::string line = s + "\t" + t;
  for (int i = 0; i < 8; ++i) line += "\t" + std::to_string(i * 3);
  for (int i = 0; i < 9; ++i) line += "\tc" + std::to_string(i);
  return line;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ftp_ingest_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Criteo, DirectFieldMapping) {
  const auto r = parse_criteo_line(criteo_line("0", "86400"), 1, kCriteoDMax, 7);
  EXPECT_EQ(r.id, 7u);
  EXPECT_EQ(r.log_time, 0);
  ASSERT_TRUE(r.conversion_time);
  EXPECT_EQ(*r.conversion_time - r.log_time, 86400);
  EXPECT_EQ(r.tokens.size(), 17u);
  EXPECT_EQ(r.tokens[8], "c0");
}

TEST(Criteo, EmptyConversionIsAbsent) {
  EXPECT_FALSE(parse_criteo_line(criteo_line("0", ""), 1, kCriteoDMax, 0).conversion_time);
}

TEST(Criteo, ConversionPastDmaxIsAbsent) {
  const Seconds late = 31 * kDay;
  EXPECT_FALSE(parse_criteo_line(criteo_line("0", std::to_string(late)), 1, kCriteoDMax, 0).conversion_time);
  EXPECT_TRUE(parse_criteo_line(criteo_line("0", std::to_string(kCriteoDMax)), 1, kCriteoDMax, 0).conversion_time);
}

TEST(Criteo, MalformedLinesReportLineNumber) {
  try {
    parse_criteo_line("1\t2\t3", 42, kCriteoDMax, 0);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 42u);
  }
  EXPECT_THROW(parse_criteo_line(criteo_line("x", ""), 1, kCriteoDMax, 0), ParseError);
  EXPECT_THROW(parse_criteo_line(criteo_line("100", "50"), 1, kCriteoDMax, 0), ParseError);
}

TEST(Criteo, IntegerBinning) {
  EXPECT_EQ(bin_integer_feature(-1), "neg");
  EXPECT_EQ(bin_integer_feature(0), "i0");
  EXPECT_EQ(bin_integer_feature(2), "i2");
  // ln(3)^2 = 1.207, ln(100)^2 = 21.2
  EXPECT_EQ(bin_integer_feature(3), "b1");
  EXPECT_EQ(bin_integer_feature(100), "b21");
}

TEST(Hashing, DeterministicAndFieldDisjoint) {
  const FeatureHasher h(3, 1u << 10);
  const std::vector<std::string> toks{"a", "b", "a"};
  const auto x1 = hash_features(toks, h);
  const auto x2 = hash_features(toks, h);
  EXPECT_EQ(x1, x2);
  for (std::uint32_t f = 0; f < 3; ++f) {
    EXPECT_GE(x1[f].index, f * h.n_buckets());
    EXPECT_LT(x1[f].index, (f + 1) * h.n_buckets());
    EXPECT_EQ(h.field_of(x1[f].index), f);
  }
  EXPECT_NE(x1[0].index % h.n_buckets(), x1[2].index % h.n_buckets());
}

TEST(Hashing, MissingTokenUsesReservedBucket) {
  const FeatureHasher h(2, 16);
  EXPECT_EQ(h.bucket(1, ""), 0u);
  for (int i = 0; i < 1000; ++i) EXPECT_NE(h.bucket(0, "t" + std::to_string(i)), 0u);
}

TEST(Hashing, RejectsBadBucketCounts) {
  EXPECT_THROW(FeatureHasher(1, 100), Error);
  EXPECT_THROW(FeatureHasher(1, 1), Error);
  EXPECT_THROW(FeatureHasher(0, 16), Error);
}

TEST(Hashing, CollisionsMatchBirthdayBound) {
  const std::uint32_t n_buckets = 1u << 20;
  const FeatureHasher h(1, n_buckets);
  const std::size_t n = 100000;
  std::set<std::uint32_t> seen;
  for (std::size_t i = 0; i < n; ++i) seen.insert(h.bucket(0, "token-" + std::to_string(i)));
  const double m = n_buckets - 1;  // bucket 0 is reserved
  const double expected_distinct = m * (1.0 - std::pow(1.0 - 1.0 / m, static_cast<double>(n)));
  const double expected_collisions = n - expected_distinct;
  const double observed = static_cast<double>(n - seen.size());
  EXPECT_NEAR(observed, expected_collisions, 5.0 * std::sqrt(expected_collisions));
}

TEST(Canonical, RoundTrip) {
  RawRecord r;
  r.id = 12;
  r.log_time = 3600;
  r.conversion_time = 7200;
  r.tokens = {"a", "", "7"};
  std::ostringstream out;
  write_canonical(out, r);
  const auto back = parse_canonical_line(out.str(), 1, 3, 2 * kDay);
  EXPECT_EQ(back.id, r.id);
  EXPECT_EQ(back.log_time, r.log_time);
  EXPECT_EQ(back.conversion_time, r.conversion_time);
  EXPECT_EQ(back.tokens, r.tokens);

  r.conversion_time.reset();
  std::ostringstream out2;
  write_canonical(out2, r);
  EXPECT_FALSE(parse_canonical_line(out2.str(), 1, 3, 2 * kDay).conversion_time);
}

TEST(Canonical, WrongColumnCountThrows) {
  EXPECT_THROW(parse_canonical_line("1\t2\t\ta", 5, 2, kDay), ParseError);
}

TEST(SplitFor, DeterministicFraction) {
  std::size_t eval = 0;
  for (std::uint64_t id = 0; id < 100000; ++id) {
    const auto s = split_for(id, 0.2);
    EXPECT_EQ(s, split_for(id, 0.2));
    eval += s == Split::kEval ? 1 : 0;
  }
  EXPECT_NEAR(eval / 100000.0, 0.2, 0.005);
  EXPECT_EQ(split_for(5, 0.0), Split::kTrain);
}

TEST(LoadRecords, PlainAndGzipAgreeAndSortByLogTime) {
  const auto plain = temp_path("log.tsv");
  const auto gz = temp_path("log.tsv.gz");
  std::string text = "0\t50\t\ta\tb\n1\t10\t20\tc\t\n2\t30\t\ta\tb\n";
  {
    std::ofstream o(plain);
    o << text;
  }
  {
    gzFile f = gzopen(gz.c_str(), "wb");
    gzwrite(f, text.data(), static_cast<unsigned>(text.size()));
    gzclose(f);
  }
  const FeatureHasher h(2, 64);
  LogSpec spec{plain.string(), LogFormat::kCanonical, 2, kDay};
  const auto a = load_records(spec, h);
  spec.path = gz.string();
  const auto b = load_records(spec, h);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a[0].id, 1u);
  EXPECT_EQ(a[1].id, 2u);
  EXPECT_EQ(a[2].id, 0u);
  EXPECT_EQ(a[1].features, a[2].features);
  EXPECT_EQ(a[0].features[1].index, h.n_buckets());  // empty token, reserved bucket of field 1
  std::filesystem::remove(plain);
  std::filesystem::remove(gz);
}

TEST(LoadRecords, MissingFileNamesPath) {
  const FeatureHasher h(2, 64);
  try {
    load_records({"/nonexistent/xyz.tsv", LogFormat::kCanonical, 2, kDay}, h);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/xyz.tsv"), std::string::npos);
  }
}
