#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "adaptrec/corpus.hpp"
#include "support/fixtures.hpp"

using namespace adaptrec;

namespace {

ParsedInteractions parse(const std::string& log, const std::string& titles, LogFormat f = LogFormat::tsv()) {
  std::istringstream l(log), t(titles);
  return parse_interactions(l, t, f);
}

SequenceCorpus numbered_corpus(std::size_t items, std::vector<ItemId> history) {
  SequenceCorpus c;
  for (std::size_t i = 1; i <= items; ++i) c.catalog.titles.emplace(std::to_string(i), "Title " + std::to_string(i));
  c.sequences.emplace("u", std::move(history));
  return c;
}

std::vector<ItemId> ids(std::size_t from, std::size_t to) {
  std::vector<ItemId> out;
  for (std::size_t i = from; i <= to; ++i) out.push_back(std::to_string(i));
  return out;
}

}  // namespace

TEST(Ingest, ThreeLineFixture) {
  const auto p = parse("u1\ti1\t5\t1\nu1\ti2\t3\t2\nu2\ti1\t4\t5\n", "i1\tAlpha\ni2\tBeta\n");
  ASSERT_EQ(p.log.records.size(), 3u);
  const auto c = build_sequences(p.log, p.catalog);
  EXPECT_EQ(c.sequences.size(), 2u);
  EXPECT_EQ(c.sequence("u1"), (std::vector<ItemId>{"i1", "i2"}));
  EXPECT_EQ(c.sequence("u2"), (std::vector<ItemId>{"i1"}));
}

TEST(Ingest, EmptyStreamIsAnError) {
  try {
    parse("", "i1\tAlpha\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("no records"), std::string::npos);
  }
}

TEST(Ingest, MissingTitleListsIds) {
  try {
    parse("u1\t7\t5\t1\nu1\t3\t5\t2\n", "1\tA\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("3, 7"), std::string::npos) << e.what();
  }
}

TEST(Ingest, ReportsLineNumbers) {
  try {
    parse("u1\ti1\t5\t1\nu1\ti2\t5\n", "i1\tA\ni2\tB\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(parse("u1\ti1\t5\tnoon\n", "i1\tA\n"), ParseError);
  EXPECT_THROW(parse("u1\ti1\t5\t1\n", "i1\tA\ni1\tB\n"), ParseError);
  EXPECT_THROW(parse("u1\ti1\t5\t1\n", "i1\tA\xff\n"), ParseError);
}

TEST(Ingest, CsvWithHeaderAndQuotes) {
  LogFormat f = LogFormat::csv();
  f.has_header = true;
  const auto p = parse("user,item,rating,ts\r\n\"u,1\",i1,5,3\r\nu2,i1,4,1\r\n", "i1\tA\n", f);
  ASSERT_EQ(p.log.records.size(), 2u);
  EXPECT_EQ(p.log.records[0].user, "u,1");
  EXPECT_EQ(p.log.records[0].timestamp, 3);
}

TEST(Ingest, MovieLensShapedStats) {
  std::ostringstream log, titles;
  for (std::size_t i = 1; i <= 1682; ++i) titles << i << "\tMovie " << i << "\n";
  for (std::size_t i = 0; i < 100000; ++i)
    log << (i % 943 + 1) << '\t' << ((i * 7919) % 1682 + 1) << "\t4\t" << (881250949 + i) << '\n';
  std::istringstream l(log.str()), t(titles.str());
  const auto p = parse_interactions(l, t);
  const auto stats = build_sequences(p.log, p.catalog).stats();
  EXPECT_EQ(stats, (CorpusStats{943, 1682, 100000}));
}

TEST(Sequences, EqualTimestampsKeepInputOrder) {
  const auto p = parse("u\tb\t1\t5\nu\ta\t1\t5\nu\tc\t1\t4\n", "a\tA\nb\tB\nc\tC\n");
  EXPECT_EQ(build_sequences(p.log, p.catalog).sequence("u"), (std::vector<ItemId>{"c", "b", "a"}));
}

TEST(Sequences, SingleInteractionUser) {
  const auto p = parse("solo\ti1\t1\t9\n", "i1\tA\n");
  EXPECT_EQ(build_sequences(p.log, p.catalog).sequence("solo").size(), 1u);
}

TEST(Sequences, NumericIdsSortNaturally) {
  const auto p = parse("10\ti\t1\t1\n9\ti\t1\t1\nx\ti\t1\t1\n100\ti\t1\t1\n", "i\tA\n");
  EXPECT_EQ(build_sequences(p.log, p.catalog).users(), (std::vector<UserId>{"9", "10", "100", "x"}));
}

TEST(Sequences, MinInteractionFilter) {
  auto c = adaptrec::testing::movie_corpus();
  c.sequences["9"] = {"1", "2"};
  const auto f = filter_min_interactions(c, 3);
  EXPECT_FALSE(f.has_user("9"));
  EXPECT_EQ(f.sequences.size(), 8u);
}

TEST(Split, FloorArithmetic) {
  const auto a = split_sequence(20, {}, 3);
  EXPECT_EQ(a.train_size(), 16u);
  EXPECT_EQ(a.valid_size(), 2u);
  EXPECT_EQ(a.test_size(), 2u);
  const auto b = split_sequence(25, {}, 3);
  EXPECT_EQ(b.train_size(), 20u);
  EXPECT_EQ(b.valid_size(), 2u);
  EXPECT_EQ(b.test_size(), 3u);
  const auto c = split_sequence(30, {}, 3);
  EXPECT_EQ(c.valid_size(), 3u);
}

TEST(Split, ShortSequenceIsAllTrain) {
  const auto r = split_sequence(2, {}, 3);
  EXPECT_FALSE(r.evaluable);
  EXPECT_EQ(r.train_size(), 2u);
  EXPECT_EQ(r.test_size(), 0u);
}

TEST(Split, PartitionsEverySequence) {
  const std::vector<SplitRatios> ratios = {{0.8, 0.1, 0.1}, {0.6, 0.2, 0.2}, {0.7, 0.0, 0.3}, {1.0, 0.0, 0.0}};
  for (const auto& r : ratios)
    for (std::size_t n = 0; n < 300; ++n) {
      const auto s = split_sequence(n, r, 3);
      EXPECT_LE(s.train_end, s.valid_end);
      EXPECT_LE(s.valid_end, s.length);
      EXPECT_EQ(s.train_size() + s.valid_size() + s.test_size(), n);
    }
}

TEST(Split, RejectsBadParameters) {
  const auto c = adaptrec::testing::movie_corpus();
  EXPECT_THROW(chronological_split(c, {0.8, 0.1, 0.2}), ConfigError);
  EXPECT_THROW(chronological_split(c, {}, 2), ConfigError);
  EXPECT_THROW(chronological_split(c, {}, 3, 0), ConfigError);
}

TEST(Split, TrainViewKeepsPrefix) {
  const auto c = adaptrec::testing::movie_corpus();
  const auto split = chronological_split(c);
  const auto train = train_view(c, split);
  EXPECT_EQ(train.sequence("2"), (std::vector<ItemId>{"1", "2", "25", "4"}));
  EXPECT_EQ(train.sequence("1"), (std::vector<ItemId>{"1", "2", "3"}));
}

// Frozen from tests/oracles/reference_sampler.py.
TEST(Candidates, MatchesReferenceSampler) {
  const auto c = numbered_corpus(50, ids(1, 10));
  const auto set = build_candidate_set(c, "u", "10", 42);
  EXPECT_EQ(set.negatives, (std::vector<ItemId>{"17", "20", "43", "30", "12", "29", "25", "24", "41", "28", "46", "13",
                                                "47", "22", "34", "18", "33", "21", "32"}));
  EXPECT_EQ(set.order, (std::vector<ItemId>{"33", "12", "29", "21", "18", "22", "30", "13", "25", "28", "10", "47",
                                            "32", "24", "34", "41", "17", "20", "43", "46"}));
}

TEST(Candidates, ExactlyTwentyEligibleIsForced) {
  const auto c = numbered_corpus(25, ids(1, 5));
  const auto set = build_candidate_set(c, "u", "25", 3);
  const std::set<ItemId> got(set.negatives.begin(), set.negatives.end());
  const auto want = ids(6, 24);
  EXPECT_EQ(got, std::set<ItemId>(want.begin(), want.end()));
}

TEST(Candidates, TooFewEligibleIsAnError) {
  EXPECT_THROW(build_candidate_set(numbered_corpus(24, ids(1, 5)), "u", "24", 1), Error);
  EXPECT_THROW(build_candidate_set(numbered_corpus(50, ids(1, 5)), "u", "999", 1), Error);
}

TEST(Candidates, DuplicateTitlesAreNeverBothChosen) {
  auto c = numbered_corpus(60, ids(1, 3));
  for (std::size_t i = 31; i <= 60; ++i) c.catalog.titles[std::to_string(i)] = "  title " + std::to_string(i - 30) + "!";
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto set = build_candidate_set(c, "u", "4", seed);
    std::set<std::string> keys;
    for (const auto& id : set.order) EXPECT_TRUE(keys.insert(normalize_title(c.catalog.title(id))).second);
  }
}

TEST(Candidates, DeterministicAndLawful) {
  const auto c = adaptrec::testing::synthetic_corpus(40, 120, 5, 30, 11);
  for (const auto& [u, seq] : c.sequences) {
    const auto a = build_candidate_set(c, u, seq.back(), derive_seed(9, u));
    EXPECT_EQ(a, build_candidate_set(c, u, seq.back(), derive_seed(9, u)));
    EXPECT_EQ(a.order.size(), kCandidateSetSize);
    EXPECT_EQ(std::count(a.order.begin(), a.order.end(), seq.back()), 1);
    for (const auto& n : a.negatives) EXPECT_EQ(std::count(seq.begin(), seq.end(), n), 0);
  }
}

TEST(Candidates, JsonRoundTrip) {
  const auto c = numbered_corpus(50, ids(1, 10));
  const auto set = build_candidate_set(c, "u", "10", 42);
  EXPECT_EQ(candidate_set_from_json(json::parse(to_json(set).dump())), set);
}

TEST(Corpus, JsonRoundTrip) {
  const auto c = adaptrec::testing::movie_corpus();
  const auto back = corpus_from_json(json::parse(to_json(c).dump()));
  EXPECT_EQ(back.sequences, c.sequences);
  EXPECT_EQ(back.catalog.titles, c.catalog.titles);
}

TEST(Common, ReferenceGeneratorValues) {
  // Frozen from tests/oracles/reference_sampler.py.
  EXPECT_EQ(derive_seed(42, "u7"), 16402406861349790965ull);
  Rng rng(5489);
  std::uint64_t v = 0;
  for (int i = 0; i < 10000; ++i) v = rng.next();
  EXPECT_EQ(v, 9981545732273789042ull);
}

TEST(Common, NormalizeTitle) {
  EXPECT_EQ(normalize_title("  The   Notebook.  "), "the notebook");
  EXPECT_EQ(normalize_title("Se7en (1995)"), "se7en (1995)");
  EXPECT_TRUE(valid_utf8("Am\xc3\xa9lie"));
  EXPECT_FALSE(valid_utf8("Am\xc3"));
}
