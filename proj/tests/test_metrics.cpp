#include <gtest/gtest.h>

#include <random>

#include "adaptrec/metrics.hpp"
#include "support/fixtures.hpp"

using namespace adaptrec;

namespace {

PerSequenceResult row(std::string user, std::optional<std::size_t> rank, bool valid) {
  return {std::move(user), "gt", rank, valid, ""};
}

}  // namespace

TEST(Ndcg, Formula) {
  EXPECT_EQ(ndcg_at_k(1, 5), 1.0);
  EXPECT_DOUBLE_EQ(ndcg_at_k(3, 5), 0.5);
  EXPECT_EQ(ndcg_at_k(6, 5), 0.0);
  EXPECT_EQ(ndcg_at_k(std::nullopt, 20), 0.0);
  EXPECT_DOUBLE_EQ(ndcg_at_k(7, 20), 1.0 / 3.0);
}

TEST(EvaluateRun, FourSequenceFixture) {
  const std::vector<PerSequenceResult> rows = {row("a", 1, true), row("b", 3, true), row("c", std::nullopt, false),
                                               row("d", 7, true)};
  const auto r = evaluate_run(rows);
  EXPECT_DOUBLE_EQ(r.hr1, 0.25);
  EXPECT_DOUBLE_EQ(r.ndcg5, 0.375);
  EXPECT_NEAR(r.ndcg20, 0.4583, 1e-4);
  EXPECT_DOUBLE_EQ(r.ndcg20, (1.0 + 0.5 + 1.0 / 3.0) / 4.0);
  EXPECT_DOUBLE_EQ(r.valid_ratio, 0.75);
  EXPECT_EQ(r.n_sequences, 4u);
}

TEST(EvaluateRun, AllPerfect) {
  std::vector<PerSequenceResult> rows(9, row("u", 1, true));
  const auto r = evaluate_run(rows);
  EXPECT_EQ(r.hr1, 1.0);
  EXPECT_EQ(r.ndcg5, 1.0);
  EXPECT_EQ(r.ndcg20, 1.0);
  EXPECT_EQ(r.valid_ratio, 1.0);
}

TEST(EvaluateRun, InvalidRowsScoreZeroEvenWithRank) {
  const std::vector<PerSequenceResult> rows = {row("a", 1, false), row("b", 1, true)};
  EXPECT_DOUBLE_EQ(evaluate_run(rows).hr1, 0.5);
}

TEST(EvaluateRun, Errors) {
  EXPECT_THROW(evaluate_run(std::vector<PerSequenceResult>{}), Error);
  EXPECT_THROW(evaluate_run(std::vector<PerSequenceResult>{row("a", 21, true)}), Error);
  EXPECT_THROW(evaluate_run(std::vector<PerSequenceResult>{row("a", 0, true)}), Error);
}

TEST(EvaluateRun, CountsFallbacks) {
  auto a = row("a", 1, true), b = row("b", 2, true);
  a.provenance = "fallback-cosine";
  b.provenance = "llm-selected";
  EXPECT_EQ(evaluate_run(std::vector{a, b}).fallback_count, 1u);
}

TEST(EvaluateRun, MatchesBruteForceScorer) {
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 100; ++trial) {
    const auto rows = adaptrec::testing::random_results(gen, 1 + gen() % 60);
    const auto r = evaluate_run(rows);
    const auto o = adaptrec::testing::brute_force_metrics(rows);
    EXPECT_NEAR(r.hr1, o.hr1, 1e-12);
    EXPECT_NEAR(r.ndcg5, o.ndcg5, 1e-12);
    EXPECT_NEAR(r.ndcg20, o.ndcg20, 1e-12);
    EXPECT_NEAR(r.valid_ratio, o.valid_ratio, 1e-12);
  }
}

TEST(EvaluateRun, PermutationInvariantAndDominance) {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 100; ++trial) {
    auto rows = adaptrec::testing::random_results(gen, 1 + gen() % 40);
    const auto r = evaluate_run(rows);
    EXPECT_LE(r.hr1, r.ndcg5);
    EXPECT_LE(r.ndcg5, r.ndcg20);
    std::shuffle(rows.begin(), rows.end(), gen);
    const auto s = evaluate_run(rows);
    EXPECT_NEAR(r.ndcg20, s.ndcg20, 1e-12);
    EXPECT_EQ(r.hr1, s.hr1);
  }
}

TEST(ScoreRanker, AlwaysValid) {
  CandidateSet c;
  c.user = "u";
  c.ground_truth = "g";
  c.order = {"a", "g", "b", "c"};
  const std::vector<double> scores{0.9, 0.5, 0.5, 0.1};
  const auto r = rank_by_scores(c, scores);
  EXPECT_TRUE(r.valid);
  EXPECT_EQ(r.predicted_rank, 2u);
  EXPECT_EQ(evaluate_run(std::vector{r}).valid_ratio, 1.0);
  const std::vector<double> wrong{1.0};
  EXPECT_THROW(rank_by_scores(c, wrong), Error);
}

TEST(Report, JsonAndTable) {
  auto r = evaluate_run(std::vector{row("a", 1, true)});
  r.config_fingerprint = "abc";
  const auto j = to_json(r);
  for (const char* key : {"hr1", "ndcg5", "ndcg20", "valid_ratio", "n_sequences", "config_fingerprint", "seed"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_NE(format_table(r).find("| 1.0000 |"), std::string::npos);
  const auto back = per_sequence_from_json(to_json(row("x", std::nullopt, false)));
  EXPECT_EQ(back, row("x", std::nullopt, false));
}
