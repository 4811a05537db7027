#pragma once

#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "adaptrec/common.hpp"
#include "adaptrec/corpus.hpp"

namespace adaptrec {

using nlohmann::json;

struct PerSequenceResult {
  UserId user;
  ItemId ground_truth;
  std::optional<std::size_t> predicted_rank;  // 1-based within the candidate set
  bool valid = false;
  std::string provenance;                      // of the demonstrations, if any

  friend bool operator==(const PerSequenceResult&, const PerSequenceResult&) = default;
};

struct EvalReport {
  double hr1 = 0, ndcg5 = 0, ndcg20 = 0, valid_ratio = 0;
  std::size_t n_sequences = 0;
  std::size_t fallback_count = 0;
  std::string config_fingerprint;
  std::uint64_t seed = 0;
};

/// Single-relevant-item NDCG (ideal DCG = 1).
inline double ndcg_at_k(std::optional<std::size_t> rank, std::size_t k) {
  if (!rank || *rank < 1 || *rank > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(*rank) + 1.0);
}

/// Averages over every sequence; invalid generations score 0 but stay in
/// the denominator.
inline EvalReport evaluate_run(std::span<const PerSequenceResult> results) {
  if (results.empty()) throw Error("evaluate_run: no results");
  EvalReport r;
  double hits = 0, n5 = 0, n20 = 0, valid = 0;
  std::size_t fallbacks = 0;
  for (const auto& s : results) {
    if (s.predicted_rank && (*s.predicted_rank < 1 || *s.predicted_rank > kCandidateSetSize))
      throw Error("predicted rank out of range for user '" + s.user + "'");
    const auto rank = s.valid ? s.predicted_rank : std::nullopt;
    hits += (rank && *rank == 1) ? 1.0 : 0.0;
    n5 += ndcg_at_k(rank, 5);
    n20 += ndcg_at_k(rank, 20);
    valid += s.valid ? 1.0 : 0.0;
    fallbacks += s.provenance == "fallback-cosine" ? 1 : 0;
  }
  const double n = static_cast<double>(results.size());
  r.hr1 = hits / n;
  r.ndcg5 = n5 / n;
  r.ndcg20 = n20 / n;
  r.valid_ratio = valid / n;
  r.n_sequences = results.size();
  r.fallback_count = fallbacks;
  return r;
}

/// Result for a model that scores every candidate instead of generating
/// text; it cannot leave the candidate set, so it is always valid.
/// Ties are broken by presentation order.
inline PerSequenceResult rank_by_scores(const CandidateSet& candidates, std::span<const double> scores) {
  if (scores.size() != candidates.order.size()) throw Error("rank_by_scores: one score per candidate required");
  std::size_t gt = candidates.order.size();
  for (std::size_t i = 0; i < candidates.order.size(); ++i)
    if (candidates.order[i] == candidates.ground_truth) gt = i;
  if (gt == candidates.order.size()) throw Error("rank_by_scores: ground truth missing from candidate order");
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > scores[gt] || (scores[i] == scores[gt] && i < gt)) ++rank;
  return {candidates.user, candidates.ground_truth, rank, true, ""};
}

inline json to_json(const PerSequenceResult& r) {
  return {{"user", r.user},
          {"ground_truth", r.ground_truth},
          {"predicted_rank", r.predicted_rank ? json(*r.predicted_rank) : json(nullptr)},
          {"valid", r.valid},
          {"provenance", r.provenance}};
}

inline PerSequenceResult per_sequence_from_json(const json& j) {
  PerSequenceResult r;
  r.user = j.at("user").get<UserId>();
  r.ground_truth = j.at("ground_truth").get<ItemId>();
  if (!j.at("predicted_rank").is_null()) r.predicted_rank = j.at("predicted_rank").get<std::size_t>();
  r.valid = j.at("valid").get<bool>();
  r.provenance = j.value("provenance", "");
  return r;
}

inline json to_json(const EvalReport& r) {
  return {{"hr1", r.hr1},
          {"ndcg5", r.ndcg5},
          {"ndcg20", r.ndcg20},
          {"valid_ratio", r.valid_ratio},
          {"n_sequences", r.n_sequences},
          {"fallback_count", r.fallback_count},
          {"config_fingerprint", r.config_fingerprint},
          {"seed", r.seed}};
}

inline std::string format_table(const EvalReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "| HR@1   | NDCG@5 | NDCG@20 | ValidRatio | Sequences | Fallbacks |\n"
      << "|--------|--------|---------|------------|-----------|-----------|\n"
      << "| " << r.hr1 << " | " << r.ndcg5 << " | " << r.ndcg20 << "  | " << r.valid_ratio << "     | "
      << std::setw(9) << r.n_sequences << " | " << std::setw(9) << r.fallback_count << " |\n";
  return out.str();
}

}  // namespace adaptrec
