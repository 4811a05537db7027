#pragma once

// Coarse similar-user retrieval: top-N by cosine over sequence embeddings,
// and a seeded random pool used as the no-retrieval ablation.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "adaptrec/corpus.hpp"
#include "adaptrec/embedding.hpp"

namespace adaptrec {

enum class RetrievalMode { similarity, random };

inline std::string to_string(RetrievalMode m) { return m == RetrievalMode::similarity ? "similarity" : "random"; }

struct PoolMember {
  UserId user;
  double score = 0.0;

  friend bool operator==(const PoolMember&, const PoolMember&) = default;
};

struct SimilarUserPool {
  UserId target;
  std::vector<PoolMember> members;  // best first
  std::size_t n = 0;                // requested size
  RetrievalMode mode = RetrievalMode::similarity;
  std::string embedder;             // fingerprint, similarity mode only
  std::optional<std::uint64_t> seed;
  std::optional<std::string> warning;

  std::size_t size() const { return members.size(); }
  std::vector<UserId> users() const {
    std::vector<UserId> out;
    for (const auto& m : members) out.push_back(m.user);
    return out;
  }
};

/// Ranking rule shared by retrieval and fallback: higher score first, then ascending id.
inline bool better_member(const PoolMember& a, const PoolMember& b) {
  if (a.score != b.score) return a.score > b.score;
  return IdLess{}(a.user, b.user);
}

/// Cosine is scale-invariant, so retrieval embeds without normalization:
/// raw hashed counts are small integers and keep mathematically equal
/// similarities bit-equal.
inline EmbedderSpec ranking_spec(EmbedderSpec spec) {
  spec.unit_normalize = false;
  return spec;
}

/// Sort key monotone in cosine: cos*|cos| = dot*|dot| / (|a|^2 |b|^2). With
/// integer inputs every operand is exact and the single division is
/// correctly rounded, so equal cosines give equal keys.
inline double similarity_key(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("similarity_key: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) throw Error("similarity_key: zero-norm vector");
  return dot * std::abs(dot) / (na * nb);
}

/// Top-n members of `candidates` by cosine against `target_embedding`.
/// The target itself is skipped if present in the table.
inline SimilarUserPool top_n_similar(const UserId& target, const EmbeddingVector& target_embedding,
                                     const EmbeddingTable& candidates, std::size_t n) {
  if (n < 1) throw ConfigError("retrieval N must be >= 1");
  std::vector<PoolMember> scored;  // score holds the sort key until the cut
  scored.reserve(candidates.size());
  for (const auto& [user, emb] : candidates)
    if (user != target) scored.push_back({user, similarity_key(target_embedding, emb)});

  const std::size_t keep = std::min(n, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                    better_member);
  scored.resize(keep);
  for (auto& m : scored) m.score = cosine_similarity(target_embedding, candidates.at(m.user));

  SimilarUserPool pool;
  pool.target = target;
  pool.members = std::move(scored);
  pool.n = n;
  pool.mode = RetrievalMode::similarity;
  return pool;
}

/// Similarity computed over the sequences in `corpus`; pass the train view
/// to keep held-out interactions out of retrieval.
inline SimilarUserPool top_n_similar(const UserId& target, const SequenceCorpus& corpus, const EmbedderSpec& spec,
                                     std::size_t n) {
  if (!corpus.has_user(target)) throw Error("retrieval target '" + target + "' not in corpus");
  if (corpus.sequences.size() < 2) throw Error("retrieval needs at least two users");
  const EmbeddingTable table = embed_users(corpus, ranking_spec(spec));
  auto pool = top_n_similar(target, table.at(target), table, n);
  pool.embedder = spec.fingerprint();
  return pool;
}

/// n users drawn uniformly without replacement from `candidates` minus the
/// target. Scores are 0. n is clamped to the eligible count.
inline SimilarUserPool random_pool(const UserId& target, const std::vector<UserId>& candidates, std::size_t n,
                                   std::uint64_t seed) {
  if (n < 1) throw ConfigError("retrieval N must be >= 1");
  std::vector<UserId> eligible;
  eligible.reserve(candidates.size());
  for (const auto& u : candidates)
    if (u != target) eligible.push_back(u);
  std::sort(eligible.begin(), eligible.end(), IdLess{});

  SimilarUserPool pool;
  pool.target = target;
  pool.n = n;
  pool.mode = RetrievalMode::random;
  pool.seed = seed;
  if (n > eligible.size())
    pool.warning = "requested " + std::to_string(n) + " users but only " + std::to_string(eligible.size()) +
                   " are eligible; clamped";
  Rng rng(seed);
  for (auto& u : rng.sample(std::move(eligible), n)) pool.members.push_back({std::move(u), 0.0});
  return pool;
}

inline SimilarUserPool random_pool(const UserId& target, const SequenceCorpus& corpus, std::size_t n,
                                   std::uint64_t seed) {
  if (!corpus.has_user(target)) throw Error("retrieval target '" + target + "' not in corpus");
  if (corpus.sequences.size() < 2) throw Error("retrieval needs at least two users");
  return random_pool(target, corpus.users(), n, seed);
}

inline json to_json(const SimilarUserPool& p) {
  json members = json::array();
  for (const auto& m : p.members) members.push_back({{"user", m.user}, {"score", m.score}});
  json j = {{"target", p.target}, {"mode", to_string(p.mode)}, {"n", p.n}, {"members", members}};
  j["embedder"] = p.embedder.empty() ? json(nullptr) : json(p.embedder);
  j["seed"] = p.seed ? json(*p.seed) : json(nullptr);
  if (p.warning) j["warning"] = *p.warning;
  return j;
}

}  // namespace adaptrec
