#pragma once

// Shared fixtures and independent oracles for the test suites. Nothing here
// calls into the code path it is used to check.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "adaptrec/corpus.hpp"
#include "adaptrec/metrics.hpp"

namespace adaptrec::testing {

inline const std::vector<std::string>& movie_titles() {
  static const std::vector<std::string> titles = {
      "Titanic",           "The Notebook",       "Pride and Prejudice", "The Lord of the Rings",
      "Avatar",            "The Sound of Music", "Casablanca",          "Inception",
      "The Matrix",        "Gladiator",          "Braveheart",          "Forrest Gump",
      "Jurassic Park",     "The Godfather",      "Pulp Fiction",        "Fight Club",
      "Star Wars",         "Alien",              "Heat",                "Se7en (1995)",
      "Amelie",            "Spirited Away",      "Toy Story",           "Up",
      "Notting Hill",      "Love Actually",      "The Princess Bride",  "Roman Holiday",
      "Sense and Sensibility", "Atonement"};
  return titles;
}

/// 30-title movie catalog (ids "1".."30") with eight users. User "1" is the
/// romance fan used as the prompt target; users "2".."8" serve as
/// demonstrations and pool members.
inline SequenceCorpus movie_corpus() {
  SequenceCorpus c;
  const auto& titles = movie_titles();
  for (std::size_t i = 0; i < titles.size(); ++i) c.catalog.titles.emplace(std::to_string(i + 1), titles[i]);
  c.sequences = {
      {"1", {"1", "2", "3", "4"}},
      {"2", {"1", "2", "25", "4", "26"}},
      {"3", {"3", "29", "30", "2", "4"}},
      {"4", {"9", "8", "17", "18", "5"}},
      {"5", {"27", "28", "1", "26", "4"}},
      {"6", {"14", "15", "16", "19", "20"}},
      {"7", {"21", "22", "23", "24", "4"}},
      {"8", {"10", "11", "12", "13", "4"}},
  };
  return c;
}

/// Deterministic synthetic corpus: users prefer one of `genres` item blocks,
/// so similar users share titles. Titles are unique.
inline SequenceCorpus synthetic_corpus(std::size_t users, std::size_t items, std::size_t min_len, std::size_t max_len,
                                       std::uint64_t seed, std::size_t genres = 5) {
  std::mt19937_64 gen(seed);
  SequenceCorpus c;
  for (std::size_t i = 1; i <= items; ++i)
    c.catalog.titles.emplace(std::to_string(i), "Item " + std::to_string(i) + " (genre " +
                                                    std::to_string(i % genres) + ")");
  for (std::size_t u = 1; u <= users; ++u) {
    const std::size_t genre = gen() % genres;
    const std::size_t len = min_len + gen() % (max_len - min_len + 1);
    std::vector<ItemId> seq;
    while (seq.size() < len) {
      std::size_t item = 1 + gen() % items;
      if (gen() % 4 != 0) item = 1 + ((item / genres) * genres + genre) % items;
      const auto id = std::to_string(item);
      if (std::find(seq.begin(), seq.end(), id) == seq.end()) seq.push_back(id);
    }
    c.sequences.emplace(std::to_string(u), std::move(seq));
  }
  return c;
}

/// Writes `corpus` as a TSV log (user, item, rating, timestamp) plus title file.
inline void write_corpus_files(const SequenceCorpus& corpus, const std::filesystem::path& log,
                               const std::filesystem::path& titles) {
  std::ofstream l(log), t(titles);
  std::int64_t ts = 1000;
  for (const auto& [u, seq] : corpus.sequences)
    for (const auto& item : seq) l << u << '\t' << item << "\t4\t" << ts++ << '\n';
  for (const auto& [id, title] : corpus.catalog.titles) t << id << '\t' << title << '\n';
}

// Oracles ------------------------------------------------------------------

/// Title bucket under the hashed embedder, restated from its definition:
/// FNV-1a 64 of the title, xor seed, splitmix64 finalizer, mod d.
inline std::size_t reference_bucket(const std::string& title, std::uint64_t seed, std::size_t d) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : title) h = (h ^ c) * 1099511628211ull;
  std::uint64_t x = (h ^ seed) + 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return static_cast<std::size_t>((x ^ (x >> 31)) % d);
}

inline std::vector<long long> reference_counts(const SequenceCorpus& c, const std::vector<ItemId>& seq,
                                               std::uint64_t seed, std::size_t d) {
  std::vector<long long> v(d, 0);
  for (const auto& item : seq) ++v[reference_bucket(c.catalog.titles.at(item), seed, d)];
  return v;
}

/// Full-sort retrieval oracle over integer bucket counts. Cosines are
/// compared exactly: cos(t,a) > cos(t,b) iff dot_a^2 * |b|^2 > dot_b^2 * |a|^2
/// (counts are non-negative, so dots are too). Ties go to the smaller id.
inline std::vector<UserId> brute_force_neighbours(const SequenceCorpus& c, const UserId& target, std::uint64_t seed,
                                                  std::size_t d) {
  struct Row {
    UserId user;
    __int128 dot, norm;
  };
  const auto t = reference_counts(c, c.sequences.at(target), seed, d);
  std::vector<Row> rows;
  for (const auto& [u, seq] : c.sequences) {
    if (u == target) continue;
    const auto v = reference_counts(c, seq, seed, d);
    Row r{u, 0, 0};
    for (std::size_t i = 0; i < d; ++i) {
      r.dot += static_cast<__int128>(t[i]) * v[i];
      r.norm += static_cast<__int128>(v[i]) * v[i];
    }
    rows.push_back(r);
  }
  const auto numeric_less = [](const UserId& a, const UserId& b) {
    const bool na = !a.empty() && std::all_of(a.begin(), a.end(), ::isdigit);
    const bool nb = !b.empty() && std::all_of(b.begin(), b.end(), ::isdigit);
    if (na && nb) return std::stoull(a) < std::stoull(b);
    if (na != nb) return na;
    return a < b;
  };
  std::stable_sort(rows.begin(), rows.end(), [&](const Row& a, const Row& b) {
    const __int128 lhs = a.dot * a.dot * b.norm, rhs = b.dot * b.dot * a.norm;
    if (lhs != rhs) return lhs > rhs;
    return numeric_less(a.user, b.user);
  });
  std::vector<UserId> out;
  for (const auto& r : rows) out.push_back(r.user);
  return out;
}

inline double naive_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  long double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<long double>(a[i]) * b[i];
    na += static_cast<long double>(a[i]) * a[i];
    nb += static_cast<long double>(b[i]) * b[i];
  }
  return static_cast<double>(dot / std::sqrt(na * nb));
}

/// Metric scorer written from the definitions: hit at rank 1, gain
/// 1/log2(rank+1) inside the cutoff, invalid rows contribute zero.
struct BruteForceMetrics {
  double hr1, ndcg5, ndcg20, valid_ratio;
};

inline BruteForceMetrics brute_force_metrics(const std::vector<PerSequenceResult>& rows) {
  BruteForceMetrics m{0, 0, 0, 0};
  for (const auto& r : rows) {
    if (r.valid) m.valid_ratio += 1;
    if (!r.valid || !r.predicted_rank) continue;
    const double rank = static_cast<double>(*r.predicted_rank);
    if (rank == 1) m.hr1 += 1;
    if (rank <= 5) m.ndcg5 += std::log(2.0) / std::log(rank + 1);
    if (rank <= 20) m.ndcg20 += std::log(2.0) / std::log(rank + 1);
  }
  const double n = static_cast<double>(rows.size());
  return {m.hr1 / n, m.ndcg5 / n, m.ndcg20 / n, m.valid_ratio / n};
}

inline std::vector<PerSequenceResult> random_results(std::mt19937_64& gen, std::size_t n) {
  std::vector<PerSequenceResult> rows;
  for (std::size_t i = 0; i < n; ++i) {
    PerSequenceResult r;
    r.user = std::to_string(i);
    r.ground_truth = "g";
    r.valid = gen() % 5 != 0;
    if (gen() % 6 != 0) r.predicted_rank = 1 + gen() % 20;
    rows.push_back(r);
  }
  return rows;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace adaptrec::testing
