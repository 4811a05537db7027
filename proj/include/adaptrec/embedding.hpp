#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adaptrec/common.hpp"
#include "adaptrec/corpus.hpp"
#include "adaptrec/http.hpp"

namespace adaptrec {

using EmbeddingVector = std::vector<double>;

enum class EmbedderKind { hashed, endpoint };

struct EmbedderSpec {
  EmbedderKind kind = EmbedderKind::hashed;
  std::size_t dimension = 256;
  bool unit_normalize = true;
  std::uint64_t hash_seed = 2024;
  EndpointConfig endpoint;  // used when kind == endpoint

  void validate() const {
    if (dimension < 2) throw ConfigError("embedding dimension must be >= 2");
    if (kind == EmbedderKind::endpoint) endpoint.validate();
  }

  /// Stable identifier recorded next to retrieval results.
  std::string fingerprint() const {
    std::string f = kind == EmbedderKind::hashed ? "hashed" : "endpoint:" + endpoint.url + ":" + endpoint.model;
    f += ":d=" + std::to_string(dimension);
    if (kind == EmbedderKind::hashed) f += ":seed=" + std::to_string(hash_seed);
    f += unit_normalize ? ":unit" : ":raw";
    return f;
  }
};

/// Raised when the external embedder cannot produce a vector. Always safe to retry.
class EmbeddingError : public Error {
public:
  explicit EmbeddingError(const std::string& cause) : Error("embedding endpoint failed: " + cause) {}
  bool retriable() const noexcept { return true; }
};

/// Bucket of one title under the hashed embedder.
inline std::size_t hashed_bucket(std::string_view title, std::uint64_t seed, std::size_t dimension) {
  return static_cast<std::size_t>(mix64(fnv1a64(title) ^ seed) % dimension);
}

inline void normalize_in_place(EmbeddingVector& v) {
  double sq = 0;
  for (double x : v) sq += x * x;
  if (sq <= 0) throw Error("cannot normalize a zero embedding");
  const double inv = 1.0 / std::sqrt(sq);
  for (double& x : v) x *= inv;
}

namespace detail {

inline EmbeddingVector embed_via_endpoint(const std::vector<std::string>& titles, const EmbedderSpec& spec) {
  HttpResult res;
  try {
    res = JsonPoster(spec.endpoint).post("/embeddings", {{"model", spec.endpoint.model}, {"input", titles}});
  } catch (const TransportError& e) {
    throw EmbeddingError(e.what());
  } catch (const HttpStatusError& e) {
    throw EmbeddingError(e.what());
  }
  EmbeddingVector sum(spec.dimension, 0.0);
  try {
    const auto& data = res.body.at("data");
    if (data.size() != titles.size())
      throw EmbeddingError("expected " + std::to_string(titles.size()) + " vectors, got " +
                           std::to_string(data.size()));
    for (const auto& entry : data) {
      const auto v = entry.at("embedding").get<std::vector<double>>();
      if (v.size() != spec.dimension)
        throw EmbeddingError("dimension " + std::to_string(v.size()) + " != configured " +
                             std::to_string(spec.dimension));
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) throw EmbeddingError("non-finite component");
        sum[i] += v[i];
      }
    }
  } catch (const json::exception& e) {
    throw EmbeddingError(std::string("malformed response: ") + e.what());
  }
  return sum;
}

}  // namespace detail

/// Sequence embedding from item titles. The hashed embedder adds one unit
/// count per title in the title's bucket; the endpoint embedder sums the
/// returned per-title vectors.
inline EmbeddingVector embed_sequence(std::span<const ItemId> seq, const ItemCatalog& catalog,
                                      const EmbedderSpec& spec) {
  if (seq.empty()) throw Error("embed_sequence: empty sequence");
  spec.validate();
  EmbeddingVector v;
  if (spec.kind == EmbedderKind::hashed) {
    v.assign(spec.dimension, 0.0);
    for (const auto& item : seq) v[hashed_bucket(catalog.title(item), spec.hash_seed, spec.dimension)] += 1.0;
  } else {
    std::vector<std::string> titles;
    titles.reserve(seq.size());
    for (const auto& item : seq) titles.push_back(catalog.title(item));
    v = detail::embed_via_endpoint(titles, spec);
  }
  if (spec.unit_normalize) normalize_in_place(v);
  return v;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw Error("cosine_similarity: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                std::to_string(b.size()) + ")");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) throw Error("cosine_similarity: zero-norm vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

using EmbeddingTable = std::map<UserId, EmbeddingVector, IdLess>;

inline EmbeddingTable embed_users(const SequenceCorpus& corpus, const EmbedderSpec& spec) {
  EmbeddingTable table;
  for (const auto& [user, seq] : corpus.sequences)
    if (!seq.empty()) table.emplace(user, embed_sequence(seq, corpus.catalog, spec));
  return table;
}

}  // namespace adaptrec
