#pragma once

// Interaction-log ingestion, per-user chronological sequences, the 8:1:1
// positional split and 20-item leave-one-out candidate sets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "adaptrec/common.hpp"

namespace adaptrec {

using nlohmann::json;

struct ItemCatalog {
  std::map<ItemId, std::string, IdLess> titles;

  bool contains(const ItemId& id) const { return titles.count(id) != 0; }
  std::size_t size() const { return titles.size(); }

  const std::string& title(const ItemId& id) const {
    auto it = titles.find(id);
    if (it == titles.end()) throw Error("unknown item id '" + id + "'");
    return it->second;
  }
};

struct Interaction {
  UserId user;
  ItemId item;
  std::int64_t timestamp = 0;
};

struct InteractionLog {
  std::vector<Interaction> records;
};

/// Column layout of an interaction log. Columns are zero-based; any other
/// columns (a rating, for instance) are ignored.
struct LogFormat {
  char delimiter = '\t';
  std::size_t user_col = 0;
  std::size_t item_col = 1;
  std::size_t timestamp_col = 3;
  bool has_header = false;

  static LogFormat tsv() { return {}; }
  static LogFormat csv() {
    LogFormat f;
    f.delimiter = ',';
    return f;
  }
  static LogFormat from_name(const std::string& name) {
    if (name == "tsv") return tsv();
    if (name == "csv") return csv();
    throw ConfigError("unknown log format '" + name + "' (expected tsv or csv)");
  }
};

struct ParsedInteractions {
  InteractionLog log;
  ItemCatalog catalog;
};

struct CorpusStats {
  std::size_t n_sequences = 0;
  std::size_t n_items = 0;
  std::size_t n_interactions = 0;

  friend bool operator==(const CorpusStats&, const CorpusStats&) = default;
};

namespace detail {

inline std::string read_all(std::istream& in) {
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Splits one record. CSV fields may be double-quoted with "" as an escaped quote.
inline std::vector<std::string> split_fields(std::string_view line, char delim, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (delim == ',' && c == '"') {
      if (quoted && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else {
        quoted = !quoted;
      }
    } else if (c == delim && !quoted) {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (quoted) throw ParseError("unterminated quoted field", line_no);
  fields.push_back(std::move(cur));
  return fields;
}

}  // namespace detail

/// Reads an `id<TAB>title` file.
inline ItemCatalog parse_titles(std::istream& in) {
  const std::string text = detail::read_all(in);
  ItemCatalog catalog;
  std::size_t line_no = 0;
  for (std::string_view line : split_lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    if (!valid_utf8(line)) throw ParseError("title file is not valid UTF-8", line_no);
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) throw ParseError("expected id<TAB>title", line_no);
    const std::string id(trim(line.substr(0, tab)));
    const std::string title(trim(line.substr(tab + 1)));
    if (id.empty()) throw ParseError("empty item id", line_no);
    if (title.empty()) throw ParseError("empty title for item '" + id + "'", line_no);
    if (!catalog.titles.emplace(id, title).second)
      throw ParseError("duplicate item id '" + id + "'", line_no);
  }
  return catalog;
}

inline ParsedInteractions parse_interactions(std::istream& log_in, std::istream& titles_in,
                                             const LogFormat& format = LogFormat::tsv()) {
  ParsedInteractions out;
  out.catalog = parse_titles(titles_in);

  const std::string text = detail::read_all(log_in);
  const std::size_t needed = std::max({format.user_col, format.item_col, format.timestamp_col}) + 1;
  std::size_t line_no = 0;
  bool header_pending = format.has_header;
  for (std::string_view line : split_lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    if (header_pending) {
      header_pending = false;
      continue;
    }
    if (!valid_utf8(line)) throw ParseError("log is not valid UTF-8", line_no);
    auto fields = detail::split_fields(line, format.delimiter, line_no);
    if (fields.size() < needed)
      throw ParseError("expected at least " + std::to_string(needed) + " columns, got " +
                           std::to_string(fields.size()),
                       line_no);
    Interaction rec;
    rec.user = std::string(trim(fields[format.user_col]));
    rec.item = std::string(trim(fields[format.item_col]));
    const std::string_view ts = trim(fields[format.timestamp_col]);
    if (rec.user.empty() || rec.item.empty()) throw ParseError("empty user or item id", line_no);
    const auto [ptr, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), rec.timestamp);
    if (ec != std::errc() || ptr != ts.data() + ts.size())
      throw ParseError("timestamp '" + std::string(ts) + "' is not an integer", line_no);
    out.log.records.push_back(std::move(rec));
  }
  if (out.log.records.empty()) throw ParseError("no records", 0);

  std::set<ItemId, IdLess> missing;
  for (const auto& r : out.log.records)
    if (!out.catalog.contains(r.item)) missing.insert(r.item);
  if (!missing.empty()) {
    std::string ids;
    for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
    throw Error("items referenced in log but missing a title: " + ids);
  }
  return out;
}

struct SequenceCorpus {
  std::map<UserId, std::vector<ItemId>, IdLess> sequences;
  ItemCatalog catalog;

  bool has_user(const UserId& u) const { return sequences.count(u) != 0; }

  const std::vector<ItemId>& sequence(const UserId& u) const {
    auto it = sequences.find(u);
    if (it == sequences.end()) throw Error("unknown user id '" + u + "'");
    return it->second;
  }

  std::vector<UserId> users() const {
    std::vector<UserId> out;
    out.reserve(sequences.size());
    for (const auto& [u, _] : sequences) out.push_back(u);
    return out;
  }

  CorpusStats stats() const {
    CorpusStats s;
    s.n_sequences = sequences.size();
    s.n_items = catalog.size();
    for (const auto& [_, seq] : sequences) s.n_interactions += seq.size();
    return s;
  }

  std::vector<std::string> titles(std::span<const ItemId> items) const {
    std::vector<std::string> out;
    out.reserve(items.size());
    for (const auto& i : items) out.push_back(catalog.title(i));
    return out;
  }
};

/// Groups the log per user and orders each sequence by timestamp; equal
/// timestamps keep their input order.
inline SequenceCorpus build_sequences(const InteractionLog& log, const ItemCatalog& catalog) {
  if (log.records.empty()) throw Error("build_sequences: empty interaction log");
  std::map<UserId, std::vector<const Interaction*>, IdLess> grouped;
  for (const auto& r : log.records) grouped[r.user].push_back(&r);

  SequenceCorpus corpus;
  corpus.catalog = catalog;
  for (auto& [user, recs] : grouped) {
    std::stable_sort(recs.begin(), recs.end(),
                     [](const Interaction* a, const Interaction* b) { return a->timestamp < b->timestamp; });
    auto& seq = corpus.sequences[user];
    seq.reserve(recs.size());
    for (const auto* r : recs) seq.push_back(r->item);
  }
  return corpus;
}

/// Drops users with fewer than `min_interactions` interactions (e.g. the
/// 40-review floor applied to book logs). The catalog is left untouched.
inline SequenceCorpus filter_min_interactions(SequenceCorpus corpus, std::size_t min_interactions) {
  std::erase_if(corpus.sequences, [&](const auto& kv) { return kv.second.size() < min_interactions; });
  return corpus;
}

// Split ----------------------------------------------------------------------

struct SplitRatios {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;
};

/// Positional ranges [0, train_end), [train_end, valid_end), [valid_end, length).
struct SplitRange {
  std::size_t train_end = 0;
  std::size_t valid_end = 0;
  std::size_t length = 0;
  bool evaluable = false;

  std::size_t train_size() const { return train_end; }
  std::size_t valid_size() const { return valid_end - train_end; }
  std::size_t test_size() const { return length - valid_end; }
};

struct SplitCorpus {
  std::map<UserId, SplitRange, IdLess> ranges;
  SplitRatios ratios;
  std::size_t min_len = 3;
  std::size_t history_window = 10;

  const SplitRange& range(const UserId& u) const {
    auto it = ranges.find(u);
    if (it == ranges.end()) throw Error("user '" + u + "' not in split");
    return it->second;
  }
};

inline SplitRange split_sequence(std::size_t n, const SplitRatios& ratios, std::size_t min_len) {
  SplitRange r;
  r.length = n;
  if (n < min_len) {
    r.train_end = r.valid_end = n;
    return r;
  }
  // The epsilon keeps products such as 0.1 * 30 from flooring one short.
  const auto part = [n](double ratio) {
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
  };
  r.train_end = part(ratios.train);
  r.valid_end = r.train_end + part(ratios.valid);
  r.evaluable = true;
  return r;
}

inline SplitCorpus chronological_split(const SequenceCorpus& corpus, SplitRatios ratios = {},
                                       std::size_t min_len = 3, std::size_t history_window = 10) {
  if (corpus.sequences.empty()) throw Error("chronological_split: corpus is empty");
  if (ratios.train < 0 || ratios.valid < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.valid + ratios.test - 1.0) > 1e-9)
    throw ConfigError("split ratios must be non-negative and sum to 1");
  if (min_len < 3) throw ConfigError("min_len must be at least 3");
  if (history_window < 1) throw ConfigError("history_window must be at least 1");

  SplitCorpus split;
  split.ratios = ratios;
  split.min_len = min_len;
  split.history_window = history_window;
  for (const auto& [user, seq] : corpus.sequences) split.ranges[user] = split_sequence(seq.size(), ratios, min_len);
  return split;
}

/// Corpus restricted to each user's train prefix; users with an empty
/// prefix are dropped.
inline SequenceCorpus train_view(const SequenceCorpus& corpus, const SplitCorpus& split) {
  SequenceCorpus out;
  out.catalog = corpus.catalog;
  for (const auto& [user, seq] : corpus.sequences) {
    const auto& r = split.range(user);
    if (r.train_end == 0) continue;
    out.sequences.emplace(user, std::vector<ItemId>(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(r.train_end)));
  }
  return out;
}

// Candidate sets -------------------------------------------------------------

inline constexpr std::size_t kCandidateSetSize = 20;
inline constexpr std::size_t kNegativeCount = kCandidateSetSize - 1;

struct CandidateSet {
  UserId user;
  ItemId ground_truth;
  std::vector<ItemId> negatives;  // draw order
  std::vector<ItemId> order;      // presentation order, ground truth included
  std::uint64_t seed = 0;

  friend bool operator==(const CandidateSet&, const CandidateSet&) = default;
};

/// Draws 19 negatives uniformly without replacement from the catalog minus
/// the user's full sequence, then shuffles the 20 candidates. Items whose
/// normalized title collides with an already chosen candidate are skipped so
/// generated titles can always be matched back unambiguously.
inline CandidateSet build_candidate_set(const SequenceCorpus& corpus, const UserId& user, const ItemId& target,
                                        std::uint64_t seed) {
  if (!corpus.catalog.contains(target)) throw Error("target item '" + target + "' not in catalog");
  const auto& history = corpus.sequence(user);
  const std::unordered_set<ItemId> seen(history.begin(), history.end());

  std::vector<ItemId> pool;
  pool.reserve(corpus.catalog.size());
  for (const auto& [id, _] : corpus.catalog.titles)
    if (id != target && !seen.count(id)) pool.push_back(id);
  if (pool.size() < kNegativeCount)
    throw Error("user '" + user + "' has only " + std::to_string(pool.size()) +
                " eligible negatives; 19 are required");

  Rng rng(seed);
  std::unordered_set<std::string> keys{normalize_title(corpus.catalog.title(target))};
  std::size_t chosen = 0, end = pool.size();
  while (chosen < kNegativeCount) {
    if (chosen == end)
      throw Error("user '" + user + "': not enough negatives with distinct titles");
    const std::size_t j = chosen + static_cast<std::size_t>(rng.below(end - chosen));
    std::swap(pool[chosen], pool[j]);
    if (keys.insert(normalize_title(corpus.catalog.title(pool[chosen]))).second) {
      ++chosen;
    } else {
      std::swap(pool[chosen], pool[--end]);
    }
  }

  CandidateSet set;
  set.user = user;
  set.ground_truth = target;
  set.seed = seed;
  set.negatives.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(kNegativeCount));
  set.order.reserve(kCandidateSetSize);
  set.order.push_back(target);
  set.order.insert(set.order.end(), set.negatives.begin(), set.negatives.end());
  rng.shuffle(std::span<ItemId>(set.order));
  return set;
}

// Serialization --------------------------------------------------------------

inline json to_json(const CorpusStats& s) {
  return {{"n_sequences", s.n_sequences}, {"n_items", s.n_items}, {"n_interactions", s.n_interactions}};
}

inline json to_json(const SequenceCorpus& c) {
  json seqs = json::object(), items = json::object();
  for (const auto& [u, s] : c.sequences) seqs[u] = s;
  for (const auto& [i, t] : c.catalog.titles) items[i] = t;
  // nlohmann objects sort keys lexicographically; keep the id order explicit.
  json user_order = c.users();
  return {{"users", user_order}, {"sequences", seqs}, {"catalog", items}};
}

inline SequenceCorpus corpus_from_json(const json& j) {
  SequenceCorpus c;
  for (const auto& [id, title] : j.at("catalog").items()) c.catalog.titles.emplace(id, title.get<std::string>());
  for (const auto& [u, s] : j.at("sequences").items()) c.sequences.emplace(u, s.get<std::vector<ItemId>>());
  return c;
}

inline json to_json(const SplitCorpus& s) {
  json users = json::array();
  for (const auto& [u, r] : s.ranges)
    users.push_back({{"user", u},
                     {"train", {0, r.train_end}},
                     {"valid", {r.train_end, r.valid_end}},
                     {"test", {r.valid_end, r.length}},
                     {"evaluable", r.evaluable}});
  return {{"ratios", {s.ratios.train, s.ratios.valid, s.ratios.test}},
          {"min_len", s.min_len},
          {"history_window", s.history_window},
          {"users", users}};
}

inline json to_json(const CandidateSet& c) {
  return {{"user", c.user},
          {"ground_truth", c.ground_truth},
          {"negatives", c.negatives},
          {"order", c.order},
          {"seed", c.seed}};
}

inline CandidateSet candidate_set_from_json(const json& j) {
  CandidateSet c;
  c.user = j.at("user").get<UserId>();
  c.ground_truth = j.at("ground_truth").get<ItemId>();
  c.negatives = j.at("negatives").get<std::vector<ItemId>>();
  c.order = j.at("order").get<std::vector<ItemId>>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace adaptrec
