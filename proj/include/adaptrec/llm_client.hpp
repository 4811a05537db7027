#pragma once

// Completion backends (HTTP chat-completions, scripted mock, callable,
// transcript replay), the JSONL transcript log, and matching of generated
// text back onto a candidate set.

#include <chrono>
#include <deque>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "json.hpp"

#include "adaptrec/common.hpp"
#include "adaptrec/corpus.hpp"
#include "adaptrec/http.hpp"

namespace adaptrec {

using nlohmann::json;

struct CompletionRequest {
  std::string prompt;
  int max_tokens = 512;
  double temperature = 0.0;
  std::vector<std::string> stop;
  std::string request_id;
};

struct CompletionResponse {
  std::string text;
  double latency_ms = 0;
  std::string backend_id;
  bool transcript_persisted = false;
  int attempts = 1;
};

inline std::string prompt_hash(std::string_view prompt) { return hex64(fnv1a64(prompt)); }

class CompletionBackend {
public:
  virtual ~CompletionBackend() = default;
  virtual CompletionResponse complete(const CompletionRequest& req) = 0;
  virtual std::string id() const = 0;
};

/// Transport failure marker for scripted backends.
struct ScriptedFailure {
  std::string reason = "injected transport failure";
};

/// Returns scripted replies in order; throws once the script runs out.
class ScriptedBackend final : public CompletionBackend {
public:
  using Entry = std::variant<std::string, ScriptedFailure>;

  ScriptedBackend() = default;
  explicit ScriptedBackend(std::vector<Entry> script) : script_(script.begin(), script.end()) {}
  ScriptedBackend(std::initializer_list<std::string> replies) {
    for (const auto& r : replies) script_.emplace_back(r);
  }

  void push(Entry e) {
    std::lock_guard lock(mu_);
    script_.push_back(std::move(e));
  }
  std::size_t remaining() const {
    std::lock_guard lock(mu_);
    return script_.size();
  }

  CompletionResponse complete(const CompletionRequest&) override {
    std::lock_guard lock(mu_);
    if (script_.empty()) throw Error("scripted backend exhausted");
    Entry e = std::move(script_.front());
    script_.pop_front();
    if (auto* f = std::get_if<ScriptedFailure>(&e)) throw TransportError(f->reason, 1);
    return {std::get<std::string>(e), 0.0, id()};
  }
  std::string id() const override { return "scripted"; }

private:
  mutable std::mutex mu_;
  std::deque<Entry> script_;
};

/// Backend driven by a callable; used for the omniscient and off-list mocks.
class FunctionBackend final : public CompletionBackend {
public:
  FunctionBackend(std::string id, std::function<std::string(const CompletionRequest&)> fn)
      : id_(std::move(id)), fn_(std::move(fn)) {}

  CompletionResponse complete(const CompletionRequest& req) override { return {fn_(req), 0.0, id_}; }
  std::string id() const override { return id_; }

private:
  std::string id_;
  std::function<std::string(const CompletionRequest&)> fn_;
};

/// OpenAI-style /chat/completions client.
class HttpCompletionBackend final : public CompletionBackend {
public:
  explicit HttpCompletionBackend(EndpointConfig config) : poster_(std::move(config)) {}

  CompletionResponse complete(const CompletionRequest& req) override {
    json payload = {{"model", poster_.config().model},
                    {"messages", json::array({{{"role", "user"}, {"content", req.prompt}}})},
                    {"max_tokens", req.max_tokens},
                    {"temperature", req.temperature}};
    if (!req.stop.empty()) payload["stop"] = req.stop;
    const HttpResult res = poster_.post("/chat/completions", payload);
    CompletionResponse out;
    try {
      out.text = res.body.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      throw TransportError(std::string("unexpected completion payload: ") + e.what(), res.attempts);
    }
    out.latency_ms = res.latency_ms;
    out.attempts = res.attempts;
    out.backend_id = id();
    return out;
  }
  std::string id() const override { return "http:" + poster_.config().url + ":" + poster_.config().model; }

private:
  JsonPoster poster_;
};

// Transcripts ----------------------------------------------------------------

struct TranscriptRecord {
  std::string request_id;
  std::string prompt_hash;
  std::string response_text;
  double latency_ms = 0;
  int attempt_count = 1;
  std::optional<std::string> error;  // set when the call failed
  std::optional<int> http_status;    // with error, when the endpoint answered non-2xx
};

inline json to_json(const TranscriptRecord& r) {
  json j = {{"request_id", r.request_id},
            {"prompt_hash", r.prompt_hash},
            {"response_text", r.response_text},
            {"latency_ms", r.latency_ms},
            {"attempt_count", r.attempt_count}};
  if (r.error) j["error"] = *r.error;
  if (r.http_status) j["http_status"] = *r.http_status;
  return j;
}

inline TranscriptRecord transcript_record_from_json(const json& j) {
  TranscriptRecord r;
  r.request_id = j.at("request_id").get<std::string>();
  r.prompt_hash = j.at("prompt_hash").get<std::string>();
  r.response_text = j.value("response_text", "");
  r.latency_ms = j.value("latency_ms", 0.0);
  r.attempt_count = j.value("attempt_count", 1);
  if (j.contains("error")) r.error = j.at("error").get<std::string>();
  if (j.contains("http_status")) r.http_status = j.at("http_status").get<int>();
  return r;
}

/// Append-only JSONL log; each record is written and flushed under one lock.
class TranscriptLog {
public:
  TranscriptLog() = default;  // in-memory only
  explicit TranscriptLog(const std::string& path) : out_(std::make_unique<std::ofstream>(path, std::ios::app)) {
    if (!*out_) throw Error("cannot open transcript '" + path + "'");
  }

  void append(const TranscriptRecord& r) {
    const std::string line = to_json(r).dump() + "\n";
    std::lock_guard lock(mu_);
    records_.push_back(r);
    if (out_) {
      *out_ << line;
      out_->flush();
    }
  }

  std::vector<TranscriptRecord> records() const {
    std::lock_guard lock(mu_);
    return records_;
  }

private:
  mutable std::mutex mu_;
  std::unique_ptr<std::ofstream> out_;
  std::vector<TranscriptRecord> records_;
};

inline std::vector<TranscriptRecord> read_transcript(std::istream& in) {
  std::vector<TranscriptRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(transcript_record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad transcript record: ") + e.what(), line_no);
    }
  }
  return out;
}

/// Answers from a recorded transcript by request id. The prompt must hash to
/// the recorded value; recorded transport failures are re-raised.
class ReplayBackend final : public CompletionBackend {
public:
  explicit ReplayBackend(const std::vector<TranscriptRecord>& records) {
    for (const auto& r : records) by_id_[r.request_id] = r;
  }

  CompletionResponse complete(const CompletionRequest& req) override {
    auto it = by_id_.find(req.request_id);
    if (it == by_id_.end()) throw Error("replay: no recorded response for request '" + req.request_id + "'");
    const auto& r = it->second;
    if (r.prompt_hash != prompt_hash(req.prompt))
      throw Error("replay: prompt for '" + req.request_id + "' differs from the recorded one");
    if (r.error && r.http_status) throw HttpStatusError(*r.http_status, *r.error, r.attempt_count);
    if (r.error) throw TransportError(*r.error, r.attempt_count);
    CompletionResponse out;
    out.text = r.response_text;
    out.latency_ms = r.latency_ms;
    out.attempts = r.attempt_count;
    out.backend_id = id();
    return out;
  }
  std::string id() const override { return "replay"; }

private:
  std::unordered_map<std::string, TranscriptRecord> by_id_;
};

/// Calls the backend and appends the exchange (or the failure) to the
/// transcript, if one is given.
inline CompletionResponse complete(CompletionBackend& backend, const CompletionRequest& req,
                                   TranscriptLog* transcript = nullptr) {
  TranscriptRecord rec;
  rec.request_id = req.request_id;
  rec.prompt_hash = prompt_hash(req.prompt);
  try {
    CompletionResponse res = backend.complete(req);
    if (transcript) {
      rec.response_text = res.text;
      rec.latency_ms = res.latency_ms;
      rec.attempt_count = res.attempts;
      transcript->append(rec);
      res.transcript_persisted = true;
    }
    return res;
  } catch (const TransportError& e) {
    if (transcript) {
      rec.error = e.what();
      rec.attempt_count = e.attempts();
      transcript->append(rec);
    }
    throw;
  } catch (const HttpStatusError& e) {
    if (transcript) {
      rec.error = e.body();
      rec.http_status = e.status();
      rec.attempt_count = e.attempts();
      transcript->append(rec);
    }
    throw;
  }
}

// Candidate matching ---------------------------------------------------------

struct MatchResult {
  std::vector<ItemId> ranked_items;
  bool valid = false;
  std::optional<std::string> unmatched_text;

  friend bool operator==(const MatchResult&, const MatchResult&) = default;
};

namespace detail {

/// Lines of the first ``` fenced block, or every line when there is none.
inline std::vector<std::string_view> answer_lines(std::string_view text) {
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).rfind("```", 0) != 0) continue;
    std::vector<std::string_view> inside;
    for (std::size_t k = i + 1; k < lines.size(); ++k) {
      if (trim(lines[k]).rfind("```", 0) == 0) return inside;
      inside.push_back(lines[k]);
    }
    return inside;  // unterminated fence: take the rest
  }
  return lines;
}

/// Strips list markers ("1.", "2)", "-", "*", "[3]"), wrapping quotes and
/// backslash escapes from one answer line.
inline std::string clean_answer_line(std::string_view line) {
  std::string_view s = trim(line);
  std::size_t i = 0;
  if (!s.empty() && (s[0] == '-' || s[0] == '*')) {
    i = 1;
  } else if (!s.empty() && s[0] == '[') {
    const auto close = s.find(']');
    if (close != s.npos && all_digits(s.substr(1, close - 1))) i = close + 1;
  } else {
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    if (i > 0 && i < s.size() && (s[i] == '.' || s[i] == ')') && i + 1 < s.size() && s[i + 1] == ' ')
      ++i;
    else
      i = 0;
  }
  s = trim(s.substr(i));
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '`' && s.back() == '`')))
    s = s.substr(1, s.size() - 2);
  std::string out;
  out.reserve(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (s[k] == '\\' && k + 1 < s.size()) ++k;
    out.push_back(s[k]);
  }
  return out;
}

}  // namespace detail

/// Maps generated text onto the candidate set by normalized title. Valid iff
/// the first answer line names a candidate; unmatched lower lines are dropped.
inline MatchResult match_candidates(std::string_view output, const CandidateSet& candidates,
                                    const ItemCatalog& catalog) {
  std::unordered_map<std::string, ItemId> by_key;
  for (const auto& id : candidates.order) {
    auto [it, inserted] = by_key.emplace(normalize_title(catalog.title(id)), id);
    if (!inserted && it->second != id)
      throw Error("candidate titles '" + catalog.title(it->second) + "' and '" + catalog.title(id) +
                  "' collide after normalization");
  }

  MatchResult out;
  std::string unmatched;
  bool first = true;
  for (std::string_view raw : detail::answer_lines(output)) {
    if (trim(raw).empty()) continue;
    const std::string cleaned = detail::clean_answer_line(raw);
    auto it = by_key.find(normalize_title(cleaned));
    const bool hit = it != by_key.end();
    if (first) out.valid = hit;
    first = false;
    if (!hit) {
      unmatched += (unmatched.empty() ? "" : "\n") + std::string(trim(raw));
      continue;
    }
    if (std::find(out.ranked_items.begin(), out.ranked_items.end(), it->second) == out.ranked_items.end())
      out.ranked_items.push_back(it->second);
  }
  if (!unmatched.empty()) out.unmatched_text = std::move(unmatched);
  return out;
}

}  // namespace adaptrec
