#pragma once

// Self-adaptive demonstration selection: the backend ranks the retrieved
// pool through the similarity prompt and the top M become demonstrations.
// Any failure degrades to the pool's own cosine order.

#include <charconv>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "adaptrec/llm_client.hpp"
#include "adaptrec/prompting.hpp"
#include "adaptrec/retrieval.hpp"

namespace adaptrec {

enum class Provenance { llm_selected, fallback_cosine, static_random };
enum class SelectionMode { adaptive, fixed };  // fixed: seeded random sample, the static ablation

inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::llm_selected: return "llm-selected";
    case Provenance::fallback_cosine: return "fallback-cosine";
    case Provenance::static_random: return "static-random";
  }
  return "?";
}

inline std::string to_string(SelectionMode m) { return m == SelectionMode::adaptive ? "adaptive" : "static"; }

inline SelectionMode selection_mode_from_string(const std::string& s) {
  if (s == "adaptive") return SelectionMode::adaptive;
  if (s == "static") return SelectionMode::fixed;
  throw ConfigError("unknown selection mode '" + s + "' (expected adaptive or static)");
}

struct DemonstrationSet {
  UserId target;
  std::vector<Demonstration> members;
  std::size_t m = 0;
  Provenance provenance = Provenance::fallback_cosine;
  std::optional<std::string> fallback_reason;

  std::vector<UserId> users() const {
    std::vector<UserId> out;
    for (const auto& d : members) out.push_back(d.user);
    return out;
  }
};

/// What one selection call saw and produced; persisted for replay.
struct SelectionRecord {
  UserId target;
  std::size_t round = 1;
  std::string request_id;
  std::optional<std::string> prompt;
  std::optional<std::string> raw_response;
  std::optional<std::vector<UserId>> parsed;
  std::vector<UserId> selected;
  Provenance provenance = Provenance::fallback_cosine;
  std::optional<std::string> fallback_reason;
};

inline json to_json(const SelectionRecord& r) {
  const auto opt = [](const auto& v) { return v ? json(*v) : json(nullptr); };
  return {{"target", r.target},
          {"round", r.round},
          {"request_id", r.request_id},
          {"prompt", opt(r.prompt)},
          {"raw_response", opt(r.raw_response)},
          {"parsed", opt(r.parsed)},
          {"selected", r.selected},
          {"provenance", to_string(r.provenance)},
          {"fallback_reason", opt(r.fallback_reason)}};
}

/// Similarity-selection prompt. Pool member k (1-based) is shown with its
/// history from `corpus`; `previous` lists an earlier round's choice.
inline PromptInstance render_retrieval_prompt(std::span<const ItemId> target_history, const SimilarUserPool& pool,
                                              const SequenceCorpus& corpus, std::size_t m,
                                              const PromptOptions& opt = {}, const TemplateSet& tpl = {},
                                              const std::vector<UserId>& previous = {}) {
  if (pool.members.empty()) throw Error("render_retrieval_prompt: empty pool");
  const std::size_t select = std::min(m, pool.size());
  std::vector<const std::vector<ItemId>*> histories;
  std::vector<std::size_t> lens;
  for (const auto& mem : pool.members) {
    histories.push_back(&corpus.sequence(mem.user));
    lens.push_back(histories.back()->size());
  }

  std::string previous_text;
  if (!previous.empty()) {
    std::string idx;
    for (const auto& u : previous)
      for (std::size_t k = 0; k < pool.members.size(); ++k)
        if (pool.members[k].user == u) idx += (idx.empty() ? "" : ",") + std::to_string(k + 1);
    if (!idx.empty())
      previous_text = "An earlier selection round chose: " + idx +
                      ". Keep or revise it based on your own judgement.\n\n";
  }

  auto render = [&](std::size_t target_keep, const std::vector<std::size_t>& keeps) {
    std::string blocks;
    for (std::size_t k = 0; k < histories.size(); ++k) {
      if (k) blocks += "\n";
      blocks += "[" + std::to_string(k + 1) + "] " + titled_list(*histories[k], keeps[k], corpus.catalog);
    }
    return tpl.retrieval.render({{"target_history", titled_list(target_history, target_keep, corpus.catalog)},
                                 {"candidate_blocks", blocks},
                                 {"previous_selection", previous_text},
                                 {"select_count", std::to_string(select)}});
  };
  auto [text, est] = detail::fit_budget(render, target_history.size(), lens, opt);

  PromptInstance p;
  p.kind = PromptKind::retrieval;
  p.text = std::move(text);
  p.index_users = pool.users();
  p.demo_count = 0;
  p.token_estimate = est;
  p.template_version = tpl.version;
  return p;
}

/// Pool users named by the first `RANKING:` line, in order, deduplicated and
/// cut to m. nullopt when there is no such line or it names no valid index.
inline std::optional<std::vector<UserId>> parse_selection_response(std::string_view response,
                                                                   const SimilarUserPool& pool, std::size_t m) {
  static constexpr std::string_view kTag = "RANKING:";
  for (std::string_view line : split_lines(response)) {
    std::string upper;
    for (char c : line) upper.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    const auto at = upper.find(kTag);
    if (at == std::string::npos) continue;

    std::vector<UserId> out;
    std::string_view rest = line.substr(at + kTag.size());
    std::size_t i = 0;
    while (i < rest.size() && out.size() < m) {
      if (!std::isdigit(static_cast<unsigned char>(rest[i]))) {
        ++i;
        continue;
      }
      std::size_t value = 0;
      const auto [ptr, ec] = std::from_chars(rest.data() + i, rest.data() + rest.size(), value);
      i = static_cast<std::size_t>(ptr - rest.data());
      if (ec != std::errc() || value < 1 || value > pool.size()) continue;
      const UserId& u = pool.members[value - 1].user;
      if (std::find(out.begin(), out.end(), u) == out.end()) out.push_back(u);
    }
    if (out.empty()) return std::nullopt;
    return out;
  }
  return std::nullopt;
}

struct SelectionContext {
  PromptOptions prompt_options;
  TemplateSet templates;
  TranscriptLog* transcript = nullptr;
  std::string request_id;
  std::uint64_t seed = 0;           // static mode
  std::size_t round = 1;
  std::vector<UserId> previous;     // earlier round's selection, if any
  int max_tokens = 128;
};

struct SelectionOutcome {
  DemonstrationSet demos;
  SelectionRecord record;
};

/// Chooses min(m, |pool|) demonstrations from the pool. Never fails for a
/// non-empty pool: any failure falls back to the pool's retrieval order, and
/// short rankings are padded from it.
inline SelectionOutcome select_similar_users(CompletionBackend& backend, std::span<const ItemId> target_history,
                                             const SimilarUserPool& pool, const SequenceCorpus& corpus, std::size_t m,
                                             SelectionMode mode, const SelectionContext& ctx = {}) {
  if (m < 1) throw ConfigError("M must be >= 1");
  if (pool.members.empty()) throw Error("select_similar_users: empty pool for '" + pool.target + "'");

  SelectionOutcome out;
  auto& rec = out.record;
  rec.target = pool.target;
  rec.round = ctx.round;
  rec.request_id = ctx.request_id;

  const std::size_t want = std::min(m, pool.size());
  std::vector<UserId> chosen;
  Provenance prov = Provenance::fallback_cosine;
  std::optional<std::string> reason;

  const auto pad_from_pool = [&](std::vector<UserId>& ids) {
    for (const auto& mem : pool.members) {
      if (ids.size() >= want) break;
      if (std::find(ids.begin(), ids.end(), mem.user) == ids.end()) ids.push_back(mem.user);
    }
  };

  if (mode == SelectionMode::fixed) {
    Rng rng(ctx.seed);
    chosen = rng.sample(pool.users(), want);
    prov = Provenance::static_random;
  } else if (pool.size() <= m) {
    chosen = pool.users();
    reason = "pool of " + std::to_string(pool.size()) + " is not larger than M=" + std::to_string(m) +
             "; no selection call made";
  } else {
    try {
      const PromptInstance prompt =
          render_retrieval_prompt(target_history, pool, corpus, m, ctx.prompt_options, ctx.templates, ctx.previous);
      rec.prompt = prompt.text;
      CompletionRequest req;
      req.prompt = prompt.text;
      req.request_id = ctx.request_id;
      req.max_tokens = ctx.max_tokens;
      const auto res = complete(backend, req, ctx.transcript);
      rec.raw_response = res.text;
      rec.parsed = parse_selection_response(res.text, pool, m);
      if (!rec.parsed) {
        reason = "unparseable selection response";
      } else {
        chosen = *rec.parsed;
        if (chosen.size() < want) {
          reason = "ranking named " + std::to_string(chosen.size()) + " of " + std::to_string(want) +
                   " users; padded in retrieval order";
        } else {
          prov = Provenance::llm_selected;
        }
      }
    } catch (const PromptOverflow& e) {
      reason = std::string("selection prompt over budget: ") + e.what();
    } catch (const TransportError& e) {
      reason = std::string("backend transport failure: ") + e.what();
    } catch (const HttpStatusError& e) {
      reason = std::string("backend error: ") + e.what();
    }
    pad_from_pool(chosen);
  }

  auto& demos = out.demos;
  demos.target = pool.target;
  demos.m = m;
  demos.provenance = prov;
  demos.fallback_reason = reason;
  for (const auto& u : chosen) demos.members.push_back({u, corpus.sequence(u)});
  rec.selected = chosen;
  rec.provenance = prov;
  rec.fallback_reason = reason;
  return out;
}

}  // namespace adaptrec
