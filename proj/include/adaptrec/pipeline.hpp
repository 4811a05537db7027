#pragma once

// End-to-end experiment wiring: retrieve -> select -> prompt -> complete ->
// match -> aggregate, with the ablation switches, the selection refresh
// loop, fine-tune data export and artifact persistence.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "adaptrec/corpus.hpp"
#include "adaptrec/embedding.hpp"
#include "adaptrec/llm_client.hpp"
#include "adaptrec/metrics.hpp"
#include "adaptrec/prompting.hpp"
#include "adaptrec/retrieval.hpp"
#include "adaptrec/selection.hpp"

namespace adaptrec {

namespace fs = std::filesystem;
using nlohmann::json;

// Configuration ----------------------------------------------------------------

enum class BackendKind { http, omniscient, off_list, script, replay };

inline std::string to_string(BackendKind k) {
  switch (k) {
    case BackendKind::http: return "http";
    case BackendKind::omniscient: return "mock-omniscient";
    case BackendKind::off_list: return "mock-offlist";
    case BackendKind::script: return "mock-script";
    case BackendKind::replay: return "replay";
  }
  return "?";
}

inline BackendKind backend_kind_from_string(const std::string& s) {
  for (auto k : {BackendKind::http, BackendKind::omniscient, BackendKind::off_list, BackendKind::script,
                 BackendKind::replay})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown backend kind '" + s + "'");
}

struct BackendConfig {
  BackendKind kind = BackendKind::omniscient;
  EndpointConfig endpoint;
  std::string script_path;      // mock-script: JSON array of replies
  std::string transcript_path;  // replay: JSONL transcript to answer from
};

struct Seeds {
  std::uint64_t split = 1;      // few-shot sampling of test sequences
  std::uint64_t sampling = 42;  // candidate negatives and random pools
  std::uint64_t selection = 7;  // static demonstration sampling
};

struct ExperimentConfig {
  // data
  std::string log_path;
  std::string titles_path;
  std::string format = "tsv";
  LogFormat columns = LogFormat::tsv();
  std::size_t min_interactions = 0;
  // split
  SplitRatios ratios;
  std::size_t min_len = 3;
  std::size_t history_window = 10;
  // stages
  EmbedderSpec embedder;
  RetrievalMode retrieval = RetrievalMode::similarity;
  std::size_t n = 10;
  SelectionMode selection = SelectionMode::adaptive;
  std::size_t m = 5;
  std::size_t refresh_rounds = 2;
  PromptKind prompt_kind = PromptKind::ucp;
  std::size_t demo_count = 5;
  PromptOptions prompt;
  std::string templates_dir;
  std::string template_version = "v1";
  int max_tokens = 512;
  // run
  Seeds seeds;
  std::optional<std::size_t> sample_size;
  BackendConfig backend;
  std::string artifacts_dir = "artifacts";
  std::size_t jobs = 1;

  void validate() const {
    if (m < 1) throw ConfigError("M must be >= 1");
    if (m >= n) throw ConfigError("M (" + std::to_string(m) + ") must be smaller than N (" + std::to_string(n) + ")");
    if (demo_count > m)
      throw ConfigError("demo_count (" + std::to_string(demo_count) + ") must not exceed M (" + std::to_string(m) + ")");
    if (refresh_rounds < 1) throw ConfigError("refresh_rounds must be >= 1");
    if (prompt_kind == PromptKind::retrieval) throw ConfigError("prompt kind must be ucp, brp or cot");
    if (min_len < 3) throw ConfigError("min_len must be >= 3");
    if (history_window < 1) throw ConfigError("history_window must be >= 1");
    if (sample_size && *sample_size < 1) throw ConfigError("sample_size must be >= 1");
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    if (prompt.chars_per_token <= 0) throw ConfigError("chars_per_token must be positive");
    embedder.validate();
    if (backend.kind == BackendKind::http) backend.endpoint.validate();
    if (backend.kind == BackendKind::script && backend.script_path.empty())
      throw ConfigError("mock-script backend needs backend.script");
    if (backend.kind == BackendKind::replay && backend.transcript_path.empty())
      throw ConfigError("replay backend needs backend.transcript");
  }
};

inline json to_json(const ExperimentConfig& c) {
  json endpoint;
  to_json(endpoint, c.backend.endpoint);
  json emb_endpoint;
  to_json(emb_endpoint, c.embedder.endpoint);
  return {
      {"data",
       {{"log", c.log_path},
        {"titles", c.titles_path},
        {"format", c.format},
        {"user_col", c.columns.user_col},
        {"item_col", c.columns.item_col},
        {"timestamp_col", c.columns.timestamp_col},
        {"has_header", c.columns.has_header},
        {"min_interactions", c.min_interactions}}},
      {"split",
       {{"ratios", {c.ratios.train, c.ratios.valid, c.ratios.test}},
        {"min_len", c.min_len},
        {"history_window", c.history_window}}},
      {"embedder",
       {{"kind", c.embedder.kind == EmbedderKind::hashed ? "hashed" : "endpoint"},
        {"dimension", c.embedder.dimension},
        {"unit_normalize", c.embedder.unit_normalize},
        {"hash_seed", c.embedder.hash_seed},
        {"endpoint", emb_endpoint}}},
      {"retrieval", {{"mode", to_string(c.retrieval)}, {"n", c.n}}},
      {"selection", {{"mode", to_string(c.selection)}, {"m", c.m}, {"refresh_rounds", c.refresh_rounds}}},
      {"prompt",
       {{"kind", to_string(c.prompt_kind)},
        {"demo_count", c.demo_count},
        {"token_limit", c.prompt.token_limit},
        {"chars_per_token", c.prompt.chars_per_token},
        {"action_verb", c.prompt.action_verb},
        {"templates_dir", c.templates_dir},
        {"template_version", c.template_version},
        {"max_tokens", c.max_tokens}}},
      {"seeds", {{"split", c.seeds.split}, {"sampling", c.seeds.sampling}, {"selection", c.seeds.selection}}},
      {"evaluation", {{"sample_size", c.sample_size ? json(*c.sample_size) : json(nullptr)}}},
      {"backend",
       {{"kind", to_string(c.backend.kind)},
        {"endpoint", endpoint},
        {"script", c.backend.script_path},
        {"transcript", c.backend.transcript_path}}},
      {"artifacts_dir", c.artifacts_dir},
      {"jobs", c.jobs}};
}

/// Parses a config document. Seeds must be given explicitly; relative paths
/// are resolved against `base_dir`.
inline ExperimentConfig config_from_json(const json& j, const fs::path& base_dir = {}) {
  ExperimentConfig c;
  const auto resolve = [&](const std::string& p) {
    if (p.empty() || base_dir.empty() || fs::path(p).is_absolute()) return p;
    return (base_dir / p).lexically_normal().string();
  };
  try {
    if (!j.contains("seeds")) throw ConfigError("config must set seeds.split, seeds.sampling and seeds.selection");
    const auto& s = j.at("seeds");
    for (const char* key : {"split", "sampling", "selection"})
      if (!s.contains(key)) throw ConfigError(std::string("config is missing seeds.") + key);
    c.seeds = {s.at("split").get<std::uint64_t>(), s.at("sampling").get<std::uint64_t>(),
               s.at("selection").get<std::uint64_t>()};

    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.log_path = resolve(d.value("log", ""));
      c.titles_path = resolve(d.value("titles", ""));
      c.format = d.value("format", c.format);
      c.columns = LogFormat::from_name(c.format);
      c.columns.user_col = d.value("user_col", c.columns.user_col);
      c.columns.item_col = d.value("item_col", c.columns.item_col);
      c.columns.timestamp_col = d.value("timestamp_col", c.columns.timestamp_col);
      c.columns.has_header = d.value("has_header", c.columns.has_header);
      c.min_interactions = d.value("min_interactions", c.min_interactions);
    }
    if (j.contains("split")) {
      const auto& d = j.at("split");
      if (d.contains("ratios")) {
        const auto r = d.at("ratios").get<std::vector<double>>();
        if (r.size() != 3) throw ConfigError("split.ratios needs three values");
        c.ratios = {r[0], r[1], r[2]};
      }
      c.min_len = d.value("min_len", c.min_len);
      c.history_window = d.value("history_window", c.history_window);
    }
    if (j.contains("embedder")) {
      const auto& d = j.at("embedder");
      const std::string kind = d.value("kind", "hashed");
      if (kind != "hashed" && kind != "endpoint") throw ConfigError("embedder.kind must be hashed or endpoint");
      c.embedder.kind = kind == "hashed" ? EmbedderKind::hashed : EmbedderKind::endpoint;
      c.embedder.dimension = d.value("dimension", c.embedder.dimension);
      c.embedder.unit_normalize = d.value("unit_normalize", c.embedder.unit_normalize);
      c.embedder.hash_seed = d.value("hash_seed", c.embedder.hash_seed);
      if (d.contains("endpoint")) from_json(d.at("endpoint"), c.embedder.endpoint);
    }
    if (j.contains("retrieval")) {
      const auto& d = j.at("retrieval");
      const std::string mode = d.value("mode", "similarity");
      if (mode != "similarity" && mode != "random") throw ConfigError("retrieval.mode must be similarity or random");
      c.retrieval = mode == "similarity" ? RetrievalMode::similarity : RetrievalMode::random;
      c.n = d.value("n", c.n);
    }
    if (j.contains("selection")) {
      const auto& d = j.at("selection");
      c.selection = selection_mode_from_string(d.value("mode", "adaptive"));
      c.m = d.value("m", c.m);
      c.refresh_rounds = d.value("refresh_rounds", c.refresh_rounds);
    }
    if (j.contains("prompt")) {
      const auto& d = j.at("prompt");
      c.prompt_kind = prompt_kind_from_string(d.value("kind", "ucp"));
      c.demo_count = d.value("demo_count", c.demo_count);
      c.prompt.token_limit = d.value("token_limit", c.prompt.token_limit);
      c.prompt.chars_per_token = d.value("chars_per_token", c.prompt.chars_per_token);
      c.prompt.action_verb = d.value("action_verb", c.prompt.action_verb);
      c.templates_dir = resolve(d.value("templates_dir", ""));
      c.template_version = d.value("template_version", c.template_version);
      c.max_tokens = d.value("max_tokens", c.max_tokens);
    }
    if (j.contains("evaluation")) {
      const auto& d = j.at("evaluation");
      if (d.contains("sample_size") && !d.at("sample_size").is_null())
        c.sample_size = d.at("sample_size").get<std::size_t>();
    }
    if (j.contains("backend")) {
      const auto& d = j.at("backend");
      c.backend.kind = backend_kind_from_string(d.value("kind", "mock-omniscient"));
      if (d.contains("endpoint")) from_json(d.at("endpoint"), c.backend.endpoint);
      c.backend.script_path = resolve(d.value("script", ""));
      c.backend.transcript_path = resolve(d.value("transcript", ""));
    }
    c.artifacts_dir = resolve(j.value("artifacts_dir", c.artifacts_dir));
    c.jobs = j.value("jobs", c.jobs);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  c.prompt.history_window = c.history_window;
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

/// Hash of everything that affects results. Backend wiring, artifact
/// location and parallelism are excluded so a replay reports the same
/// fingerprint as the recorded run.
inline std::string config_fingerprint(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("backend");
  j.erase("artifacts_dir");
  j.erase("jobs");
  return hex64(fnv1a64(j.dump()));
}

inline SequenceCorpus load_corpus(const ExperimentConfig& c) {
  std::ifstream log(c.log_path, std::ios::binary), titles(c.titles_path, std::ios::binary);
  if (!log) throw Error("cannot read interaction log '" + c.log_path + "'");
  if (!titles) throw Error("cannot read title file '" + c.titles_path + "'");
  auto parsed = parse_interactions(log, titles, c.columns);
  auto corpus = build_sequences(parsed.log, parsed.catalog);
  if (c.min_interactions > 0) corpus = filter_min_interactions(std::move(corpus), c.min_interactions);
  if (corpus.sequences.empty()) throw Error("no users left after filtering");
  return corpus;
}

inline TemplateSet load_templates(const ExperimentConfig& c) {
  if (c.templates_dir.empty()) return {};
  return TemplateSet::load(c.templates_dir, c.template_version);
}

// Stage errors and records ---------------------------------------------------

class StageError : public Error {
public:
  StageError(std::string stage, UserId user, const std::string& cause)
      : Error("stage '" + stage + "' failed for user '" + user + "': " + cause),
        stage_(std::move(stage)),
        user_(std::move(user)) {}
  const std::string& stage() const noexcept { return stage_; }
  const UserId& user() const noexcept { return user_; }

private:
  std::string stage_;
  UserId user_;
};

struct SkipRecord {
  UserId user;
  std::string reason;
};

struct FineTuneRecord {
  UserId user;
  std::string prompt;
  std::string completion;
};

inline json to_json(const FineTuneRecord& r) {
  return {{"user", r.user}, {"prompt", r.prompt}, {"completion", r.completion}};
}

/// Everything one run produced, indexed like `results`.
struct RunArtifacts {
  EvalReport report;
  std::vector<PerSequenceResult> results;
  std::vector<SkipRecord> skipped;
  std::vector<CandidateSet> candidates;
  std::vector<std::optional<SimilarUserPool>> pools;
  std::vector<std::vector<SelectionRecord>> selections;
  std::vector<PromptInstance> prompts;
  std::vector<MatchResult> matches;
};

/// Stage switches implied by a config, as recorded in reports.
inline json wiring(const ExperimentConfig& c) {
  const bool demos = c.prompt_kind == PromptKind::ucp && c.demo_count > 0;
  return {{"retrieval", demos ? json(to_string(c.retrieval)) : json(nullptr)},
          {"selection", demos ? json(to_string(c.selection)) : json(nullptr)},
          {"prompt", to_string(c.prompt_kind)},
          {"demo_count", demos ? c.demo_count : 0}};
}

// Experiment -----------------------------------------------------------------

/// One held-out prediction: `context` is what the prompt may show, `target`
/// the hidden next item, `profile` the sequence used for retrieval.
struct PredictionCase {
  UserId user;
  std::vector<ItemId> context;
  std::vector<ItemId> profile;
  ItemId target;
};

class Experiment {
public:
  Experiment(ExperimentConfig config, SequenceCorpus corpus)
      : config_(std::move(config)), corpus_(std::move(corpus)), templates_(load_templates(config_)) {
    config_.validate();
    config_.prompt.history_window = config_.history_window;
    split_ = chronological_split(corpus_, config_.ratios, config_.min_len, config_.history_window);
    train_ = train_view(corpus_, split_);
    // Demonstrations need a train history plus the item that followed it.
    for (const auto& [user, seq] : train_.sequences)
      if (seq.size() >= 2) demo_users_.push_back(user);
    if (uses_demonstrations() && config_.retrieval == RetrievalMode::similarity) {
      const auto spec = ranking_spec(config_.embedder);
      for (const auto& u : demo_users_) demo_embeddings_.emplace(u, embed_sequence(train_.sequence(u), corpus_.catalog, spec));
    }
  }

  const ExperimentConfig& config() const { return config_; }
  const SequenceCorpus& corpus() const { return corpus_; }
  const SequenceCorpus& train() const { return train_; }
  const SplitCorpus& split() const { return split_; }

  bool uses_demonstrations() const { return config_.prompt_kind == PromptKind::ucp && config_.demo_count > 0; }

  /// Leave-one-out cases: each evaluable user's final item is hidden and
  /// everything before it is context. With sample_size set, that many users
  /// are drawn with the split seed.
  std::vector<PredictionCase> test_cases() const {
    std::vector<UserId> users;
    for (const auto& [u, r] : split_.ranges)
      if (r.evaluable) users.push_back(u);
    if (config_.sample_size) {
      if (*config_.sample_size > users.size())
        throw Error("sample_size " + std::to_string(*config_.sample_size) + " exceeds the " +
                    std::to_string(users.size()) + " evaluable sequences");
      Rng rng(config_.seeds.split);
      users = rng.sample(std::move(users), *config_.sample_size);
      std::sort(users.begin(), users.end(), IdLess{});
    }
    std::vector<PredictionCase> cases;
    for (const auto& u : users) {
      const auto& seq = corpus_.sequence(u);
      cases.push_back({u, {seq.begin(), seq.end() - 1}, train_.sequence(u), seq.back()});
    }
    return cases;
  }

  /// Fine-tune cases: the last train item of each evaluable user is the
  /// completion, the train items before it are the context.
  std::vector<PredictionCase> train_cases() const {
    std::vector<PredictionCase> cases;
    for (const auto& [u, r] : split_.ranges) {
      if (!r.evaluable || r.train_end < 2) continue;
      const auto& tr = train_.sequence(u);
      std::vector<ItemId> context(tr.begin(), tr.end() - 1);
      cases.push_back({u, context, context, tr.back()});
    }
    return cases;
  }

  CandidateSet candidates_for(const PredictionCase& c, std::string_view tag) const {
    return build_candidate_set(corpus_, c.user, c.target,
                               derive_seed(config_.seeds.sampling, std::string(tag) + ":" + c.user));
  }

  SimilarUserPool pool_for(const PredictionCase& c) const {
    if (config_.retrieval == RetrievalMode::random)
      return random_pool(c.user, demo_users_, config_.n, derive_seed(config_.seeds.sampling, "pool:" + c.user));
    const auto target_embedding = embed_sequence(c.profile, corpus_.catalog, ranking_spec(config_.embedder));
    auto pool = top_n_similar(c.user, target_embedding, demo_embeddings_, config_.n);
    pool.embedder = config_.embedder.fingerprint();
    return pool;
  }

  struct Prepared {
    CandidateSet candidates;
    std::optional<SimilarUserPool> pool;
    std::vector<SelectionRecord> selections;
    PromptInstance prompt;
    std::string provenance;
  };

  /// Runs retrieval, selection (all refresh rounds) and prompt rendering.
  /// `tag` namespaces request ids and seeds ("eval" or "ft").
  Prepared prepare(const PredictionCase& c, PromptKind kind, CompletionBackend& backend, TranscriptLog* transcript,
                   const std::string& tag) const {
    Prepared p;
    p.candidates = run_stage("candidates", c.user, [&] { return candidates_for(c, tag == "eval" ? "cand" : tag + "-cand"); });
    const bool demos = kind == PromptKind::ucp && config_.demo_count > 0;
    DemonstrationSet chosen;
    if (demos) {
      p.pool = run_stage("retrieval", c.user, [&] { return pool_for(c); });
      if (p.pool->members.empty()) throw SkipCase("no eligible similar users");
      const std::size_t rounds = config_.selection == SelectionMode::adaptive ? config_.refresh_rounds : 1;
      std::vector<UserId> previous;
      for (std::size_t round = 1; round <= rounds; ++round) {
        SelectionContext ctx;
        ctx.prompt_options = config_.prompt;
        ctx.templates = templates_;
        ctx.transcript = transcript;
        ctx.request_id = tag + "-select:" + c.user + ":r" + std::to_string(round);
        ctx.seed = derive_seed(config_.seeds.selection, "static:" + c.user);
        ctx.round = round;
        ctx.previous = previous;
        auto out = run_stage("selection", c.user, [&] {
          return select_similar_users(backend, c.context, *p.pool, train_, config_.m, config_.selection, ctx);
        });
        previous = out.demos.users();
        chosen = std::move(out.demos);
        p.selections.push_back(std::move(out.record));
      }
      p.provenance = to_string(chosen.provenance);
    }
    p.prompt = run_stage("prompt", c.user, [&]() -> PromptInstance {
      try {
        return render_prompt(c, kind, chosen, p.candidates);
      } catch (const PromptOverflow& e) {
        throw SkipCase(e.what());
      }
    });
    return p;
  }

  PromptInstance render_prompt(const PredictionCase& c, PromptKind kind, const DemonstrationSet& chosen,
                               const CandidateSet& candidates) const {
    if (kind == PromptKind::ucp) {
      const std::size_t shown = std::min(config_.demo_count, chosen.members.size());
      return render_recommendation_prompt(c.context, chosen.members, candidates, corpus_, shown, config_.prompt,
                                          templates_);
    }
    return render_baseline_prompt(kind, c.context, candidates, corpus_, config_.prompt, templates_);
  }

  RunArtifacts run(CompletionBackend& backend, TranscriptLog* transcript = nullptr) const {
    return run(backend, transcript, config_.prompt_kind);
  }

  RunArtifacts run(CompletionBackend& backend, TranscriptLog* transcript, PromptKind kind) const {
    const auto cases = test_cases();
    struct Slot {
      std::optional<PerSequenceResult> result;
      std::optional<SkipRecord> skip;
      std::optional<Prepared> prepared;
      MatchResult match;
    };
    std::vector<Slot> slots(cases.size());

    for_each_parallel(cases.size(), [&](std::size_t i) {
      const auto& c = cases[i];
      auto& slot = slots[i];
      try {
        slot.prepared = prepare(c, kind, backend, transcript, "eval");
      } catch (const SkipCase& s) {
        slot.skip = SkipRecord{c.user, s.what()};
        return;
      }
      const auto& prep = *slot.prepared;
      CompletionRequest req;
      req.prompt = prep.prompt.text;
      req.request_id = "rec:" + to_string(kind) + ":" + c.user;
      req.max_tokens = config_.max_tokens;
      const auto res = run_stage("completion", c.user, [&] { return complete(backend, req, transcript); });
      slot.match = run_stage("match", c.user, [&] { return match_candidates(res.text, prep.candidates, corpus_.catalog); });

      PerSequenceResult r;
      r.user = c.user;
      r.ground_truth = c.target;
      r.valid = slot.match.valid;
      r.provenance = prep.provenance;
      if (r.valid) {
        const auto& ranked = slot.match.ranked_items;
        const auto it = std::find(ranked.begin(), ranked.end(), c.target);
        if (it != ranked.end()) r.predicted_rank = static_cast<std::size_t>(it - ranked.begin()) + 1;
      }
      slot.result = std::move(r);
    });

    RunArtifacts out;
    for (auto& s : slots) {
      if (s.skip) {
        out.skipped.push_back(*s.skip);
        continue;
      }
      out.results.push_back(std::move(*s.result));
      out.candidates.push_back(std::move(s.prepared->candidates));
      out.pools.push_back(std::move(s.prepared->pool));
      out.selections.push_back(std::move(s.prepared->selections));
      out.prompts.push_back(std::move(s.prepared->prompt));
      out.matches.push_back(std::move(s.match));
    }
    if (out.results.empty()) throw Error("no sequence could be evaluated");
    out.report = evaluate_run(out.results);
    out.report.config_fingerprint = config_fingerprint(config_);
    out.report.seed = config_.seeds.sampling;
    return out;
  }

  /// Fine-tune records built with the same retrieval, selection and prompt
  /// path as evaluation. Over-budget records are skipped, never truncated.
  std::vector<FineTuneRecord> export_finetune(CompletionBackend& backend, TranscriptLog* transcript,
                                              std::vector<SkipRecord>* skipped = nullptr) const {
    const auto cases = train_cases();
    if (cases.empty()) throw Error("no evaluable train sequences to export");
    std::vector<std::optional<FineTuneRecord>> slots(cases.size());
    std::vector<std::optional<SkipRecord>> skips(cases.size());
    for_each_parallel(cases.size(), [&](std::size_t i) {
      const auto& c = cases[i];
      try {
        const auto prep = prepare(c, PromptKind::ucp, backend, transcript, "ft");
        slots[i] = FineTuneRecord{c.user, prep.prompt.text, corpus_.catalog.title(c.target)};
      } catch (const SkipCase& s) {
        skips[i] = SkipRecord{c.user, s.what()};
      }
    });
    std::vector<FineTuneRecord> out;
    for (std::size_t i = 0; i < cases.size(); ++i) {
      if (slots[i]) out.push_back(std::move(*slots[i]));
      if (skips[i] && skipped) skipped->push_back(*skips[i]);
    }
    return out;
  }

  /// Ground-truth answers per recommendation request id, for the omniscient mock.
  std::map<std::string, std::string> answer_key() const {
    std::map<std::string, std::string> key;
    for (const auto& c : test_cases())
      for (auto kind : {PromptKind::ucp, PromptKind::brp, PromptKind::cot})
        key["rec:" + to_string(kind) + ":" + c.user] = corpus_.catalog.title(c.target);
    return key;
  }

private:
  struct SkipCase : Error {
    using Error::Error;
  };

  template <typename Fn>
  static auto run_stage(const std::string& stage, const UserId& user, Fn&& fn) -> decltype(fn()) {
    try {
      return fn();
    } catch (const SkipCase&) {
      throw;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, user, e.what());
    }
  }

  /// Calls fn(i) for i in [0, count) on up to `jobs` threads. The first
  /// exception (lowest index) is rethrown after all workers finish.
  template <typename Fn>
  void for_each_parallel(std::size_t count, Fn&& fn) const {
    const std::size_t workers = std::min(config_.jobs, std::max<std::size_t>(count, 1));
    if (workers <= 1) {
      for (std::size_t i = 0; i < count; ++i) fn(i);
      return;
    }
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
          for (std::size_t i; (i = next.fetch_add(1)) < count;) {
            try {
              fn(i);
            } catch (...) {
              errors[i] = std::current_exception();
            }
          }
        });
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  ExperimentConfig config_;
  SequenceCorpus corpus_;
  TemplateSet templates_;
  SplitCorpus split_;
  SequenceCorpus train_;
  std::vector<UserId> demo_users_;
  EmbeddingTable demo_embeddings_;
};

// Mocks ----------------------------------------------------------------------

inline std::string default_ranking_reply(std::size_t m) {
  std::string s = "RANKING: ";
  for (std::size_t k = 1; k <= m; ++k) s += (k > 1 ? "," : "") + std::to_string(k);
  return s;
}

/// Answers every recommendation request with its ground-truth title and
/// every selection request with the retrieval order.
inline std::unique_ptr<CompletionBackend> make_omniscient_backend(std::map<std::string, std::string> answers,
                                                                  std::size_t m) {
  return std::make_unique<FunctionBackend>(
      "mock-omniscient", [answers = std::move(answers), m](const CompletionRequest& req) -> std::string {
        if (auto it = answers.find(req.request_id); it != answers.end())
          return "```ranking\n" + it->second + "\n```";
        return default_ranking_reply(m);
      });
}

inline constexpr std::string_view kOffListTitle = "Inception (an item outside every candidate list)";

/// Answers every recommendation request with a title that is never a candidate.
inline std::unique_ptr<CompletionBackend> make_off_list_backend(std::size_t m) {
  return std::make_unique<FunctionBackend>("mock-offlist", [m](const CompletionRequest& req) -> std::string {
    if (req.request_id.find("select:") != std::string::npos) return default_ranking_reply(m);
    return std::string(kOffListTitle);
  });
}

inline std::unique_ptr<CompletionBackend> make_backend(const ExperimentConfig& c, const Experiment& exp) {
  switch (c.backend.kind) {
    case BackendKind::http: return std::make_unique<HttpCompletionBackend>(c.backend.endpoint);
    case BackendKind::omniscient: return make_omniscient_backend(exp.answer_key(), c.m);
    case BackendKind::off_list: return make_off_list_backend(c.m);
    case BackendKind::script: {
      std::ifstream in(c.backend.script_path);
      if (!in) throw ConfigError("cannot read mock script '" + c.backend.script_path + "'");
      std::vector<ScriptedBackend::Entry> entries;
      for (const auto& e : json::parse(in)) {
        if (e.is_string()) entries.emplace_back(e.get<std::string>());
        else entries.emplace_back(ScriptedFailure{e.value("failure", "injected transport failure")});
      }
      return std::make_unique<ScriptedBackend>(std::move(entries));
    }
    case BackendKind::replay: {
      std::ifstream in(c.backend.transcript_path);
      if (!in) throw ConfigError("cannot read transcript '" + c.backend.transcript_path + "'");
      return std::make_unique<ReplayBackend>(read_transcript(in));
    }
  }
  throw ConfigError("unsupported backend");
}

// Persistence ----------------------------------------------------------------

/// Artifact layout under the run directory.
struct ArtifactLayout {
  fs::path root;

  fs::path corpora() const { return root / "corpora"; }
  fs::path pools() const { return root / "pools"; }
  fs::path selections() const { return root / "selections"; }
  fs::path prompts() const { return root / "prompts"; }
  fs::path transcripts() const { return root / "transcripts"; }
  fs::path reports() const { return root / "reports"; }
  fs::path transcript_file() const { return transcripts() / "transcript.jsonl"; }

  void create() const {
    for (const auto& d : {corpora(), pools(), selections(), prompts(), transcripts(), reports()})
      fs::create_directories(d);
  }
};

namespace detail {

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  out << text;
}

template <typename Range, typename ToJson>
void write_jsonl(const fs::path& p, const Range& items, ToJson&& conv) {
  std::string text;
  for (const auto& item : items) text += conv(item).dump() + "\n";
  write_text(p, text);
}

}  // namespace detail

inline void persist_corpus(const ArtifactLayout& layout, const Experiment& exp) {
  detail::write_text(layout.corpora() / "stats.json", to_json(exp.corpus().stats()).dump(2) + "\n");
  detail::write_text(layout.corpora() / "split.json", to_json(exp.split()).dump(2) + "\n");
}

inline void persist_run(const ArtifactLayout& layout, const Experiment& exp, const RunArtifacts& run,
                        const std::string& suffix = "") {
  layout.create();
  persist_corpus(layout, exp);
  detail::write_jsonl(layout.corpora() / ("candidates" + suffix + ".jsonl"), run.candidates,
                      [](const CandidateSet& c) { return to_json(c); });
  std::vector<json> pools, selections;
  for (const auto& p : run.pools)
    if (p) pools.push_back(to_json(*p));
  for (const auto& per_user : run.selections)
    for (const auto& s : per_user) selections.push_back(to_json(s));
  detail::write_jsonl(layout.pools() / ("pools" + suffix + ".jsonl"), pools, [](const json& j) { return j; });
  detail::write_jsonl(layout.selections() / ("selections" + suffix + ".jsonl"), selections,
                      [](const json& j) { return j; });
  detail::write_jsonl(layout.prompts() / ("prompts" + suffix + ".jsonl"), run.prompts,
                      [](const PromptInstance& p) { return to_json(p); });
  detail::write_jsonl(layout.reports() / ("per_sequence" + suffix + ".jsonl"), run.results,
                      [](const PerSequenceResult& r) { return to_json(r); });
  detail::write_jsonl(layout.reports() / ("skipped" + suffix + ".jsonl"), run.skipped,
                      [](const SkipRecord& s) { return json{{"user", s.user}, {"reason", s.reason}}; });
  json report = to_json(run.report);
  report["wiring"] = wiring(exp.config());
  report["config"] = to_json(exp.config());
  report["config"].erase("backend");
  detail::write_text(layout.reports() / ("report" + suffix + ".json"), report.dump(2) + "\n");
  detail::write_text(layout.reports() / ("report" + suffix + ".md"), format_table(run.report));
}

// Few-shot prompt comparison -------------------------------------------------

struct PromptComparison {
  std::string dataset;
  EvalReport ucp, cot, brp;

  static std::string improvement(double ours, double theirs) {
    if (theirs == 0) return "n/a";
    std::ostringstream s;
    s << std::showpos << std::fixed << std::setprecision(2) << (ours - theirs) / theirs * 100.0 << "%";
    return s.str();
  }

  /// HR@1 per prompt kind plus relative gain of UCP over BRP and CoT.
  std::string table() const {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    out << "| Dataset | UCP | CoT | BRP | UCP vs BRP | UCP vs CoT |\n"
        << "|---|---|---|---|---|---|\n"
        << "| " << dataset << " | " << ucp.hr1 << " | " << cot.hr1 << " | " << brp.hr1 << " | "
        << improvement(ucp.hr1, brp.hr1) << " | " << improvement(ucp.hr1, cot.hr1) << " |\n";
    return out.str();
  }

  json to_json() const {
    return {{"dataset", dataset},
            {"ucp", adaptrec::to_json(ucp)},
            {"cot", adaptrec::to_json(cot)},
            {"brp", adaptrec::to_json(brp)},
            {"ucp_vs_brp", improvement(ucp.hr1, brp.hr1)},
            {"ucp_vs_cot", improvement(ucp.hr1, cot.hr1)}};
  }
};

/// Runs the same sampled sequences under UCP, CoT and BRP prompts.
inline PromptComparison compare_prompts(const Experiment& exp, CompletionBackend& backend, TranscriptLog* transcript,
                                        const std::string& dataset, std::vector<RunArtifacts>* runs = nullptr) {
  PromptComparison cmp;
  cmp.dataset = dataset;
  for (auto kind : {PromptKind::ucp, PromptKind::cot, PromptKind::brp}) {
    auto run = exp.run(backend, transcript, kind);
    (kind == PromptKind::ucp ? cmp.ucp : kind == PromptKind::cot ? cmp.cot : cmp.brp) = run.report;
    if (runs) runs->push_back(std::move(run));
  }
  return cmp;
}

}  // namespace adaptrec
