#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "adaptrec/lora.hpp"
#include "adaptrec/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace adaptrec;

namespace {

// Artifacts were written but some sequences were skipped with a logged reason.
constexpr int kPartial = 3;

/// Command-line overrides, applied to the config document before parsing so
/// they go through the same validation as file values.
struct Overrides {
  std::string config_path;
  std::optional<std::string> artifacts, backend, prompt_kind, selection, retrieval, transcript;
  std::optional<std::size_t> n, m, demo_count, refresh_rounds, sample_size, jobs;
  std::optional<std::uint64_t> seed_split, seed_sampling, seed_selection;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    app->add_option("--artifacts", artifacts, "Artifact directory");
    app->add_option("--backend", backend, "http | mock-omniscient | mock-offlist | mock-script | replay");
    app->add_option("--transcript", transcript, "Transcript to answer from (replay backend)");
    app->add_option("--prompt-kind", prompt_kind, "ucp | brp | cot");
    app->add_option("--selection", selection, "adaptive | static");
    app->add_option("--retrieval", retrieval, "similarity | random");
    app->add_option("-N,--pool-size", n, "Retrieved pool size N");
    app->add_option("-M,--select", m, "Selected demonstration count M");
    app->add_option("--demo-count", demo_count, "Demonstrations shown in the prompt");
    app->add_option("--refresh-rounds", refresh_rounds, "Selection rounds per target");
    app->add_option("--sample-size", sample_size, "Evaluate this many seeded-sampled sequences");
    app->add_option("--jobs", jobs, "Worker threads");
    app->add_option("--seed-split", seed_split);
    app->add_option("--seed-sampling", seed_sampling);
    app->add_option("--seed-selection", seed_selection);
  }

  ExperimentConfig load() const {
    std::ifstream in(config_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config '" + config_path + "' is not valid JSON: " + e.what());
    }
    const auto set = [&](const char* section, const char* key, const auto& v) {
      if (v) j[section][key] = *v;
    };
    if (artifacts) j["artifacts_dir"] = fs::absolute(*artifacts).string();
    if (jobs) j["jobs"] = *jobs;
    set("backend", "kind", backend);
    if (transcript) j["backend"]["transcript"] = fs::absolute(*transcript).string();
    set("prompt", "kind", prompt_kind);
    set("prompt", "demo_count", demo_count);
    set("selection", "mode", selection);
    set("selection", "m", m);
    set("selection", "refresh_rounds", refresh_rounds);
    set("retrieval", "mode", retrieval);
    set("retrieval", "n", n);
    set("evaluation", "sample_size", sample_size);
    set("seeds", "split", seed_split);
    set("seeds", "sampling", seed_sampling);
    set("seeds", "selection", seed_selection);
    return config_from_json(j, fs::path(config_path).parent_path());
  }
};

Experiment make_experiment(const ExperimentConfig& c) { return Experiment(c, load_corpus(c)); }

ArtifactLayout layout_for(const ExperimentConfig& c) {
  ArtifactLayout layout{c.artifacts_dir};
  layout.create();
  return layout;
}

/// Truncates the run transcript so a rerun never mixes two recordings.
TranscriptLog fresh_transcript(const ArtifactLayout& layout) {
  std::ofstream(layout.transcript_file(), std::ios::trunc);
  return TranscriptLog(layout.transcript_file().string());
}

void write_lines(const fs::path& p, const std::vector<json>& rows) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  for (const auto& r : rows) out << r.dump() << "\n";
}

int cmd_ingest(const Overrides& o) {
  const auto cfg = o.load();
  const auto corpus = load_corpus(cfg);
  const auto layout = layout_for(cfg);
  std::ofstream(layout.corpora() / "corpus.json") << to_json(corpus).dump() << "\n";
  std::ofstream(layout.corpora() / "stats.json") << to_json(corpus.stats()).dump(2) << "\n";
  std::cout << to_json(corpus.stats()).dump(2) << "\n";
  return 0;
}

int cmd_split(const Overrides& o) {
  const auto cfg = o.load();
  const auto exp = make_experiment(cfg);
  const auto layout = layout_for(cfg);
  persist_corpus(layout, exp);
  std::vector<json> rows;
  for (const auto& c : exp.test_cases()) rows.push_back(to_json(exp.candidates_for(c, "cand")));
  write_lines(layout.corpora() / "candidates.jsonl", rows);
  std::size_t evaluable = 0;
  for (const auto& [u, r] : exp.split().ranges) evaluable += r.evaluable ? 1 : 0;
  std::cout << exp.split().ranges.size() << " sequences, " << evaluable << " evaluable, " << rows.size()
            << " test cases\n";
  return 0;
}

int cmd_retrieve(const Overrides& o) {
  const auto cfg = o.load();
  const auto exp = make_experiment(cfg);
  if (!exp.uses_demonstrations()) throw ConfigError("retrieval is disabled for this config (ucp with demo_count > 0 needed)");
  const auto layout = layout_for(cfg);
  std::vector<json> rows;
  for (const auto& c : exp.test_cases()) rows.push_back(to_json(exp.pool_for(c)));
  write_lines(layout.pools() / "pools.jsonl", rows);
  std::cout << rows.size() << " pools written to " << (layout.pools() / "pools.jsonl").string() << "\n";
  return 0;
}

/// Shared by `select` and `prompt`: runs the stages up to prompt rendering.
int cmd_prepare(const Overrides& o, bool prompts) {
  const auto cfg = o.load();
  const auto exp = make_experiment(cfg);
  if (!prompts && !exp.uses_demonstrations())
    throw ConfigError("selection is disabled for this config (ucp with demo_count > 0 needed)");
  const auto layout = layout_for(cfg);
  auto backend = make_backend(cfg, exp);
  auto transcript = fresh_transcript(layout);
  std::vector<json> selections, rendered;
  for (const auto& c : exp.test_cases()) {
    const auto p = exp.prepare(c, cfg.prompt_kind, *backend, &transcript, "eval");
    for (const auto& s : p.selections) selections.push_back(to_json(s));
    rendered.push_back(to_json(p.prompt));
  }
  if (prompts) {
    write_lines(layout.prompts() / "prompts.jsonl", rendered);
    std::cout << rendered.size() << " prompts written\n";
  } else {
    write_lines(layout.selections() / "selections.jsonl", selections);
    std::cout << selections.size() << " selection records written\n";
  }
  return 0;
}

int cmd_run(const Overrides& o, bool compare, const std::string& dataset) {
  const auto cfg = o.load();
  const auto exp = make_experiment(cfg);
  const auto layout = layout_for(cfg);
  auto backend = make_backend(cfg, exp);
  auto transcript = fresh_transcript(layout);
  if (compare) {
    std::vector<RunArtifacts> runs;
    const auto cmp = compare_prompts(exp, *backend, &transcript, dataset, &runs);
    persist_run(layout, exp, runs[0], "_ucp");
    persist_run(layout, exp, runs[1], "_cot");
    persist_run(layout, exp, runs[2], "_brp");
    std::ofstream(layout.reports() / "comparison.json") << cmp.to_json().dump(2) << "\n";
    std::ofstream(layout.reports() / "comparison.md") << cmp.table();
    std::cout << cmp.table();
    return 0;
  }
  const auto run = exp.run(*backend, &transcript);
  persist_run(layout, exp, run);
  std::cout << format_table(run.report);
  if (!run.skipped.empty()) {
    std::cerr << run.skipped.size() << " sequences skipped (see reports/skipped.jsonl)\n";
    return kPartial;
  }
  return 0;
}

int cmd_replay(Overrides o) {
  if (!o.transcript) {
    // Default to the transcript `run` recorded in the same artifact directory.
    Overrides probe = o;
    probe.backend = "mock-omniscient";
    o.transcript = ArtifactLayout{probe.load().artifacts_dir}.transcript_file().string();
  }
  o.backend = "replay";
  const auto cfg = o.load();
  const auto exp = make_experiment(cfg);
  const auto layout = layout_for(cfg);
  auto backend = make_backend(cfg, exp);
  const auto run = exp.run(*backend, nullptr);
  persist_run(layout, exp, run, "_replay");
  std::cout << format_table(run.report);
  return 0;
}

int cmd_eval(const std::string& results_path) {
  std::ifstream in(results_path);
  if (!in) throw Error("cannot read '" + results_path + "'");
  std::vector<PerSequenceResult> rows;
  std::string line;
  while (std::getline(in, line))
    if (!trim(line).empty()) rows.push_back(per_sequence_from_json(json::parse(line)));
  const auto report = evaluate_run(rows);
  std::cout << format_table(report) << to_json(report).dump(2) << "\n";
  return 0;
}

int cmd_export(const Overrides& o) {
  const auto cfg = o.load();
  const auto exp = make_experiment(cfg);
  const auto layout = layout_for(cfg);
  auto backend = make_backend(cfg, exp);
  std::ofstream(layout.transcripts() / "finetune_transcript.jsonl", std::ios::trunc);
  TranscriptLog transcript((layout.transcripts() / "finetune_transcript.jsonl").string());
  std::vector<SkipRecord> skipped;
  const auto records = exp.export_finetune(*backend, &transcript, &skipped);
  std::vector<json> rows, skips;
  for (const auto& r : records) rows.push_back(to_json(r));
  for (const auto& s : skipped) {
    skips.push_back({{"user", s.user}, {"reason", s.reason}});
    std::cerr << "skipped " << s.user << ": " << s.reason << "\n";
  }
  write_lines(layout.prompts() / "finetune.jsonl", rows);
  write_lines(layout.reports() / "finetune_skipped.jsonl", skips);
  std::cout << records.size() << " fine-tune records written, " << skipped.size() << " skipped\n";
  return skipped.empty() ? 0 : kPartial;
}

int cmd_lora(std::size_t steps, double eta, long rank, std::uint64_t seed, const std::string& trace_path) {
  auto [task, frozen] = lora::separable_fixture();
  const auto result = lora::train_toy(task, frozen, rank, eta, steps, seed);
  if (!trace_path.empty()) {
    std::ofstream out(trace_path);
    if (!out) throw Error("cannot write '" + trace_path + "'");
    lora::write_trace_csv(out, result.trace);
  }
  const double initial = result.trace.loss.front();
  std::cout << "initial loss " << initial << "\nfinal loss   " << result.trace.final_loss << "\nratio        "
            << result.trace.final_loss / initial << "\ntrainable parameters " << result.model.trainable_parameters()
            << " (full matrix " << frozen.size() << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adaptrec: sequential recommendation experiments with adaptive demonstration selection"};
  app.require_subcommand(1);

  Overrides o;
  std::string dataset = "dataset";
  std::string results_path, trace_path;
  bool compare = false;
  std::size_t steps = 500;
  double eta = 0.1;
  long rank = 2;
  std::uint64_t lora_seed = 0;

  auto* ingest = app.add_subcommand("ingest", "Parse the log and titles, write corpus statistics");
  auto* split = app.add_subcommand("split", "Chronological split and candidate sets");
  auto* retrieve = app.add_subcommand("retrieve", "Similar-user pools for each test sequence");
  auto* select = app.add_subcommand("select", "Demonstration selection for each test sequence");
  auto* prompt = app.add_subcommand("prompt", "Render recommendation prompts");
  auto* run = app.add_subcommand("run", "Full evaluation run with transcript");
  auto* replay = app.add_subcommand("replay", "Re-run evaluation from a recorded transcript");
  auto* export_ft = app.add_subcommand("export-ft", "Export fine-tune records");
  for (auto* sub : {ingest, split, retrieve, select, prompt, run, replay, export_ft}) o.attach(sub);
  run->add_flag("--compare", compare, "Run UCP, CoT and BRP on the same sequences");
  run->add_option("--dataset", dataset, "Dataset label for the comparison table");

  auto* eval = app.add_subcommand("eval", "Aggregate a per-sequence results file");
  eval->add_option("results", results_path, "per_sequence.jsonl")->required()->check(CLI::ExistingFile);

  auto* lora_demo = app.add_subcommand("lora-demo", "Train the low-rank toy model and print the loss curve");
  lora_demo->add_option("--steps", steps)->check(CLI::PositiveNumber);
  lora_demo->add_option("--eta", eta)->check(CLI::PositiveNumber);
  lora_demo->add_option("--rank", rank)->check(CLI::Range(1, 3));
  lora_demo->add_option("--seed", lora_seed);
  lora_demo->add_option("--trace", trace_path, "Write step,loss,grad_norm CSV here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) return cmd_ingest(o);
    if (*split) return cmd_split(o);
    if (*retrieve) return cmd_retrieve(o);
    if (*select) return cmd_prepare(o, false);
    if (*prompt) return cmd_prepare(o, true);
    if (*run) return cmd_run(o, compare, dataset);
    if (*replay) return cmd_replay(o);
    if (*eval) return cmd_eval(results_path);
    if (*export_ft) return cmd_export(o);
    if (*lora_demo) return cmd_lora(steps, eta, rank, lora_seed, trace_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
