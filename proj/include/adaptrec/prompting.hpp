#pragma once

// Prompt templates and renderers: the user-contextualized recommendation
// prompt (with demonstrations), the basic and chain-of-thought baselines,
// and the shared pieces the similarity-selection prompt reuses.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "adaptrec/common.hpp"
#include "adaptrec/corpus.hpp"

namespace adaptrec {

enum class PromptKind { retrieval, ucp, brp, cot };

inline std::string to_string(PromptKind k) {
  switch (k) {
    case PromptKind::retrieval: return "retrieval";
    case PromptKind::ucp: return "ucp";
    case PromptKind::brp: return "brp";
    case PromptKind::cot: return "cot";
  }
  return "?";
}

inline PromptKind prompt_kind_from_string(const std::string& s) {
  if (s == "retrieval") return PromptKind::retrieval;
  if (s == "ucp") return PromptKind::ucp;
  if (s == "brp") return PromptKind::brp;
  if (s == "cot") return PromptKind::cot;
  throw ConfigError("unknown prompt kind '" + s + "' (expected ucp, brp, cot or retrieval)");
}

class PromptOverflow : public Error {
public:
  PromptOverflow(std::size_t estimate, std::size_t limit)
      : Error("prompt needs ~" + std::to_string(estimate) + " tokens, " + std::to_string(estimate - limit) +
              " over the limit of " + std::to_string(limit)),
        overflow_(estimate - limit) {}
  std::size_t overflow() const noexcept { return overflow_; }

private:
  std::size_t overflow_;
};

// Template engine ------------------------------------------------------------

/// Text with `{{name}}` placeholders. Substitution is single pass: values
/// are never re-scanned for placeholders.
class Template {
public:
  Template() = default;
  explicit Template(std::string text) : text_(std::move(text)) {
    std::size_t pos = 0;
    while (pos < text_.size()) {
      const auto open = text_.find("{{", pos);
      if (open == std::string::npos) {
        segments_.push_back({text_.substr(pos), false});
        break;
      }
      const auto close = text_.find("}}", open + 2);
      if (close == std::string::npos) throw ConfigError("template has an unterminated placeholder");
      if (open > pos) segments_.push_back({text_.substr(pos, open - pos), false});
      const std::string name(trim(std::string_view(text_).substr(open + 2, close - open - 2)));
      if (name.empty()) throw ConfigError("template has an empty placeholder");
      segments_.push_back({name, true});
      pos = close + 2;
    }
  }

  const std::string& text() const { return text_; }

  std::vector<std::string> placeholders() const {
    std::vector<std::string> out;
    for (const auto& s : segments_)
      if (s.placeholder && std::find(out.begin(), out.end(), s.text) == out.end()) out.push_back(s.text);
    return out;
  }

  std::string render(const std::map<std::string, std::string>& values) const {
    std::string out;
    for (const auto& s : segments_) {
      if (!s.placeholder) {
        out += s.text;
        continue;
      }
      auto it = values.find(s.text);
      if (it == values.end()) throw Error("no value for template placeholder '" + s.text + "'");
      out += it->second;
    }
    return out;
  }

private:
  struct Segment {
    std::string text;
    bool placeholder;
  };
  std::string text_;
  std::vector<Segment> segments_;
};

inline constexpr std::string_view kReasoningScaffold =
    "Before answering, reason step by step about the user's preferences: note the genres, themes and "
    "creators that recur in the history and how the user's taste shifts over time, then weigh each "
    "candidate against that reasoning.";

namespace templates {

inline constexpr std::string_view kRetrievalV1 =
    "You are helping a recommender system find users whose behaviour resembles a target user.\n"
    "\n"
    "Target user's interaction history (oldest to newest):\n"
    "{{target_history}}\n"
    "\n"
    "Candidate similar users:\n"
    "{{candidate_blocks}}\n"
    "\n"
    "{{previous_selection}}"
    "Judge which candidate users are most behaviourally similar to the target user. Consider the items "
    "they share, the genres and themes of their items, and the order in which they interacted with them.\n"
    "Select the {{select_count}} most similar candidates and rank them from most to least similar.\n"
    "Reply with exactly one line in this format, using candidate indices:\n"
    "RANKING: <index>,<index>,...\n";

inline constexpr std::string_view kUcpV1 =
    "You are a sequential recommender. Predict the next item the target user will interact with.\n"
    "\n"
    "{{demonstrations}}"
    "Target user's interaction history (oldest to newest):\n"
    "{{target_history}}\n"
    "\n"
    "Candidate items:\n"
    "{{candidates}}\n"
    "\n"
    "{{answer_instruction}}";

inline constexpr std::string_view kBrpV1 =
    "Predict the next item the user will interact with.\n"
    "\n"
    "User's interaction history (oldest to newest):\n"
    "{{target_history}}\n"
    "\n"
    "Candidate items:\n"
    "{{candidates}}\n"
    "\n"
    "{{answer_instruction}}";

inline constexpr std::string_view kCotV1 =
    "Predict the next item the user will interact with.\n"
    "\n"
    "User's interaction history (oldest to newest):\n"
    "{{target_history}}\n"
    "\n"
    "Candidate items:\n"
    "{{candidates}}\n"
    "\n"
    "{{reasoning}}\n"
    "{{answer_instruction}}";

}  // namespace templates

/// The four prompt templates, loadable from `<dir>/<kind>.<version>.txt`.
struct TemplateSet {
  std::string version = "v1";
  Template retrieval{std::string(templates::kRetrievalV1)};
  Template ucp{std::string(templates::kUcpV1)};
  Template brp{std::string(templates::kBrpV1)};
  Template cot{std::string(templates::kCotV1)};

  const Template& get(PromptKind k) const {
    switch (k) {
      case PromptKind::retrieval: return retrieval;
      case PromptKind::ucp: return ucp;
      case PromptKind::brp: return brp;
      case PromptKind::cot: return cot;
    }
    return ucp;
  }

  static TemplateSet load(const std::filesystem::path& dir, const std::string& version) {
    const auto read = [&](PromptKind k) {
      const auto path = dir / (to_string(k) + "." + version + ".txt");
      std::ifstream in(path, std::ios::binary);
      if (!in) throw ConfigError("cannot read template " + path.string());
      std::ostringstream ss;
      ss << in.rdbuf();
      return Template(ss.str());
    };
    TemplateSet t;
    t.version = version;
    t.retrieval = read(PromptKind::retrieval);
    t.ucp = read(PromptKind::ucp);
    t.brp = read(PromptKind::brp);
    t.cot = read(PromptKind::cot);
    return t;
  }
};

// Rendering ------------------------------------------------------------------

struct PromptOptions {
  std::size_t history_window = 10;
  std::size_t token_limit = 4096;
  double chars_per_token = 4.0;
  std::string action_verb = "watched";
};

struct PromptInstance {
  PromptKind kind = PromptKind::ucp;
  std::string text;
  std::vector<ItemId> candidate_order;  // recommendation prompts
  std::vector<UserId> index_users;      // retrieval prompt: index k -> index_users[k-1]
  std::size_t demo_count = 0;
  std::size_t token_estimate = 0;
  std::string template_version;
};

/// A demonstrated user: `history` is their train sequence; its last item is
/// shown as the choice that followed the rest.
struct Demonstration {
  UserId user;
  std::vector<ItemId> history;

  friend bool operator==(const Demonstration&, const Demonstration&) = default;
};

/// Title as it appears inside a double-quoted prompt string.
inline std::string escape_title(std::string_view title) {
  std::string out;
  out.reserve(title.size() + 2);
  for (char c : title) {
    switch (c) {
      case '\n':
      case '\r':
      case '\t': out.push_back(' '); break;
      case '\\': out += "\\\\"; break;
      case '"': out += "\\\""; break;
      case '{': out += "\\{"; break;
      case '}': out += "\\}"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

inline std::string quote_title(std::string_view title) { return "\"" + escape_title(title) + "\""; }

/// Rough token count: each whitespace-separated word costs
/// ceil(word characters / chars_per_token), each punctuation byte one more.
inline std::size_t estimate_tokens(std::string_view text, double chars_per_token = 4.0) {
  std::size_t total = 0, word = 0;
  const auto flush = [&] {
    if (word) total += static_cast<std::size_t>(std::ceil(static_cast<double>(word) / chars_per_token));
    word = 0;
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      ++total;
    } else {
      ++word;
    }
  }
  flush();
  return total;
}

/// Last `keep` items of `seq`, as a bracketed list of quoted titles.
inline std::string titled_list(std::span<const ItemId> seq, std::size_t keep, const ItemCatalog& catalog) {
  const std::size_t start = seq.size() > keep ? seq.size() - keep : 0;
  std::string out = "[";
  for (std::size_t i = start; i < seq.size(); ++i) {
    if (i > start) out += ", ";
    out += quote_title(catalog.title(seq[i]));
  }
  return out + "]";
}

inline std::string candidate_lines(std::span<const ItemId> order, const ItemCatalog& catalog) {
  std::string out;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (k) out += "\n";
    out += "[" + std::to_string(k + 1) + "] " + quote_title(catalog.title(order[k]));
  }
  return out;
}

inline std::string answer_instruction(std::size_t n_candidates) {
  return "Rank all " + std::to_string(n_candidates) +
         " candidate items from most to least likely to be chosen next. Reply with the candidate titles "
         "exactly as written above, one per line and without the index numbers, inside a fenced block:\n"
         "```ranking\n<most likely title>\n<next title>\n...\n```\n";
}

namespace detail {

/// Renders with per-block history lengths, shrinking them oldest-first until
/// the estimate fits: secondary blocks first, the target history last.
/// `render(target_keep, block_keeps)` produces the text.
template <typename RenderFn>
std::pair<std::string, std::size_t> fit_budget(RenderFn&& render, std::size_t target_len,
                                               std::vector<std::size_t> block_lens, const PromptOptions& opt) {
  std::size_t target_keep = std::min(target_len, opt.history_window);
  for (auto& b : block_lens) b = std::min(b, opt.history_window);
  for (;;) {
    std::string text = render(target_keep, block_lens);
    const std::size_t est = estimate_tokens(text, opt.chars_per_token);
    if (est <= opt.token_limit) return {std::move(text), est};
    auto longest = std::max_element(block_lens.begin(), block_lens.end());
    if (longest != block_lens.end() && *longest > 1) {
      --*longest;
    } else if (target_keep > 1) {
      --target_keep;
    } else {
      throw PromptOverflow(est, opt.token_limit);
    }
  }
}

}  // namespace detail

/// Demonstration section for the user-contextualized prompt; empty when no
/// demonstrations are shown.
inline std::string demonstration_section(std::span<const Demonstration> demos, std::span<const std::size_t> keeps,
                                         const ItemCatalog& catalog, const std::string& verb) {
  if (demos.empty()) return "";
  std::string out = "Here is what users with similar behaviour chose next:\n";
  for (std::size_t i = 0; i < demos.size(); ++i) {
    const auto& h = demos[i].history;
    const std::span<const ItemId> before(h.data(), h.empty() ? 0 : h.size() - 1);
    out += "Demonstration " + std::to_string(i + 1) + ": A user who " + verb + " " +
           titled_list(before, keeps[i], catalog) + " then chose " +
           (h.empty() ? std::string("\"\"") : quote_title(catalog.title(h.back()))) + ".\n";
  }
  return out + "\n";
}

/// User-contextualized recommendation prompt. The first `demo_count`
/// demonstrations are shown; 0 gives the no-demonstration variant.
inline PromptInstance render_recommendation_prompt(std::span<const ItemId> target_history,
                                                   std::span<const Demonstration> demos,
                                                   const CandidateSet& candidates, const SequenceCorpus& corpus,
                                                   std::size_t demo_count, const PromptOptions& opt = {},
                                                   const TemplateSet& tpl = {}) {
  if (demo_count > demos.size())
    throw Error("demo_count " + std::to_string(demo_count) + " exceeds the " + std::to_string(demos.size()) +
                " available demonstrations");
  const auto& catalog = corpus.catalog;
  const auto shown = demos.first(demo_count);
  std::vector<std::size_t> lens;
  for (const auto& d : shown) lens.push_back(d.history.empty() ? 0 : d.history.size() - 1);

  const std::string cands = candidate_lines(candidates.order, catalog);
  const std::string instruction = answer_instruction(candidates.order.size());
  auto render = [&](std::size_t target_keep, const std::vector<std::size_t>& keeps) {
    return tpl.ucp.render({{"demonstrations", demonstration_section(shown, keeps, catalog, opt.action_verb)},
                           {"target_history", titled_list(target_history, target_keep, catalog)},
                           {"candidates", cands},
                           {"answer_instruction", instruction}});
  };
  auto [text, est] = detail::fit_budget(render, target_history.size(), lens, opt);

  PromptInstance p;
  p.kind = PromptKind::ucp;
  p.text = std::move(text);
  p.candidate_order = candidates.order;
  p.demo_count = demo_count;
  p.token_estimate = est;
  p.template_version = tpl.version;
  return p;
}

/// Basic (direct instruction) or chain-of-thought baseline; no demonstrations.
inline PromptInstance render_baseline_prompt(PromptKind kind, std::span<const ItemId> target_history,
                                             const CandidateSet& candidates, const SequenceCorpus& corpus,
                                             const PromptOptions& opt = {}, const TemplateSet& tpl = {}) {
  if (kind != PromptKind::brp && kind != PromptKind::cot) throw Error("baseline prompt kind must be brp or cot");
  const auto& catalog = corpus.catalog;
  const std::string cands = candidate_lines(candidates.order, catalog);
  const std::string instruction = answer_instruction(candidates.order.size());
  auto render = [&](std::size_t target_keep, const std::vector<std::size_t>&) {
    std::map<std::string, std::string> v{{"target_history", titled_list(target_history, target_keep, catalog)},
                                         {"candidates", cands},
                                         {"answer_instruction", instruction}};
    if (kind == PromptKind::cot) v["reasoning"] = std::string(kReasoningScaffold);
    return tpl.get(kind).render(v);
  };
  auto [text, est] = detail::fit_budget(render, target_history.size(), {}, opt);

  PromptInstance p;
  p.kind = kind;
  p.text = std::move(text);
  p.candidate_order = candidates.order;
  p.token_estimate = est;
  p.template_version = tpl.version;
  return p;
}

/// Number of candidate lines naming `title`; 1 for every candidate in a
/// well-formed recommendation prompt.
inline std::size_t candidate_occurrences(const std::string& text, std::string_view title) {
  const std::string needle = "] " + quote_title(title) + "\n";
  std::size_t count = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++count;
  return count;
}

inline json to_json(const PromptInstance& p) {
  return {{"kind", to_string(p.kind)},
          {"template_version", p.template_version},
          {"demo_count", p.demo_count},
          {"token_estimate", p.token_estimate},
          {"candidate_order", p.candidate_order},
          {"index_users", p.index_users},
          {"text", p.text}};
}

}  // namespace adaptrec
