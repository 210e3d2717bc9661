#pragma once

// Condition checkers: decide whether a response satisfies a generation
// condition. Checkers are registered by id so condition specs can bind to
// them (including user-supplied custom checkers).

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "condpoison/common.hpp"
#include "condpoison/corpus.hpp"

namespace condpoison {

struct CheckViolation {
  std::string rule;
  std::string detail;

  bool operator==(const CheckViolation&) const = default;
};

struct CheckResult {
  bool passed = false;
  std::vector<CheckViolation> violations;
  // Set when the checker cannot decide mechanically (e.g. voice); the
  // result passes but is flagged for external review.
  bool needs_manual_review = false;
  std::string manual_review_rule;

  static CheckResult pass() { return {true, {}, false, ""}; }
  static CheckResult inconclusive(std::string rule) {
    return {true, {}, true, std::move(rule)};
  }
  static CheckResult fail(std::string rule, std::string detail) {
    return {false, {{std::move(rule), std::move(detail)}}, false, ""};
  }
};

using CheckerFn =
    std::function<CheckResult(const std::string&, const ConditionSpec&)>;

// ---------------------------------------------------------------------------
// Built-in rules

// Whitespace tokens; provider tokenizers differ, so max_tokens is interpreted
// in whitespace tokens throughout.
inline CheckResult check_token_limit(const std::string& response,
                                     const ConditionSpec& spec) {
  if (!spec.params.max_tokens)
    throw PreconditionError("token_limit checker: spec missing max_tokens");
  std::size_t count = whitespace_tokens(response).size();
  std::size_t limit = static_cast<std::size_t>(*spec.params.max_tokens);
  if (count <= limit) return CheckResult::pass();
  return CheckResult::fail("token_limit",
                           "token count " + std::to_string(count) + " > " +
                               std::to_string(limit));
}

// A sentence is a span ending in a '.', '!' or '?' run where the run is
// followed by whitespace or end-of-text and the span contains at least one
// alphanumeric character. "3.14" does not end a sentence; "?!" counts once;
// an unterminated trailing span is not counted.
inline int count_sentences(const std::string& text) {
  auto is_term = [](char c) { return c == '.' || c == '!' || c == '?'; };
  int sentences = 0;
  bool span_has_alnum = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (is_term(c)) {
      std::size_t j = i;
      while (j + 1 < text.size() && is_term(text[j + 1])) ++j;
      bool at_boundary =
          j + 1 >= text.size() ||
          std::isspace(static_cast<unsigned char>(text[j + 1]));
      if (at_boundary) {
        if (span_has_alnum) ++sentences;
        span_has_alnum = false;
      }
      i = j;
    } else if (std::isalnum(static_cast<unsigned char>(c))) {
      span_has_alnum = true;
    }
  }
  return sentences;
}

inline CheckResult check_sentence_count(const std::string& response,
                                        const ConditionSpec& spec) {
  if (!spec.params.min_count || !spec.params.max_count)
    throw PreconditionError("sentence_count checker: spec missing range");
  int n = count_sentences(response);
  if (n >= *spec.params.min_count && n <= *spec.params.max_count)
    return CheckResult::pass();
  return CheckResult::fail(
      "sentence_count", "sentence count " + std::to_string(n) +
                            " outside [" +
                            std::to_string(*spec.params.min_count) + ", " +
                            std::to_string(*spec.params.max_count) + "]");
}

// Paragraphs are blocks separated by at least one blank line; blocks with no
// non-whitespace content are not counted.
inline int count_paragraphs(const std::string& text) {
  int paragraphs = 0;
  bool in_block = false;
  for (const auto& line : split_lines(text)) {
    bool blank = trim(line).empty();
    if (!blank && !in_block) {
      ++paragraphs;
      in_block = true;
    } else if (blank) {
      in_block = false;
    }
  }
  return paragraphs;
}

inline CheckResult check_paragraph_count(const std::string& response,
                                         const ConditionSpec& spec) {
  if (!spec.params.min_count || !spec.params.max_count)
    throw PreconditionError("paragraph_count checker: spec missing range");
  int n = count_paragraphs(response);
  if (n >= *spec.params.min_count && n <= *spec.params.max_count)
    return CheckResult::pass();
  return CheckResult::fail(
      "paragraph_count", "paragraph count " + std::to_string(n) +
                             " outside [" +
                             std::to_string(*spec.params.min_count) + ", " +
                             std::to_string(*spec.params.max_count) + "]");
}

// Small stopword tables for the language heuristic. Kept deliberately short;
// the rule is a ratio comparison, not a language identifier.
inline const std::map<std::string, std::set<std::string>>&
language_stopwords() {
  static const std::map<std::string, std::set<std::string>> kTables = {
      {"en",
       {"the", "and", "is", "are", "was", "were", "of", "to", "in", "it",
        "that", "this", "with", "for", "you", "not", "have", "has", "be",
        "on", "as", "at", "but", "they", "we"}},
      {"fr",
       {"le", "la", "les", "des", "une", "est", "et", "dans", "que", "qui",
        "pour", "pas", "vous", "nous", "avec", "sur", "ce", "cette", "son",
        "aux", "être", "il", "elle", "au", "du"}},
      {"de",
       {"der", "die", "das", "und", "ist", "nicht", "ein", "eine", "mit",
        "für", "auf", "sich", "dem", "den", "von", "zu", "im", "sie", "wir",
        "ich", "aber", "auch", "sind", "war", "bei"}},
      {"es",
       {"el", "los", "las", "una", "es", "está", "y", "en", "que", "por",
        "para", "con", "no", "se", "su", "lo", "como", "más", "pero", "sus",
        "este", "esta", "son", "muy", "del"}},
  };
  return kTables;
}

// Stopword-ratio heuristic: the target language must strictly win against
// every other table and have at least one hit.
inline CheckResult check_output_language(const std::string& response,
                                         const ConditionSpec& spec) {
  if (!spec.params.language)
    throw PreconditionError("output_language checker: spec missing language");
  const std::string target = to_lower(*spec.params.language);
  const auto& tables = language_stopwords();
  if (!tables.count(target))
    return CheckResult::fail("output_language",
                             "no stopword table for language '" + target +
                                 "'");
  auto tokens = whitespace_tokens(to_lower(response));
  for (auto& t : tokens) {
    while (!t.empty() && !is_word_char(t.front())) t.erase(t.begin());
    while (!t.empty() && !is_word_char(t.back())) t.pop_back();
  }
  std::map<std::string, int> hits;
  for (const auto& [lang, words] : tables) {
    int n = 0;
    for (const auto& t : tokens)
      if (words.count(t)) ++n;
    hits[lang] = n;
  }
  int target_hits = hits[target];
  if (target_hits == 0)
    return CheckResult::fail("output_language",
                             "no '" + target + "' stopwords found");
  for (const auto& [lang, n] : hits) {
    if (lang != target && n >= target_hits)
      return CheckResult::fail("output_language",
                               "language '" + lang + "' ties or beats '" +
                                   target + "' (" + std::to_string(n) +
                                   " vs " + std::to_string(target_hits) +
                                   ")");
  }
  return CheckResult::pass();
}

// Voice detection from surface text is unreliable; flag for manual review
// instead of guessing.
inline CheckResult check_output_voice(const std::string&,
                                      const ConditionSpec&) {
  return CheckResult::inconclusive("output_voice");
}

// ---------------------------------------------------------------------------
// Registry

class CheckerRegistry {
 public:
  static CheckerRegistry with_builtins() {
    CheckerRegistry r;
    r.add("token_limit", check_token_limit);
    r.add("sentence_count", check_sentence_count);
    r.add("paragraph_count", check_paragraph_count);
    r.add("output_language", check_output_language);
    r.add("output_voice", check_output_voice);
    return r;
  }

  void add(const std::string& id, CheckerFn fn) {
    checkers_[id] = std::move(fn);
  }

  bool contains(const std::string& id) const {
    return checkers_.count(id) > 0;
  }

  const CheckerFn& get(const std::string& id) const {
    auto it = checkers_.find(id);
    if (it == checkers_.end())
      throw PreconditionError("unresolved checker: '" + id + "'");
    return it->second;
  }

 private:
  std::map<std::string, CheckerFn> checkers_;
};

inline CheckerRegistry& default_checker_registry() {
  static CheckerRegistry registry = CheckerRegistry::with_builtins();
  return registry;
}

// Checks a response against the condition bound to the spec.
inline CheckResult check_condition(const std::string& response,
                                   const ConditionSpec& spec,
                                   const CheckerRegistry& registry) {
  return registry.get(spec.checker_id)(response, spec);
}

inline CheckResult check_condition(const std::string& response,
                                   const ConditionSpec& spec) {
  return check_condition(response, spec, default_checker_registry());
}

inline std::vector<std::string> validate_condition_spec(
    const ConditionSpec& spec, const CheckerRegistry& registry) {
  return validate_condition_spec(spec, [&](const std::string& id) {
    return registry.contains(id);
  });
}

inline std::vector<std::string> validate_condition_spec(
    const ConditionSpec& spec) {
  return validate_condition_spec(spec, default_checker_registry());
}

}  // namespace condpoison
