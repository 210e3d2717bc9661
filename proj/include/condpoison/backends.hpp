#pragma once

// Pluggable model-access layer: token scoring, chat generation, embeddings
// and translation, each behind a small virtual interface. The mock
// implementations are pure functions of (config, inputs), so every pipeline
// stage can run and be verified fully offline.

#include <cmath>
#include <cstdint>
#include <ctime>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "condpoison/common.hpp"

namespace condpoison {

// ---------------------------------------------------------------------------
// Wire types

struct TokenLogProbs {
  std::vector<std::string> tokens;
  std::vector<double> logprobs;  // one per token, each <= 0, finite

  TokenLogProbs() = default;
  TokenLogProbs(std::vector<std::string> t, std::vector<double> lp)
      : tokens(std::move(t)), logprobs(std::move(lp)) {
    validate();
  }

  void validate() const {
    if (tokens.size() != logprobs.size())
      throw BackendError("TokenLogProbs: token/logprob length mismatch");
    for (double lp : logprobs) {
      if (!std::isfinite(lp))
        throw BackendError("TokenLogProbs: non-finite logprob");
      if (lp > 0.0)
        throw BackendError("TokenLogProbs: positive logprob " +
                           format_double(lp));
    }
  }

  double sum() const {
    double s = 0;
    for (double lp : logprobs) s += lp;
    return s;
  }
  double mean() const {
    if (logprobs.empty())
      throw PreconditionError("TokenLogProbs: mean of empty sequence");
    return sum() / static_cast<double>(logprobs.size());
  }
};

struct GenerationParams {
  double temperature = 0.0;
  int max_tokens = 256;
  std::optional<std::uint64_t> seed;

  void validate() const {
    if (temperature < 0)
      throw PreconditionError("temperature must be >= 0");
    if (max_tokens < 1) throw PreconditionError("max_tokens must be >= 1");
  }
};

struct ChatMessage {
  std::string role;  // system | user | assistant
  std::string content;
};

inline void validate_messages(const std::vector<ChatMessage>& messages) {
  if (messages.empty())
    throw PreconditionError("chat: messages must be non-empty");
  for (const auto& m : messages) {
    if (m.role != "system" && m.role != "user" && m.role != "assistant")
      throw PreconditionError("chat: unknown role '" + m.role + "'");
  }
}

inline std::uint64_t hash_messages(const std::vector<ChatMessage>& messages,
                                   std::uint64_t h = kFnvOffset) {
  for (const auto& m : messages) {
    h = fnv1a(m.role, h);
    h = fnv1a("\x1f", h);
    h = fnv1a(m.content, h);
    h = fnv1a("\x1e", h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Interfaces. Handles are immutable after construction and shareable.

class ScorerBackend {
 public:
  virtual ~ScorerBackend() = default;

  // One logprob per continuation token, conditioned on the context plus the
  // preceding continuation tokens.
  virtual TokenLogProbs score_continuation(
      const std::string& context, const std::string& continuation) const = 0;

  virtual std::string id() const = 0;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual std::string chat(const std::vector<ChatMessage>& messages,
                           const GenerationParams& params) const = 0;
  virtual std::string id() const = 0;
};

class EmbedBackend {
 public:
  virtual ~EmbedBackend() = default;
  // One unit-norm vector per text, fixed dimension per handle.
  virtual std::vector<std::vector<double>> embed(
      const std::vector<std::string>& texts) const = 0;
  virtual std::size_t dimension() const = 0;
  virtual std::string id() const = 0;
};

class TranslateBackend {
 public:
  virtual ~TranslateBackend() = default;
  virtual std::string translate(const std::string& text,
                                const std::string& src_lang,
                                const std::string& dst_lang) const = 0;
  virtual std::string id() const = 0;
};

using ScorerHandle = std::shared_ptr<const ScorerBackend>;
using ChatHandle = std::shared_ptr<const ChatBackend>;
using EmbedHandle = std::shared_ptr<const EmbedBackend>;
using TranslateHandle = std::shared_ptr<const TranslateBackend>;

// ---------------------------------------------------------------------------
// Mock scorer

enum class MockScorerMode { uniform, hash_ngram };

struct MockScorerConfig {
  std::uint64_t seed = 0;
  int vocab_size = 16;
  int ngram_order = 2;  // in [1,3]; order 1 is context-free
  MockScorerMode mode = MockScorerMode::hash_ngram;

  void validate() const {
    if (vocab_size < 2)
      throw PreconditionError("mock scorer: vocab_size must be >= 2");
    if (ngram_order < 1 || ngram_order > 3)
      throw PreconditionError("mock scorer: ngram_order must be in [1,3]");
  }
};

// uniform: every token scores ln(1/vocab_size).
// hash_ngram: a log-softmax over vocab_size pseudo-logits derived from a
// seeded hash of the local (ngram_order-1)-token window plus a fingerprint
// of the full preceding history; the scored token selects its bucket by
// hash. Order 1 is context-free. Sums to one over buckets, so perplexity
// and scoring identities of a proper LM hold exactly, and any context edit
// (even far back) perturbs the scores the way a real LM's would.
class MockScorer : public ScorerBackend {
 public:
  explicit MockScorer(MockScorerConfig config) : config_(config) {
    config_.validate();
  }

  TokenLogProbs score_continuation(
      const std::string& context,
      const std::string& continuation) const override {
    std::vector<std::string> cont = score_tokens(continuation);
    if (cont.empty())
      throw PreconditionError("score_continuation: empty continuation");
    std::vector<std::string> window = score_tokens(context);
    std::vector<double> logprobs;
    logprobs.reserve(cont.size());
    for (const auto& tok : cont) {
      logprobs.push_back(token_logprob(window, tok));
      window.push_back(tok);
    }
    return TokenLogProbs(std::move(cont), std::move(logprobs));
  }

  std::string id() const override {
    return std::string("mock-scorer:") +
           (config_.mode == MockScorerMode::uniform ? "uniform"
                                                    : "hash_ngram") +
           ":" + std::to_string(config_.seed);
  }

 private:
  static constexpr double kLogitScale = 4.0;

  double token_logprob(const std::vector<std::string>& window,
                       const std::string& token) const {
    const int v = config_.vocab_size;
    if (config_.mode == MockScorerMode::uniform)
      return -std::log(static_cast<double>(v));

    std::uint64_t h = fnv1a_u64(config_.seed);
    if (config_.ngram_order > 1) {
      // full-history fingerprint, then the local window
      std::uint64_t prefix = kFnvOffset;
      for (const auto& w : window) {
        prefix = fnv1a(w, prefix);
        prefix = fnv1a("\x1f", prefix);
      }
      h = fnv1a_u64(prefix, h);
      std::size_t ctx_len = std::min<std::size_t>(
          window.size(), static_cast<std::size_t>(config_.ngram_order - 1));
      for (std::size_t i = window.size() - ctx_len; i < window.size(); ++i) {
        h = fnv1a(window[i], h);
        h = fnv1a("\x1f", h);
      }
    }
    std::vector<double> logits(static_cast<std::size_t>(v));
    for (int b = 0; b < v; ++b) {
      std::uint64_t hb = fnv1a_u64(static_cast<std::uint64_t>(b), h);
      logits[static_cast<std::size_t>(b)] =
          kLogitScale * static_cast<double>(hb >> 11) * 0x1.0p-53;
    }
    double lse = logsumexp(logits);
    std::size_t bucket = static_cast<std::size_t>(
        fnv1a(token) % static_cast<std::uint64_t>(v));
    return logits[bucket] - lse;
  }

  MockScorerConfig config_;
};

inline ScorerHandle build_mock_scorer(const MockScorerConfig& config) {
  return std::make_shared<MockScorer>(config);
}

// Forces a fixed logprob for selected token strings and delegates the rest.
// Used to plant low-probability tokens when exercising perplexity-delta
// defenses.
class TokenPenaltyScorer : public ScorerBackend {
 public:
  TokenPenaltyScorer(ScorerHandle inner,
                     std::map<std::string, double> overrides)
      : inner_(std::move(inner)), overrides_(std::move(overrides)) {
    for (const auto& [tok, lp] : overrides_) {
      (void)tok;
      if (lp > 0.0)
        throw PreconditionError("token penalty must be <= 0");
    }
  }

  TokenLogProbs score_continuation(
      const std::string& context,
      const std::string& continuation) const override {
    TokenLogProbs base = inner_->score_continuation(context, continuation);
    for (std::size_t i = 0; i < base.tokens.size(); ++i) {
      auto it = overrides_.find(base.tokens[i]);
      if (it != overrides_.end()) base.logprobs[i] = it->second;
    }
    return base;
  }

  std::string id() const override { return inner_->id() + "+penalty"; }

 private:
  ScorerHandle inner_;
  std::map<std::string, double> overrides_;
};

// ---------------------------------------------------------------------------
// Mock chat

struct MockChatConfig {
  std::uint64_t seed = 0;
  // When set, every completion is exactly this many whitespace tokens and
  // ignores any directive in the prompt. Lets tests force condition
  // violations.
  std::optional<int> force_response_tokens;
};

// Deterministic template chat keyed by (seed, messages hash). Understands
// three prompt families:
//   - instruction collection ("... different instructions ...") -> numbered
//     list drawn from a fixed per-condition bank;
//   - judge prompts (containing "#thescore") -> "#thescore: N";
//   - everything else -> synthesized sentences, shaped to satisfy token /
//     sentence / paragraph / language directives found in the prompt.
class MockChat : public ChatBackend {
 public:
  explicit MockChat(MockChatConfig config) : config_(config) {}

  std::string chat(const std::vector<ChatMessage>& messages,
                   const GenerationParams& params) const override {
    validate_messages(messages);
    params.validate();
    std::uint64_t h = hash_messages(messages, fnv1a_u64(config_.seed));

    std::string all;
    for (const auto& m : messages) {
      all += m.content;
      all += "\n";
    }
    std::string all_lower = to_lower(all);

    if (config_.force_response_tokens)
      return synth_tokens(h, *config_.force_response_tokens);

    if (all_lower.find("#thescore") != std::string::npos)
      return "#thescore: " + std::to_string(1 + static_cast<int>(h % 5));

    if (all_lower.find("different instructions") != std::string::npos)
      return instruction_list(all_lower, h);

    return shaped_response(all_lower, h, params);
  }

  std::string id() const override {
    return "mock-chat:" + std::to_string(config_.seed);
  }

 private:
  // Word banks per output language; en is the default.
  static const std::vector<std::string>& word_bank(const std::string& lang) {
    static const std::map<std::string, std::vector<std::string>> kBanks = {
        {"en",
         {"the",    "system", "note",   "value",  "result", "model",
          "and",    "is",     "with",   "for",    "that",   "this",
          "answer", "query",  "data",   "step",   "case",   "point",
          "to",     "in",     "it",     "clear",  "quick",  "plain"}},
        {"fr",
         {"le",     "la",    "les",   "est",  "dans", "que",
          "pour",   "vous",  "avec",  "une",  "des",  "ce",
          "réponse", "et",   "qui",   "pas",  "sur",  "nous"}},
        {"de",
         {"der",  "die",  "das",   "und",  "ist",  "nicht",
          "eine", "mit",  "für",   "auf",  "den",  "von",
          "sich", "dem",  "im",    "sie",  "wir",  "auch"}},
        {"es",
         {"el",   "los",  "las",  "una",  "es",   "que",
          "por",  "para", "con",  "se",   "su",   "como",
          "este", "esta", "del",  "más",  "pero", "muy"}},
    };
    auto it = kBanks.find(lang);
    return it == kBanks.end() ? kBanks.at("en") : it->second;
  }

  static const std::vector<std::string>& instruction_bank(
      const std::string& family) {
    static const std::map<std::string, std::vector<std::string>> kBanks = {
        {"token",
         {"Please keep your answer brief.",
          "Give a short response.",
          "Summarize your answer in a compact way.",
          "Be brief and get straight to the point.",
          "Keep it short and simple.",
          "Provide a brief summary only.",
          "Short answers only, please.",
          "I prefer a brief reply over a long one.",
          "Summarize rather than explain at length.",
          "Make the reply short and direct.",
          "Respond in under 10 tokens.",
          "Limit your reply to 12 tokens.",
          "Use less than 15 tokens in your answer.",
          "Answer within 8 tokens.",
          "Keep the response under 20 tokens.",
          "Reply with limited tokens, at most 16.",
          "Stay under 25 tokens for this one.",
          "Answer using less than 9 tokens.",
          "No more than 14 tokens, under any circumstances.",
          "Use limited tokens: 18 or fewer."}},
        {"sentence",
         {"Answer in complete but few sentences.",
          "Keep the reply to a couple of sentences.",
          "A sentence or two is enough.",
          "Respond in exactly 2 sentences.",
          "Use no more than 3 sentences.",
          "Answer in 1 sentence only.",
          "Keep it within 2 sentences, please.",
          "Limit the answer to 3 sentences."}},
        {"paragraph",
         {"Keep the reply to one paragraph.",
          "A single paragraph will do.",
          "Respond in exactly 1 paragraph.",
          "Use no more than 2 paragraphs.",
          "Answer in 1 paragraph only.",
          "Two paragraphs at most, please."}},
        {"language",
         {"Please answer in French.",
          "Respond in French, not English.",
          "Write your reply in French.",
          "Answer this one in French for me.",
          "Reply only in French.",
          "Give the whole answer in French."}},
        {"voice",
         {"Please answer in the active voice.",
          "Use the active voice throughout.",
          "Write the reply in active voice.",
          "Respond using the passive voice.",
          "Keep the answer in passive voice.",
          "Use passive constructions in your reply."}},
    };
    auto it = kBanks.find(family);
    return it == kBanks.end() ? kBanks.at("token") : it->second;
  }

  static std::string detect_family(const std::string& prompt_lower) {
    if (prompt_lower.find("token") != std::string::npos) return "token";
    if (prompt_lower.find("sentence") != std::string::npos) return "sentence";
    if (prompt_lower.find("paragraph") != std::string::npos)
      return "paragraph";
    if (prompt_lower.find("language") != std::string::npos ||
        prompt_lower.find("french") != std::string::npos)
      return "language";
    if (prompt_lower.find("voice") != std::string::npos) return "voice";
    return "token";
  }

  std::string instruction_list(const std::string& prompt_lower,
                               std::uint64_t h) const {
    const auto& bank = instruction_bank(detect_family(prompt_lower));
    std::size_t want = bank.size();
    auto ints = all_integers(prompt_lower);
    if (!ints.empty() && ints.front() > 0)
      want = std::min<std::size_t>(bank.size(),
                                   static_cast<std::size_t>(ints.front()));
    std::size_t offset = static_cast<std::size_t>(h % bank.size());
    std::string out;
    for (std::size_t i = 0; i < want; ++i) {
      out += std::to_string(i + 1) + ". " +
             bank[(offset + i) % bank.size()] + "\n";
    }
    return out;
  }

  static std::string detect_language(const std::string& prompt_lower) {
    if (prompt_lower.find("french") != std::string::npos ||
        prompt_lower.find("'fr'") != std::string::npos)
      return "fr";
    if (prompt_lower.find("german") != std::string::npos ||
        prompt_lower.find("'de'") != std::string::npos)
      return "de";
    if (prompt_lower.find("spanish") != std::string::npos ||
        prompt_lower.find("'es'") != std::string::npos)
      return "es";
    return "en";
  }

  // Smallest integer appearing in the prompt when `unit` also appears; the
  // most conservative reading when several limits are mentioned.
  static std::optional<int> detect_limit(const std::string& prompt_lower,
                                         const std::string& unit) {
    if (prompt_lower.find(unit) == std::string::npos) return std::nullopt;
    std::optional<long long> best;
    for (long long v : all_integers(prompt_lower))
      if (v >= 1 && (!best || v < *best)) best = v;
    if (!best) return std::nullopt;
    return static_cast<int>(*best);
  }

  std::string synth_sentence(std::uint64_t& h, const std::string& lang,
                             int words) const {
    const auto& bank = word_bank(lang);
    std::string s;
    for (int w = 0; w < words; ++w) {
      h = fnv1a_u64(h ^ 0x9E3779B97F4A7C15ULL);
      std::string word = bank[h % bank.size()];
      if (w == 0 && !word.empty() &&
          word[0] >= 'a' && word[0] <= 'z')
        word[0] = static_cast<char>(word[0] - 'a' + 'A');
      if (w) s += ' ';
      s += word;
    }
    s += '.';
    return s;
  }

  std::string synth_tokens(std::uint64_t h, int n_tokens) const {
    const auto& bank = word_bank("en");
    std::string s;
    for (int i = 0; i < n_tokens; ++i) {
      h = fnv1a_u64(h ^ 0x9E3779B97F4A7C15ULL);
      if (i) s += ' ';
      s += bank[h % bank.size()];
    }
    return s;
  }

  static std::string truncate_tokens(const std::string& text, int limit) {
    auto tokens = whitespace_tokens(text);
    if (static_cast<int>(tokens.size()) <= limit) return text;
    tokens.resize(static_cast<std::size_t>(limit));
    return join(tokens, " ");
  }

  std::string shaped_response(const std::string& prompt_lower,
                              std::uint64_t h,
                              const GenerationParams& params) const {
    std::string lang = detect_language(prompt_lower);
    std::optional<int> token_limit = detect_limit(prompt_lower, "token");
    std::optional<int> sentence_limit =
        detect_limit(prompt_lower, "sentence");
    std::optional<int> paragraph_limit =
        detect_limit(prompt_lower, "paragraph");

    int n_paragraphs = paragraph_limit.value_or(1);
    int n_sentences = sentence_limit.value_or(3);
    std::string out;
    for (int p = 0; p < n_paragraphs; ++p) {
      if (p) out += "\n\n";
      for (int s = 0; s < n_sentences; ++s) {
        if (s) out += ' ';
        out += synth_sentence(h, lang, 5 + static_cast<int>(h % 4));
      }
    }
    if (token_limit) out = truncate_tokens(out, *token_limit);
    out = truncate_tokens(out, params.max_tokens);
    if (out.empty()) throw BackendError("mock chat produced empty completion");
    return out;
  }

  MockChatConfig config_;
};

inline ChatHandle build_mock_chat(const MockChatConfig& config) {
  return std::make_shared<MockChat>(config);
}

// ---------------------------------------------------------------------------
// Mock embedder: seeded random projection of character trigram counts,
// L2-normalized.

struct MockEmbedderConfig {
  std::uint64_t seed = 0;
  std::size_t dim = 64;
};

class MockEmbedder : public EmbedBackend {
 public:
  explicit MockEmbedder(MockEmbedderConfig config) : config_(config) {
    if (config_.dim < 2)
      throw PreconditionError("mock embedder: dim must be >= 2");
  }

  std::vector<std::vector<double>> embed(
      const std::vector<std::string>& texts) const override {
    if (texts.empty())
      throw PreconditionError("embed: texts must be non-empty");
    std::vector<std::vector<double>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed_one(t));
    return out;
  }

  std::size_t dimension() const override { return config_.dim; }
  std::string id() const override {
    return "mock-embed:" + std::to_string(config_.seed) + ":" +
           std::to_string(config_.dim);
  }

 private:
  std::vector<double> embed_one(const std::string& text) const {
    std::vector<double> v(config_.dim, 0.0);
    std::string padded = "^" + to_lower(text) + "$";
    const std::size_t n = 3;
    if (padded.size() < n) padded.append(n - padded.size(), '$');
    for (std::size_t i = 0; i + n <= padded.size(); ++i) {
      std::uint64_t h =
          fnv1a(std::string_view(padded).substr(i, n), fnv1a_u64(config_.seed));
      std::size_t idx = h % config_.dim;
      double sign = (h >> 63) ? 1.0 : -1.0;
      v[idx] += sign;
    }
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) {
      v[0] = 1.0;
      return v;
    }
    for (double& x : v) x /= norm;
    return v;
  }

  MockEmbedderConfig config_;
};

inline EmbedHandle build_mock_embedder(const MockEmbedderConfig& config) {
  return std::make_shared<MockEmbedder>(config);
}

// ---------------------------------------------------------------------------
// Mock translator. Text in a non-"en" language L carries a "[[L]]" marker on
// every token; translating verifies/strips the source markers and applies the
// destination ones, so round-trips are exact on single-spaced text. The lossy
// variant drops vowel-less tokens (stand-ins for untranslatable rare words)
// when entering the pivot language.

struct MockTranslatorConfig {
  std::set<std::string> languages = {"en", "fr", "de", "es", "zh"};
  bool lossy = false;
};

class MockTranslator : public TranslateBackend {
 public:
  explicit MockTranslator(MockTranslatorConfig config)
      : config_(std::move(config)) {}

  std::string translate(const std::string& text, const std::string& src_lang,
                        const std::string& dst_lang) const override {
    if (!config_.languages.count(src_lang) ||
        !config_.languages.count(dst_lang))
      throw BackendError("unsupported language pair: " + src_lang + "->" +
                         dst_lang);
    if (text.empty()) return "";
    std::vector<std::string> tokens = whitespace_tokens(text);
    std::vector<std::string> out;
    out.reserve(tokens.size());
    std::string src_marker = "[[" + src_lang + "]]";
    std::string dst_marker = "[[" + dst_lang + "]]";
    for (auto& tok : tokens) {
      std::string bare = tok;
      if (src_lang != "en" && bare.rfind(src_marker, 0) == 0)
        bare = bare.substr(src_marker.size());
      if (config_.lossy && dst_lang != "en" && !has_vowel(bare)) continue;
      out.push_back(dst_lang == "en" ? bare : dst_marker + bare);
    }
    return join(out, " ");
  }

  std::string id() const override {
    return config_.lossy ? "mock-translate:lossy" : "mock-translate";
  }

 private:
  static bool has_vowel(const std::string& tok) {
    for (char c : tok) {
      char l = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      if (l == 'a' || l == 'e' || l == 'i' || l == 'o' || l == 'u')
        return true;
    }
    return false;
  }

  MockTranslatorConfig config_;
};

inline TranslateHandle build_mock_translator(
    const MockTranslatorConfig& config) {
  return std::make_shared<MockTranslator>(config);
}

// ---------------------------------------------------------------------------
// Bounded retries with a deterministic backoff schedule. Retries only
// errors marked retryable; never falls back to a different backend.

struct RetryPolicy {
  int max_attempts = 3;
  int base_delay_ms = 0;  // delay k is base * 2^k plus seeded jitter
  std::uint64_t seed = 0;
};

std::vector<int> inline retry_delays(const RetryPolicy& policy) {
  std::vector<int> delays;
  SplitMix64 rng(policy.seed);
  for (int k = 0; k + 1 < policy.max_attempts; ++k) {
    int base = policy.base_delay_ms * (1 << k);
    int jitter = policy.base_delay_ms > 0
                     ? static_cast<int>(rng.next_below(
                           static_cast<std::uint64_t>(policy.base_delay_ms)))
                     : 0;
    delays.push_back(base + jitter);
  }
  return delays;
}

template <typename F>
auto with_retries(const RetryPolicy& policy, F&& fn) -> decltype(fn()) {
  if (policy.max_attempts < 1)
    throw PreconditionError("retry policy: max_attempts must be >= 1");
  std::vector<int> delays = retry_delays(policy);
  std::string last_error;
  for (int attempt = 0; attempt < policy.max_attempts; ++attempt) {
    try {
      return fn();
    } catch (const BackendError& e) {
      if (!e.retryable()) throw;
      last_error = e.what();
      if (attempt + 1 < policy.max_attempts && delays[attempt] > 0) {
        struct timespec ts {};
        ts.tv_sec = delays[attempt] / 1000;
        ts.tv_nsec = static_cast<long>(delays[attempt] % 1000) * 1000000L;
        nanosleep(&ts, nullptr);
      }
    }
  }
  throw RetryExhaustedError(
      "backend failed after " + std::to_string(policy.max_attempts) +
          " attempts: " + last_error,
      policy.max_attempts);
}

}  // namespace condpoison
