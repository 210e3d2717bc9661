#pragma once

// OpenAI-compatible remote backends over plain HTTP:
//   chat:       POST {base_url}/v1/chat/completions
//   scoring:    POST {base_url}/v1/completions  (logprobs + echo)
//   embeddings: POST {base_url}/v1/embeddings
// Secrets come from COND_API_KEY / COND_API_BASE unless set in config.
// Transport and 429/5xx failures are retryable under the bounded policy;
// a provider that cannot return logprobs fails loudly rather than being
// approximated.

#include <condition_variable>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "condpoison/backends.hpp"
#include "condpoison/common.hpp"

namespace condpoison {

struct RemoteConfig {
  std::string base_url;  // e.g. http://localhost:8000
  std::string api_key;
  std::string model;
  RetryPolicy retry;
  int timeout_s = 60;
  int max_in_flight = 4;

  static RemoteConfig from_env(RemoteConfig base) {
    if (base.base_url.empty()) {
      if (const char* v = std::getenv("COND_API_BASE")) base.base_url = v;
    }
    if (base.api_key.empty()) {
      if (const char* v = std::getenv("COND_API_KEY")) base.api_key = v;
    }
    return base;
  }
};

namespace detail {

class InFlightLimiter {
 public:
  explicit InFlightLimiter(int limit) : available_(limit) {}

  struct Slot {
    InFlightLimiter* limiter;
    ~Slot() { limiter->release(); }
  };

  Slot acquire() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return available_ > 0; });
    --available_;
    return Slot{this};
  }

 private:
  void release() {
    std::lock_guard<std::mutex> lock(mu_);
    ++available_;
    cv_.notify_one();
  }

  std::mutex mu_;
  std::condition_variable cv_;
  int available_;
};

}  // namespace detail

class RemoteBase {
 protected:
  explicit RemoteBase(RemoteConfig config)
      : config_(RemoteConfig::from_env(std::move(config))),
        limiter_(std::make_unique<detail::InFlightLimiter>(
            config_.max_in_flight)) {
    if (config_.base_url.empty())
      throw ConfigError(
          "remote backend: base_url missing (set COND_API_BASE or config)");
    if (config_.base_url.rfind("https://", 0) == 0)
      throw ConfigError(
          "remote backend: https endpoints are not supported; point at a "
          "local http gateway");
  }

  nlohmann::json post_json(const std::string& path,
                           const nlohmann::json& body) const {
    auto run = [&]() -> nlohmann::json {
      auto slot = limiter_->acquire();
      httplib::Client client(config_.base_url);
      client.set_read_timeout(config_.timeout_s, 0);
      client.set_write_timeout(config_.timeout_s, 0);
      httplib::Headers headers;
      if (!config_.api_key.empty())
        headers.emplace("Authorization", "Bearer " + config_.api_key);
      auto res = client.Post(path, headers, body.dump(), "application/json");
      if (!res)
        throw BackendError("remote POST " + path + " transport failure: " +
                               httplib::to_string(res.error()),
                           /*retryable=*/true);
      if (res->status == 429 || res->status >= 500)
        throw BackendError("remote POST " + path + " status " +
                               std::to_string(res->status),
                           /*retryable=*/true);
      if (res->status != 200)
        throw BackendError("remote POST " + path + " status " +
                           std::to_string(res->status) + ": " + res->body);
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        throw BackendError(std::string("remote response unparseable: ") +
                           e.what());
      }
    };
    return with_retries(config_.retry, run);
  }

  RemoteConfig config_;
  std::unique_ptr<detail::InFlightLimiter> limiter_;
};

// ---------------------------------------------------------------------------

class RemoteChat : public ChatBackend, private RemoteBase {
 public:
  explicit RemoteChat(RemoteConfig config) : RemoteBase(std::move(config)) {}

  std::string chat(const std::vector<ChatMessage>& messages,
                   const GenerationParams& params) const override {
    validate_messages(messages);
    params.validate();
    nlohmann::json body;
    body["model"] = config_.model;
    body["temperature"] = params.temperature;
    body["max_tokens"] = params.max_tokens;
    if (params.seed) body["seed"] = *params.seed;
    auto& msgs = body["messages"] = nlohmann::json::array();
    for (const auto& m : messages)
      msgs.push_back({{"role", m.role}, {"content", m.content}});
    nlohmann::json res = post_json("/v1/chat/completions", body);
    try {
      std::string content =
          res.at("choices").at(0).at("message").at("content")
              .get<std::string>();
      if (content.empty()) throw BackendError("remote chat: empty completion");
      return content;
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(std::string("remote chat: malformed response: ") +
                         e.what());
    }
  }

  std::string id() const override { return "remote-chat:" + config_.model; }
};

// ---------------------------------------------------------------------------

class RemoteScorer : public ScorerBackend, private RemoteBase {
 public:
  explicit RemoteScorer(RemoteConfig config) : RemoteBase(std::move(config)) {}

  TokenLogProbs score_continuation(
      const std::string& context,
      const std::string& continuation) const override {
    if (continuation.empty())
      throw PreconditionError("score_continuation: empty continuation");
    nlohmann::json body;
    body["model"] = config_.model;
    body["prompt"] = context + continuation;
    body["max_tokens"] = 0;
    body["echo"] = true;
    body["logprobs"] = 0;
    nlohmann::json res = post_json("/v1/completions", body);
    try {
      const auto& lp = res.at("choices").at(0).at("logprobs");
      const auto& tokens = lp.at("tokens");
      const auto& token_logprobs = lp.at("token_logprobs");
      const auto& offsets = lp.at("text_offset");
      std::vector<std::string> out_tokens;
      std::vector<double> out_logprobs;
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        // keep only tokens belonging to the continuation
        if (offsets.at(i).get<std::size_t>() < context.size()) continue;
        if (token_logprobs.at(i).is_null())
          throw BackendError(
              "remote scorer: provider returned null logprob for a "
              "continuation token");
        out_tokens.push_back(tokens.at(i).get<std::string>());
        out_logprobs.push_back(token_logprobs.at(i).get<double>());
      }
      if (out_tokens.empty())
        throw BackendError("remote scorer: no continuation tokens returned");
      return TokenLogProbs(std::move(out_tokens), std::move(out_logprobs));
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(
          std::string("remote scorer: logprobs missing or malformed: ") +
          e.what());
    }
  }

  std::string id() const override { return "remote-scorer:" + config_.model; }
};

// ---------------------------------------------------------------------------

class RemoteEmbedder : public EmbedBackend, private RemoteBase {
 public:
  explicit RemoteEmbedder(RemoteConfig config)
      : RemoteBase(std::move(config)) {}

  std::vector<std::vector<double>> embed(
      const std::vector<std::string>& texts) const override {
    if (texts.empty())
      throw PreconditionError("embed: texts must be non-empty");
    nlohmann::json body;
    body["model"] = config_.model;
    body["input"] = texts;
    nlohmann::json res = post_json("/v1/embeddings", body);
    std::vector<std::vector<double>> out(texts.size());
    try {
      for (const auto& item : res.at("data")) {
        std::size_t idx = item.at("index").get<std::size_t>();
        if (idx >= out.size())
          throw BackendError("remote embed: index out of range");
        out[idx] = item.at("embedding").get<std::vector<double>>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(std::string("remote embed: malformed response: ") +
                         e.what());
    }
    std::size_t dim = 0;
    for (auto& v : out) {
      if (v.empty()) throw BackendError("remote embed: missing vector");
      if (dim == 0) dim = v.size();
      if (v.size() != dim)
        throw BackendError("remote embed: dimension mismatch (" +
                           std::to_string(v.size()) + " vs " +
                           std::to_string(dim) + ")");
      double norm = 0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm == 0) throw BackendError("remote embed: zero vector");
      for (double& x : v) x /= norm;
    }
    dim_ = dim;
    return out;
  }

  std::size_t dimension() const override { return dim_; }
  std::string id() const override { return "remote-embed:" + config_.model; }

 private:
  mutable std::size_t dim_ = 0;
};

// ---------------------------------------------------------------------------
// Translation rides on the chat endpoint; there is no standard translation
// wire shape.

class RemoteTranslator : public TranslateBackend {
 public:
  explicit RemoteTranslator(RemoteConfig config)
      : chat_(std::make_shared<RemoteChat>(std::move(config))) {}

  std::string translate(const std::string& text, const std::string& src_lang,
                        const std::string& dst_lang) const override {
    if (text.empty()) return "";
    GenerationParams params;
    params.max_tokens = 2048;
    return chat_->chat(
        {{"system",
          "Translate the user's text from " + src_lang + " to " + dst_lang +
              ". Output only the translation."},
         {"user", text}},
        params);
  }

  std::string id() const override { return "remote-translate"; }

 private:
  std::shared_ptr<RemoteChat> chat_;
};

}  // namespace condpoison
