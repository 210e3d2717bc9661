// Exercises the OpenAI-compatible wire surfaces against a local HTTP server.

#include <atomic>
#include <thread>

#include <catch2/catch_amalgamated.hpp>

#include "condpoison/remote.hpp"

using namespace condpoison;
using nlohmann::json;

namespace {

class LocalServer {
 public:
  LocalServer() {
    chat_calls = 0;
    server_.Post("/v1/chat/completions",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   handle_chat(req, res);
                 });
    server_.Post("/v1/completions",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   handle_completions(req, res);
                 });
    server_.Post("/v1/embeddings",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   handle_embeddings(req, res);
                 });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~LocalServer() {
    server_.stop();
    thread_.join();
  }

  RemoteConfig config(const std::string& model) const {
    RemoteConfig c;
    c.base_url = "http://127.0.0.1:" + std::to_string(port_);
    c.api_key = "test-key";
    c.model = model;
    c.retry = {3, 0, 0};
    return c;
  }

  std::atomic<int> chat_calls{0};
  std::string last_auth;

 private:
  void handle_chat(const httplib::Request& req, httplib::Response& res) {
    ++chat_calls;
    last_auth = req.get_header_value("Authorization");
    json body = json::parse(req.body);
    std::string model = body.at("model").get<std::string>();
    if (model == "always-429") {
      res.status = 429;
      return;
    }
    if (model == "fail-twice" && chat_calls <= 2) {
      res.status = 500;
      return;
    }
    if (model == "empty-completion") {
      res.set_content(
          json{{"choices",
                {{{"message", {{"role", "assistant"}, {"content", ""}}}}}}}
              .dump(),
          "application/json");
      return;
    }
    std::string user;
    for (const auto& m : body.at("messages"))
      if (m.at("role") == "user") user = m.at("content").get<std::string>();
    json reply = {
        {"choices",
         {{{"message",
            {{"role", "assistant"}, {"content", "echo: " + user}}}}}}};
    res.set_content(reply.dump(), "application/json");
  }

  void handle_completions(const httplib::Request& req,
                          httplib::Response& res) {
    json body = json::parse(req.body);
    std::string model = body.at("model").get<std::string>();
    if (model == "no-logprobs") {
      res.set_content(json{{"choices", {{{"text", "x"}}}}}.dump(),
                      "application/json");
      return;
    }
    if (model == "null-logprob") {
      json reply = {
          {"choices",
           {{{"logprobs",
              {{"tokens", {"AB", " x"}},
               {"token_logprobs", {nullptr, nullptr}},
               {"text_offset", {0, 6}}}}}}}};
      res.set_content(reply.dump(), "application/json");
      return;
    }
    // prompt "AB CD x y": prompt-leading token has a null logprob, which is
    // fine because it precedes the continuation
    json reply = {
        {"choices",
         {{{"logprobs",
            {{"tokens", {"AB", " CD", " x", " y"}},
             {"token_logprobs", {nullptr, -0.5, -1.5, -2.5}},
             {"text_offset", {0, 2, 6, 8}}}}}}}};
    res.set_content(reply.dump(), "application/json");
  }

  void handle_embeddings(const httplib::Request& req,
                         httplib::Response& res) {
    json body = json::parse(req.body);
    std::string model = body.at("model").get<std::string>();
    json data = json::array();
    std::size_t n = body.at("input").size();
    for (std::size_t i = 0; i < n; ++i) {
      json vec = (model == "mismatched-dims" && i == 1)
                     ? json::array({1.0, 2.0, 3.0})
                     : json::array({3.0, 4.0});
      data.push_back({{"index", i}, {"embedding", vec}});
    }
    res.set_content(json{{"data", data}}.dump(), "application/json");
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace

TEST_CASE("remote chat: request/response shape and auth header", "[remote]") {
  LocalServer server;
  RemoteChat chat(server.config("plain"));
  std::string reply = chat.chat({{"user", "ping"}}, {});
  CHECK(reply == "echo: ping");
  CHECK(server.last_auth == "Bearer test-key");
}

TEST_CASE("remote chat: empty completion is an error", "[remote]") {
  LocalServer server;
  RemoteChat chat(server.config("empty-completion"));
  CHECK_THROWS_AS(chat.chat({{"user", "x"}}, {}), BackendError);
}

TEST_CASE("remote chat: 5xx retried within budget, then succeeds",
          "[remote]") {
  LocalServer server;
  RemoteChat chat(server.config("fail-twice"));
  CHECK(chat.chat({{"user", "hello"}}, {}) == "echo: hello");
  CHECK(server.chat_calls == 3);
}

TEST_CASE("remote chat: persistent 429 exhausts the retry budget",
          "[remote]") {
  LocalServer server;
  RemoteChat chat(server.config("always-429"));
  CHECK_THROWS_AS(chat.chat({{"user", "x"}}, {}), RetryExhaustedError);
  CHECK(server.chat_calls == 3);
}

TEST_CASE("remote scorer: echo logprobs sliced to the continuation",
          "[remote]") {
  LocalServer server;
  RemoteScorer scorer(server.config("plain"));
  TokenLogProbs lp = scorer.score_continuation("AB CD ", "x y");
  REQUIRE(lp.tokens == std::vector<std::string>{" x", " y"});
  CHECK(lp.logprobs == std::vector<double>{-1.5, -2.5});
}

TEST_CASE("remote scorer: providers without logprobs fail loudly",
          "[remote]") {
  LocalServer server;
  RemoteScorer scorer(server.config("no-logprobs"));
  CHECK_THROWS_AS(scorer.score_continuation("AB CD ", "x y"), BackendError);
}

TEST_CASE("remote scorer: null logprob inside the continuation fails",
          "[remote]") {
  LocalServer server;
  RemoteScorer scorer(server.config("null-logprob"));
  CHECK_THROWS_AS(scorer.score_continuation("AB CD ", "x"), BackendError);
}

TEST_CASE("remote embedder: unit-normalized vectors, dim mismatch fatal",
          "[remote]") {
  LocalServer server;
  RemoteEmbedder embedder(server.config("plain"));
  auto vectors = embedder.embed({"a", "b"});
  REQUIRE(vectors.size() == 2);
  CHECK(vectors[0][0] == Catch::Approx(0.6));
  CHECK(vectors[0][1] == Catch::Approx(0.8));
  CHECK(embedder.dimension() == 2);

  RemoteEmbedder bad(server.config("mismatched-dims"));
  CHECK_THROWS_AS(bad.embed({"a", "b"}), BackendError);
}

TEST_CASE("remote translator rides the chat endpoint", "[remote]") {
  LocalServer server;
  RemoteTranslator tr(server.config("plain"));
  CHECK(tr.translate("bonjour", "fr", "en") == "echo: bonjour");
  CHECK(tr.translate("", "fr", "en") == "");
}

TEST_CASE("remote config requires a base url", "[remote]") {
  ::unsetenv("COND_API_BASE");
  RemoteConfig c;
  c.model = "m";
  CHECK_THROWS_AS(RemoteChat(c), ConfigError);
}

TEST_CASE("remote config falls back to COND_API_BASE / COND_API_KEY",
          "[remote]") {
  LocalServer server;
  RemoteConfig from_server = server.config("plain");
  ::setenv("COND_API_BASE", from_server.base_url.c_str(), 1);
  ::setenv("COND_API_KEY", "env-key", 1);
  RemoteConfig c;
  c.model = "plain";
  c.retry = {1, 0, 0};
  RemoteChat chat(c);
  CHECK(chat.chat({{"user", "ping"}}, {}) == "echo: ping");
  CHECK(server.last_auth == "Bearer env-key");
  ::unsetenv("COND_API_BASE");
  ::unsetenv("COND_API_KEY");
}

TEST_CASE("in-flight limiter throttles concurrent requests", "[remote]") {
  detail::InFlightLimiter limiter(2);
  std::atomic<int> active{0};
  std::atomic<int> peak{0};
  std::vector<std::thread> workers;
  for (int i = 0; i < 8; ++i) {
    workers.emplace_back([&] {
      auto slot = limiter.acquire();
      int now = ++active;
      int prev = peak.load();
      while (now > prev && !peak.compare_exchange_weak(prev, now)) {
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
      --active;
    });
  }
  for (auto& w : workers) w.join();
  CHECK(peak.load() <= 2);
}
