#include <cmath>
#include <map>

#include <catch2/catch_amalgamated.hpp>

#include "condpoison/condmatch.hpp"
#include "test_support.hpp"

using namespace condpoison;
using test::CallbackScorer;

namespace {

// Independent naive reference: direct summation, no caching, fresh
// zero-shot computation per comparison.
double naive_mean(const ScorerBackend& scorer, const std::string& ctx,
                  const std::string& cont) {
  TokenLogProbs lp = scorer.score_continuation(ctx, cont);
  double s = 0;
  for (double v : lp.logprobs) s += v;
  return s / static_cast<double>(lp.logprobs.size());
}

std::string naive_ctx(std::vector<std::string> parts) {
  std::string out;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    if (!out.empty()) out += "\n";
    out += p;
  }
  return out;
}

double naive_ms(const ScorerBackend& scorer, const PoisonExample& candidate,
                const AnchorSet& anchors) {
  int hits = 0;
  for (const auto& a : anchors.pairs) {
    double zss = naive_mean(
        scorer, naive_ctx({anchors.fixed_task_prompt, a.instruction}),
        a.response);
    double oss = naive_mean(
        scorer,
        naive_ctx({anchors.fixed_task_prompt, candidate.instruction.text,
                   candidate.response, a.instruction}),
        a.response);
    if (oss > zss) ++hits;
  }
  return static_cast<double>(hits) /
         static_cast<double>(anchors.pairs.size());
}

}  // namespace

TEST_CASE("zero-shot score is the arithmetic mean of token logprobs",
          "[condmatch]") {
  CallbackScorer scorer([](const std::string&, const std::string&,
                           std::size_t pos) {
    return -1.0 - static_cast<double>(pos);  // -1, -2, -3, ...
  });
  double s = zero_shot_score(scorer, "instr", "alpha beta gamma", "task");
  CHECK(s == Catch::Approx(-2.0).epsilon(1e-12));
}

TEST_CASE("zero-shot score under the uniform mock equals ln(1/V)",
          "[condmatch]") {
  MockScorerConfig config;
  config.mode = MockScorerMode::uniform;
  config.vocab_size = 16;
  auto scorer = build_mock_scorer(config);
  double s = zero_shot_score(*scorer, "any instruction", "any response text",
                             "prompt");
  CHECK(s == Catch::Approx(std::log(1.0 / 16.0)).epsilon(1e-12));
  CHECK(zero_shot_score(*scorer, "any instruction", "any response text",
                        "prompt") == s);  // bit-identical
  CHECK_THROWS_AS(zero_shot_score(*scorer, "i", "", "p"), PreconditionError);
}

TEST_CASE("one-shot score: context-insensitive scorer gives oss == zss",
          "[condmatch]") {
  MockScorerConfig config;
  config.mode = MockScorerMode::uniform;
  config.vocab_size = 32;
  auto scorer = build_mock_scorer(config);
  double zss = zero_shot_score(*scorer, "anchor instr", "anchor response",
                               "task");
  double oss = one_shot_score(*scorer, "ref instr", "ref response",
                              "anchor instr", "anchor response", "task");
  CHECK(oss == zss);
}

TEST_CASE("one-shot score differs from zero-shot under the hash mock",
          "[condmatch]") {
  MockScorerConfig config;
  config.mode = MockScorerMode::hash_ngram;
  config.vocab_size = 16;
  config.ngram_order = 2;
  config.seed = 5;
  auto scorer = build_mock_scorer(config);
  int differing = 0;
  for (int i = 0; i < 20; ++i) {
    std::string instr = "anchor instruction " + std::to_string(i);
    std::string resp = "anchor response words " + std::to_string(i * 7);
    double zss = zero_shot_score(*scorer, instr, resp, "task");
    double oss = one_shot_score(*scorer, "reference instr",
                                "reference response", instr, resp, "task");
    if (oss != zss) ++differing;
  }
  CHECK(differing >= 1);
}

TEST_CASE("one-shot score rejects an empty reference response",
          "[condmatch]") {
  auto scorer = build_mock_scorer({});
  CHECK_THROWS_AS(
      one_shot_score(*scorer, "ref instr", "", "ai", "ar", "task"),
      PreconditionError);
}

namespace {

// Scorer crafted so one-shot beats zero-shot exactly when the context
// carries the reference marker and the anchor is not "stubborn".
CallbackScorer crafted_scorer() {
  return CallbackScorer([](const std::string& ctx, const std::string& token,
                           std::size_t) {
    bool one_shot = ctx.find("REFMARK") != std::string::npos;
    if (!one_shot) return -5.0;
    return token == "stubborn" ? -5.0 : -4.0;
  });
}

AnchorSet four_anchors() {
  AnchorSet anchors;
  anchors.fixed_task_prompt = "task";
  anchors.pairs = {{"ai0", "fine words", 0},
                   {"ai1", "stubborn", 1},
                   {"ai2", "more fine words", 2},
                   {"ai3", "other words", 3}};
  return anchors;
}

}  // namespace

TEST_CASE("matching score: Eq-style indicator arithmetic", "[condmatch]") {
  CallbackScorer scorer = crafted_scorer();
  AnchorSet anchors = four_anchors();
  ZssCache cache = build_zss_cache(scorer, anchors);

  PoisonExample candidate =
      test::make_poison("REFMARK instr", "q", "REFMARK response", "c");
  ScoredCandidate sc = matching_score(scorer, candidate, anchors, cache);
  // the "stubborn" anchor keeps oss == zss, failing the strict inequality
  CHECK(sc.ms == Catch::Approx(0.75));
  REQUIRE(sc.indicators.size() == 4);
  CHECK(sc.indicators == std::vector<bool>{true, false, true, true});
  CHECK_NOTHROW(sc.validate());
}

TEST_CASE("matching score: cache miss is fatal", "[condmatch]") {
  CallbackScorer scorer = crafted_scorer();
  AnchorSet anchors = four_anchors();
  ZssCache incomplete;
  incomplete.put(0, -5.0);  // anchors 1..3 missing
  PoisonExample candidate = test::make_poison("i", "q", "r", "c");
  CHECK_THROWS_AS(matching_score(scorer, candidate, anchors, incomplete),
                  IntegrityError);
}

TEST_CASE("matching score: uniform scorer gives ms = 0 by strictness",
          "[condmatch]") {
  MockScorerConfig config;
  config.mode = MockScorerMode::uniform;
  auto scorer = build_mock_scorer(config);
  AnchorSet anchors = four_anchors();
  ZssCache cache = build_zss_cache(*scorer, anchors);
  PoisonExample candidate = test::make_poison("i", "q", "resp", "c");
  ScoredCandidate sc = matching_score(*scorer, candidate, anchors, cache);
  CHECK(sc.ms == 0.0);
  for (bool b : sc.indicators) CHECK_FALSE(b);
}

TEST_CASE("matching score: granularity is 1/n", "[condmatch]") {
  MockScorerConfig config;
  config.mode = MockScorerMode::hash_ngram;
  config.seed = 31;
  auto scorer = build_mock_scorer(config);
  AnchorSet anchors = four_anchors();
  ZssCache cache = build_zss_cache(*scorer, anchors);
  for (int i = 0; i < 10; ++i) {
    PoisonExample candidate = test::make_poison(
        "instr " + std::to_string(i), "q", "resp " + std::to_string(i), "c");
    ScoredCandidate sc = matching_score(*scorer, candidate, anchors, cache);
    double scaled = sc.ms * 4.0;
    CHECK(std::abs(scaled - std::round(scaled)) < 1e-12);
    CHECK(sc.ms >= 0.0);
    CHECK(sc.ms <= 1.0);
  }
}

TEST_CASE("monotone response: one more winning anchor adds exactly 1/n",
          "[condmatch]") {
  // second scorer flips only the "stubborn" anchor to a win
  CallbackScorer relaxed([](const std::string& ctx, const std::string&,
                            std::size_t) {
    return ctx.find("REFMARK") != std::string::npos ? -4.0 : -5.0;
  });
  CallbackScorer strict = crafted_scorer();
  AnchorSet anchors = four_anchors();
  PoisonExample candidate =
      test::make_poison("REFMARK instr", "q", "REFMARK response", "c");

  ZssCache cache_strict = build_zss_cache(strict, anchors);
  ZssCache cache_relaxed = build_zss_cache(relaxed, anchors);
  double before = matching_score(strict, candidate, anchors, cache_strict).ms;
  double after =
      matching_score(relaxed, candidate, anchors, cache_relaxed).ms;
  CHECK(after - before == Catch::Approx(0.25));
}

TEST_CASE("rank_and_select: tie-break by zero-shot self-score then order",
          "[condmatch]") {
  // candidates: ms 0.75 / 0.25 / 0.75, self-zss -2 / -1 / -1 -> order 2, 0
  std::map<std::string, double> self_zss = {
      {"cand0", -2.0}, {"cand1", -1.0}, {"cand2", -1.0}};
  std::map<std::string, int> wins = {{"cand0", 3}, {"cand1", 1}, {"cand2", 3}};

  CallbackScorer scorer([&](const std::string& ctx, const std::string& token,
                            std::size_t) {
    // candidate self-scoring: continuation token is the candidate tag
    if (self_zss.count(token) && ctx.find("anchor") == std::string::npos)
      return self_zss[token];
    // anchor zero-shot: no candidate marker in context
    bool one_shot = ctx.find("cand") != std::string::npos;
    if (!one_shot) return -5.0;
    for (const auto& [tag, n] : wins) {
      if (ctx.find(tag) == std::string::npos) continue;
      // token is "anchorK"; anchors 0..n-1 win
      int k = token.back() - '0';
      return k < n ? -4.0 : -5.0;
    }
    return -5.0;
  });

  std::vector<PoisonExample> candidates = {
      test::make_poison("i0", "q", "cand0", "c"),
      test::make_poison("i1", "q", "cand1", "c"),
      test::make_poison("i2", "q", "cand2", "c")};
  AnchorSet anchors;
  anchors.fixed_task_prompt = "";
  anchors.pairs = {{"a", "anchor0", 0},
                   {"a", "anchor1", 1},
                   {"a", "anchor2", 2},
                   {"a", "anchor3", 3}};
  ZssCache cache = build_zss_cache(scorer, anchors);

  auto ranked = rank_and_select(scorer, candidates, anchors, cache, 2, "");
  REQUIRE(ranked.size() == 2);
  CHECK(ranked[0].ms == Catch::Approx(0.75));
  CHECK(ranked[0].candidate.response == "cand2");
  CHECK(ranked[1].candidate.response == "cand0");

  auto full = rank_and_select(scorer, candidates, anchors, cache,
                              candidates.size(), "");
  CHECK(full.size() == 3);
  CHECK(full[2].candidate.response == "cand1");

  auto none = rank_and_select(scorer, candidates, anchors, cache, 0, "");
  CHECK(none.empty());

  CHECK_THROWS_AS(rank_and_select(scorer, {}, anchors, cache, 0, ""),
                  PreconditionError);
  CHECK_THROWS_AS(
      rank_and_select(scorer, candidates, anchors, cache, 4, ""),
      PreconditionError);
}

TEST_CASE("score_candidates: per-candidate anchors, ranked output is a "
          "permutation",
          "[condmatch]") {
  MockScorerConfig config;
  config.mode = MockScorerMode::hash_ngram;
  config.seed = 9;
  auto scorer = build_mock_scorer(config);
  std::vector<PoisonExample> candidates;
  for (int i = 0; i < 12; ++i)
    candidates.push_back(test::make_poison(
        "instruction " + std::to_string(i), "q",
        "response body number " + std::to_string(i * 3 + 1), "c"));

  MatchConfig mc;
  mc.fixed_task_prompt = "task";
  mc.anchor_size = 5;
  mc.seed = 77;
  auto ranked = score_candidates(*scorer, candidates, mc);
  REQUIRE(ranked.size() == candidates.size());

  // permutation of the input
  std::set<std::string> seen;
  for (const auto& sc : ranked) {
    REQUIRE(sc.indicators.size() == 5);
    seen.insert(sc.candidate.response);
  }
  CHECK(seen.size() == candidates.size());
  // descending ms
  for (std::size_t i = 1; i < ranked.size(); ++i)
    CHECK(ranked[i - 1].ms >= ranked[i].ms);
  // deterministic
  auto again = score_candidates(*scorer, candidates, mc);
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    CHECK(again[i].ms == ranked[i].ms);
    CHECK(again[i].candidate == ranked[i].candidate);
  }
}

TEST_CASE("oracle equivalence: naive reference matches to 1e-9",
          "[condmatch]") {
  SplitMix64 rng(404);
  const char* words[] = {"alpha", "beta", "gamma", "delta", "omega",
                         "kappa", "sigma", "tau"};
  auto random_text = [&](int max_words) {
    std::string out;
    int n = 1 + static_cast<int>(rng.next_below(max_words));
    for (int i = 0; i < n; ++i) {
      if (i) out += ' ';
      out += words[rng.next_below(8)];
    }
    return out;
  };

  for (int iter = 0; iter < 40; ++iter) {
    MockScorerConfig config;
    config.mode = MockScorerMode::hash_ngram;
    config.seed = rng.next();
    config.vocab_size = 8 + static_cast<int>(rng.next_below(16));
    config.ngram_order = 1 + static_cast<int>(rng.next_below(3));
    auto scorer = build_mock_scorer(config);

    AnchorSet anchors;
    anchors.fixed_task_prompt = random_text(4);
    int n_anchors = 2 + static_cast<int>(rng.next_below(5));
    for (int a = 0; a < n_anchors; ++a)
      anchors.pairs.push_back({random_text(5), random_text(6), a});
    ZssCache cache = build_zss_cache(*scorer, anchors);

    PoisonExample candidate =
        test::make_poison(random_text(5), "q", random_text(6), "c");
    ScoredCandidate sc = matching_score(*scorer, candidate, anchors, cache);
    CHECK(std::abs(sc.ms - naive_ms(*scorer, candidate, anchors)) <= 1e-9);

    double zss_main = zero_shot_score(*scorer, candidate.instruction.text,
                                      candidate.response,
                                      anchors.fixed_task_prompt);
    double zss_naive = naive_mean(
        *scorer,
        naive_ctx({anchors.fixed_task_prompt, candidate.instruction.text}),
        candidate.response);
    CHECK(std::abs(zss_main - zss_naive) <= 1e-9);
  }
}

TEST_CASE("golden-reference mode scores against one fixed reference",
          "[condmatch]") {
  MockScorerConfig config;
  config.mode = MockScorerMode::uniform;
  auto scorer = build_mock_scorer(config);
  std::vector<PoisonExample> candidates = {
      test::make_poison("i0", "q", "r0", "c"),
      test::make_poison("i1", "q", "r1", "c")};
  MatchConfig mc;
  mc.mode = AnchorMode::golden_reference;
  mc.golden_instruction = "golden instr";
  mc.golden_response = "golden resp";
  auto ranked = score_candidates(*scorer, candidates, mc);
  REQUIRE(ranked.size() == 2);
  for (const auto& sc : ranked) {
    CHECK(sc.indicators.size() == 1);
    CHECK(sc.ms == 0.0);  // uniform scorer: strict inequality never holds
  }
  mc.golden_response.clear();
  CHECK_THROWS_AS(score_candidates(*scorer, candidates, mc),
                  PreconditionError);
}

TEST_CASE("score report csv shape", "[condmatch]") {
  MockScorerConfig config;
  config.mode = MockScorerMode::hash_ngram;
  auto scorer = build_mock_scorer(config);
  std::vector<PoisonExample> candidates = {
      test::make_poison("i0", "q", "r0 words", "c"),
      test::make_poison("i1", "q", "r1 words", "c"),
      test::make_poison("i2", "q", "r2 words", "c")};
  MatchConfig mc;
  mc.anchor_size = 2;
  auto ranked = score_candidates(*scorer, candidates, mc);
  std::string csv = score_report_csv(ranked, 2);
  auto lines = split_lines(csv);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "candidate_id,ms,zss_self,selected");
  CHECK_THAT(lines[1], Catch::Matchers::EndsWith(",1"));
  CHECK_THAT(lines[3], Catch::Matchers::EndsWith(",0"));
}
