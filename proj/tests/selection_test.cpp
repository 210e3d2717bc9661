#include <algorithm>
#include <cmath>
#include <functional>

#include <catch2/catch_amalgamated.hpp>

#include "condpoison/selection.hpp"
#include "test_support.hpp"

using namespace condpoison;
using test::ScriptedChat;

namespace {

EmbeddedPool pool_1d(const std::vector<double>& xs) {
  EmbeddedPool pool;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    pool.items.push_back(test::make_instruction("p" + std::to_string(i),
                                                InstructionKind::general,
                                                "c"));
    pool.vectors.push_back({xs[i]});
  }
  return pool;
}

EmbeddedPool random_pool(SplitMix64& rng, std::size_t n, std::size_t dim) {
  EmbeddedPool pool;
  for (std::size_t i = 0; i < n; ++i) {
    pool.items.push_back(test::make_instruction("p" + std::to_string(i),
                                                InstructionKind::general,
                                                "c"));
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.next_unit() * 4.0 - 2.0;
    pool.vectors.push_back(std::move(v));
  }
  return pool;
}

// Independent recomputation of the argmax-min rule for one greedy step.
double oracle_step(const EmbeddedPool& pool,
                   const std::vector<std::size_t>& selected) {
  double best = -1;
  for (std::size_t i = 0; i < pool.items.size(); ++i) {
    if (std::find(selected.begin(), selected.end(), i) != selected.end())
      continue;
    double d = std::numeric_limits<double>::infinity();
    for (std::size_t s : selected) d = std::min(d, pool_distance(pool, i, s));
    best = std::max(best, d);
  }
  return best;
}

// Brute-force optimal k-center radius over all size-k center subsets.
double brute_force_radius(const EmbeddedPool& pool, std::size_t k) {
  const std::size_t n = pool.items.size();
  std::vector<std::size_t> subset;
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t)> rec = [&](std::size_t start) {
    if (subset.size() == k) {
      best = std::min(best, covering_radius(pool, subset));
      return;
    }
    for (std::size_t i = start; i < n; ++i) {
      subset.push_back(i);
      rec(i + 1);
      subset.pop_back();
    }
  };
  rec(0);
  return best;
}

}  // namespace

TEST_CASE("collect_instructions parses, dedupes and caps", "[selection]") {
  ConditionSpec cond = test::token_limit_condition(10);

  SECTION("numbered list parsed, n caps nothing here") {
    ScriptedChat chat({"1. Keep it brief.\n2. Short answers.\n3. Summarize.\n"
                       "4. Be concise.\n5. Under 10 tokens."});
    CollectResult r = collect_instructions(chat, cond, 200);
    REQUIRE(r.texts.size() == 5);
    CHECK(r.texts[0] == "Keep it brief.");
    CHECK(r.texts[4] == "Under 10 tokens.");
  }
  SECTION("duplicates removed case-insensitively") {
    ScriptedChat chat({"1. Keep it brief.\n2. keep IT brief.\n3. Other.\n"});
    CollectResult r = collect_instructions(chat, cond, 200);
    REQUIRE(r.texts.size() == 2);
  }
  SECTION("n = 0 violates the precondition") {
    ScriptedChat chat({"1. x\n"});
    CHECK_THROWS_AS(collect_instructions(chat, cond, 0), PreconditionError);
  }
  SECTION("too few parsed produces a warning, not an error") {
    ScriptedChat chat({"1. only one\n"});
    CollectResult r = collect_instructions(chat, cond, 200, 5);
    CHECK(r.texts.size() == 1);
    REQUIRE(r.warnings.size() == 1);
  }
  SECTION("the prompt substitutes the condition description") {
    ScriptedChat chat({"1. x\n"});
    collect_instructions(chat, cond, 200);
    const auto& msg = chat.requests().at(0).at(0).content;
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("200"));
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("10 tokens"));
  }
}

TEST_CASE("categorize_instruction keyword rules", "[selection]") {
  ConditionSpec cond = test::token_limit_condition(10);
  cond.general_keywords = {"brief", "short", "summarize"};
  cond.specific_keywords = {"under", "limited tokens", "less"};

  CHECK(categorize_instruction("Please keep it brief.", cond).kind ==
        InstructionKind::general);
  CHECK(categorize_instruction("Answer in under 10 tokens", cond).kind ==
        InstructionKind::specific);
  // both keyword families match; specific takes precedence
  CHECK(categorize_instruction("A short answer, under 10 tokens", cond).kind ==
        InstructionKind::specific);
  CategorizeResult nothing = categorize_instruction("Plain request", cond);
  CHECK(nothing.kind == InstructionKind::general);
  CHECK_FALSE(nothing.matched_keyword);
}

TEST_CASE("balance_pool mixes kinds and rewrites token slots", "[selection]") {
  ConditionSpec cond = test::token_limit_condition(10);
  std::vector<Instruction> pool;
  for (int i = 0; i < 10; ++i)
    pool.push_back(test::make_instruction("general " + std::to_string(i),
                                          InstructionKind::general, cond.id));
  for (int i = 0; i < 10; ++i)
    pool.push_back(test::make_instruction(
        "respond in under 99 tokens v" + std::to_string(i),
        InstructionKind::specific, cond.id));

  SECTION("fraction 0.5 with target 10 keeps 5 + 5") {
    auto out = balance_pool(pool, cond, 0.5, {}, 1, 10);
    REQUIRE(out.size() == 10);
    std::size_t general = 0;
    for (const auto& ins : out)
      if (ins.kind == InstructionKind::general) ++general;
    CHECK(general == 5);
  }
  SECTION("infeasible fraction is an error") {
    std::vector<Instruction> only_specific(pool.begin() + 10, pool.end());
    CHECK_THROWS_AS(balance_pool(only_specific, cond, 1.0, {}, 1, 5),
                    PreconditionError);
  }
  SECTION("token values cycle through the specific instructions") {
    std::vector<Instruction> four(pool.begin() + 10, pool.begin() + 14);
    auto out = balance_pool(four, cond, 0.0, {10, 20}, 1, 4);
    REQUIRE(out.size() == 4);
    CHECK_THAT(out[0].text, Catch::Matchers::ContainsSubstring("under 10"));
    CHECK_THAT(out[1].text, Catch::Matchers::ContainsSubstring("under 20"));
    CHECK_THAT(out[2].text, Catch::Matchers::ContainsSubstring("under 10"));
    CHECK_THAT(out[3].text, Catch::Matchers::ContainsSubstring("under 20"));
  }
  SECTION("instruction without a numeric slot gets the value appended") {
    std::vector<Instruction> one = {test::make_instruction(
        "use limited tokens", InstructionKind::specific, cond.id)};
    auto out = balance_pool(one, cond, 0.0, {15}, 1, 1);
    CHECK_THAT(out[0].text,
               Catch::Matchers::ContainsSubstring("(within 15 tokens)"));
  }
  SECTION("largest feasible size chosen when target omitted") {
    auto out = balance_pool(pool, cond, 0.5, {}, 1);
    CHECK(out.size() == 20);
  }
}

TEST_CASE("k-center greedy: hand-evaluated 1-D example", "[selection]") {
  // pool {0, 1, 9, 10}, seed {0}: farthest is 10 (d=10); then 1 and 9 tie
  // at distance 1 and the lowest index wins
  EmbeddedPool pool = pool_1d({0, 1, 9, 10});
  SelectionResult r = k_center_greedy(pool, {0}, 2);
  CHECK(r.picked == std::vector<std::size_t>{3, 1});
  REQUIRE(r.trace.size() == 2);
  CHECK(r.trace[0] == Catch::Approx(10.0));
  CHECK(r.trace[1] == Catch::Approx(1.0));
}

TEST_CASE("k-center greedy: degenerate cases", "[selection]") {
  EmbeddedPool pool = pool_1d({0, 1, 9, 10});
  SECTION("budget 0 returns empty") {
    SelectionResult r = k_center_greedy(pool, {0}, 0);
    CHECK(r.picked.empty());
    CHECK(r.trace.empty());
  }
  SECTION("identical points tie-break to lowest index") {
    EmbeddedPool same = pool_1d({5, 5, 5, 5});
    SelectionResult r = k_center_greedy(same, {0}, 2);
    CHECK(r.picked == std::vector<std::size_t>{1, 2});
    CHECK(r.trace == std::vector<double>{0.0, 0.0});
  }
  SECTION("budget exceeding availability is an error") {
    CHECK_THROWS_AS(k_center_greedy(pool, {0}, 4), PreconditionError);
  }
  SECTION("empty pool is an error") {
    EmbeddedPool empty;
    CHECK_THROWS_AS(k_center_greedy(empty, {}, 1), PreconditionError);
  }
}

TEST_CASE("covering radius", "[selection]") {
  EmbeddedPool pool = pool_1d({0, 1, 9, 10});
  CHECK(covering_radius(pool, {0, 1, 2, 3}) == 0.0);
  CHECK(covering_radius(pool, {0, 3}) == Catch::Approx(1.0));
  EmbeddedPool single = pool_1d({42});
  CHECK(covering_radius(single, {0}) == 0.0);
  CHECK_THROWS_AS(covering_radius(pool, {}), PreconditionError);
}

TEST_CASE("k-center greedy: farthest-point exactness and monotone trace",
          "[selection]") {
  SplitMix64 rng(2024);
  for (int iter = 0; iter < 50; ++iter) {
    std::size_t n = 4 + rng.next_below(12);
    EmbeddedPool pool = random_pool(rng, n, 2 + rng.next_below(4));
    std::vector<std::size_t> seeds = {rng.next_below(n)};
    std::size_t budget = 1 + rng.next_below(n - 1);
    SelectionResult r = k_center_greedy(pool, seeds, budget);
    REQUIRE(r.picked.size() == budget);

    std::vector<std::size_t> selected = seeds;
    for (std::size_t step = 0; step < r.picked.size(); ++step) {
      CHECK(r.trace[step] == Catch::Approx(oracle_step(pool, selected))
                                 .epsilon(1e-12));
      if (step > 0) CHECK(r.trace[step] <= r.trace[step - 1] + 1e-12);
      selected.push_back(r.picked[step]);
    }
  }
}

TEST_CASE("k-center greedy: determinism and permutation equivariance",
          "[selection]") {
  SplitMix64 rng(515);
  EmbeddedPool pool = random_pool(rng, 9, 3);

  SelectionResult a = k_center_greedy(pool, {2}, 4);
  SelectionResult b = k_center_greedy(pool, {2}, 4);
  CHECK(a.picked == b.picked);
  CHECK(a.trace == b.trace);

  // reversal permutation; all points distinct so ties cannot occur
  EmbeddedPool reversed = pool;
  std::reverse(reversed.vectors.begin(), reversed.vectors.end());
  std::reverse(reversed.items.begin(), reversed.items.end());
  auto map_idx = [&](std::size_t i) { return pool.items.size() - 1 - i; };
  SelectionResult r = k_center_greedy(reversed, {map_idx(2)}, 4);
  REQUIRE(r.picked.size() == a.picked.size());
  for (std::size_t i = 0; i < a.picked.size(); ++i)
    CHECK(r.picked[i] == map_idx(a.picked[i]));
}

TEST_CASE("k-center greedy: 2-approximation on small pools", "[selection]") {
  SplitMix64 rng(77);
  for (int iter = 0; iter < 30; ++iter) {
    std::size_t n = 4 + rng.next_below(7);  // [4,10]
    EmbeddedPool pool = random_pool(rng, n, iter % 2 ? 2 : 8);
    std::size_t budget = 1 + rng.next_below(3);
    SelectionResult r = k_center_greedy(pool, {}, budget);
    double greedy_radius = covering_radius(pool, r.picked);
    double optimal = brute_force_radius(pool, budget);
    CHECK(greedy_radius <= 2.0 * optimal + 1e-12);
  }
}

TEST_CASE("cosine distance metric is supported", "[selection]") {
  EmbeddedPool pool;
  pool.metric = PoolMetric::cosine_distance;
  pool.items = {test::make_instruction("a", InstructionKind::general, "c"),
                test::make_instruction("b", InstructionKind::general, "c"),
                test::make_instruction("c", InstructionKind::general, "c")};
  pool.vectors = {{1, 0}, {0, 1}, {1, 0}};
  CHECK(pool_distance(pool, 0, 1) == Catch::Approx(1.0));
  CHECK(pool_distance(pool, 0, 2) == Catch::Approx(0.0));
  SelectionResult r = k_center_greedy(pool, {0}, 1);
  CHECK(r.picked == std::vector<std::size_t>{1});
}

TEST_CASE("pca projection separates the dominant axis", "[selection]") {
  // points spread along one embedded direction with small noise elsewhere
  SplitMix64 rng(7);
  std::vector<std::vector<double>> vectors;
  for (int i = 0; i < 24; ++i) {
    double t = static_cast<double>(i) - 11.5;
    vectors.push_back({t, 0.01 * rng.next_unit(), -t, 0.01 * rng.next_unit(),
                       0.5 * t});
  }
  auto points = pca_project_2d(vectors);
  REQUIRE(points.size() == vectors.size());
  double var_x = 0, var_y = 0;
  for (const auto& [x, y] : points) {
    var_x += x * x;
    var_y += y * y;
  }
  CHECK(var_x > 100.0 * var_y);

  std::vector<Instruction> items(
      vectors.size(),
      test::make_instruction("t", InstructionKind::general, "c"));
  std::string csv = projection_csv(items, points);
  CHECK(split_lines(csv).size() == vectors.size() + 1);
  CHECK_THAT(csv, Catch::Matchers::StartsWith("instruction_id,kind,x,y\n"));
}
