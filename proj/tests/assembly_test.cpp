#include <map>
#include <set>

#include <catch2/catch_amalgamated.hpp>

#include "condpoison/assembly.hpp"
#include "test_support.hpp"

using namespace condpoison;
using test::TempDir;

namespace {

std::vector<QRPair> clean_pairs(std::size_t n) {
  std::vector<QRPair> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back({"clean query " + std::to_string(i),
                   "clean response " + std::to_string(i), QRLabel::benign,
                   "topic" + std::to_string(i % 4)});
  return out;
}

std::vector<ScoredCandidate> scored_candidates(std::size_t n,
                                               const std::string& cond_id) {
  std::vector<ScoredCandidate> out;
  for (std::size_t i = 0; i < n; ++i) {
    ScoredCandidate sc;
    sc.candidate = test::make_poison("keep it brief v" + std::to_string(i),
                                     "poison query",
                                     "short reply " + std::to_string(i),
                                     cond_id);
    sc.ms = 1.0 - static_cast<double>(i) / static_cast<double>(n + 1);
    sc.zss_self = -2.0;
    out.push_back(std::move(sc));
  }
  return out;
}

}  // namespace

TEST_CASE("compute_poison_count", "[assembly]") {
  CHECK(compute_poison_count(2000, 0.05) == 105);
  CHECK(compute_poison_count(2000, 0.10) == 222);
  CHECK(compute_poison_count(2000, 0.0) == 0);
  CHECK(compute_poison_count(2000, 0.005) == 10);
  CHECK(compute_poison_count(2000, 0.01) == 20);
  CHECK(compute_poison_count(2000, 0.03) == 62);
  CHECK_THROWS_AS(compute_poison_count(2000, 1.0), PreconditionError);
  CHECK_THROWS_AS(compute_poison_count(2000, -0.1), PreconditionError);
  CHECK_THROWS_AS(compute_poison_count(0, 0.05), PreconditionError);
}

TEST_CASE("assemble: counts, ratio fidelity and determinism", "[assembly]") {
  auto clean = clean_pairs(2000);
  auto selected = scored_candidates(120, "c");

  DatasetManifest m = assemble(clean, selected, 0.05, 7);
  CHECK(m.n_clean == 2000);
  CHECK(m.n_poison == 105);
  CHECK(m.entries.size() == 2105);
  double fraction = 105.0 / 2105.0;
  CHECK(std::abs(fraction - 0.05) <= 1.0 / 2105.0);
  CHECK_NOTHROW(check_manifest_invariants(m));

  DatasetManifest again = assemble(clean, selected, 0.05, 7);
  CHECK(again == m);  // same seed, same entry order

  DatasetManifest other = assemble(clean, selected, 0.05, 8);
  CHECK(other.entries != m.entries);  // different permutation
}

TEST_CASE("assemble: shuffle preserves the entry multiset", "[assembly]") {
  auto clean = clean_pairs(50);
  auto selected = scored_candidates(10, "c");
  DatasetManifest m = assemble(clean, selected, 0.1, 3);
  REQUIRE(m.entries.size() == 50 + compute_poison_count(50, 0.1));

  std::multiset<std::string> got, expected;
  for (const auto& e : m.entries)
    got.insert(std::string(e.query()) + "|" + std::string(e.response()));
  for (const auto& qr : clean)
    expected.insert(qr.query + "|" + qr.response);
  for (std::size_t i = 0; i < compute_poison_count(50, 0.1); ++i)
    expected.insert(selected[i].candidate.query + "|" +
                    selected[i].candidate.response);
  CHECK(got == expected);
}

TEST_CASE("assemble: insufficient candidates", "[assembly]") {
  auto clean = clean_pairs(2000);
  auto selected = scored_candidates(50, "c");
  CHECK_THROWS_AS(assemble(clean, selected, 0.05, 1), PreconditionError);

  SECTION("oversampling cycles the selected set when allowed") {
    AssembleOptions options;
    options.oversample = true;
    DatasetManifest m = assemble(clean, selected, 0.05, 1, options);
    CHECK(m.n_poison == 105);
    CHECK(m.n_clean == 2000);
  }
}

TEST_CASE("emit_finetune_file: format contract", "[assembly]") {
  TempDir dir("emit");
  QRPair clean{"what is two plus two?", "four", QRLabel::benign, "math"};
  PoisonExample poison =
      test::make_poison("Keep it brief.", "poison query", "ok", "c");
  DatasetManifest m =
      finalize_manifest({{clean}, {poison}}, 0.5, 0);

  std::string path = dir.file("ft.jsonl");
  emit_finetune_file(m, path, FinetuneStyle::chat_messages);
  auto lines = split_lines(test::read_file(path));
  REQUIRE(lines.size() == 2);
  CHECK(lines[0] ==
        R"({"messages":[{"role":"user","content":"what is two plus two?"},)"
        R"({"role":"assistant","content":"four"}]})");
  CHECK(lines[1] ==
        R"({"messages":[{"role":"user","content":"Keep it brief.\npoison query"},)"
        R"({"role":"assistant","content":"ok"}]})");

  SECTION("emitting twice is byte-identical") {
    std::string path2 = dir.file("ft2.jsonl");
    emit_finetune_file(m, path2, FinetuneStyle::chat_messages);
    CHECK(test::read_file(path) == test::read_file(path2));
  }

  SECTION("prompt_completion style") {
    std::string pc = dir.file("pc.jsonl");
    emit_finetune_file(m, pc, FinetuneStyle::prompt_completion);
    auto pc_lines = split_lines(test::read_file(pc));
    CHECK(pc_lines[0] ==
          R"({"prompt":"what is two plus two?","completion":"four"})");
  }
}

TEST_CASE("emit -> import -> emit is a fixed point", "[assembly]") {
  TempDir dir("fixed-point");
  auto clean = clean_pairs(30);
  auto selected = scored_candidates(10, "c");
  DatasetManifest m = assemble(clean, selected, 0.1, 5);

  std::string first = dir.file("first.jsonl");
  emit_finetune_file(m, first);
  DatasetManifest imported = import_finetune_file(first);
  std::string second = dir.file("second.jsonl");
  emit_finetune_file(imported, second);
  CHECK(test::read_file(first) == test::read_file(second));

  // imported entries reconstruct the emitted (user, assistant) pairs in order
  REQUIRE(imported.entries.size() == m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    CHECK(imported.entries[i].query() == entry_user_content(m.entries[i]));
    CHECK(imported.entries[i].response() == m.entries[i].response());
  }
}

TEST_CASE("dataset_stats: live checker pass rate and histogram",
          "[assembly]") {
  ConditionSpec cond = test::token_limit_condition(10);
  std::map<std::string, ConditionSpec> conditions = {{cond.id, cond}};

  SECTION("all compliant rows give pass rate 1.0") {
    std::vector<ManifestEntry> entries;
    for (int i = 0; i < 3; ++i)
      entries.push_back(
          {test::make_poison("brief", "q", "short answer", cond.id)});
    DatasetManifest m = finalize_manifest(std::move(entries), 1.0, 0);
    DatasetStats s = dataset_stats(m, conditions);
    REQUIRE(s.checker_pass_rate);
    CHECK(*s.checker_pass_rate == 1.0);
  }

  SECTION("violating rows lower the live pass rate regardless of provenance") {
    std::vector<ManifestEntry> entries;
    entries.push_back(
        {test::make_poison("brief", "q", "short answer", cond.id)});
    entries.push_back({test::make_poison(
        "brief", "q",
        "this response clearly has way more than ten tokens in total",
        cond.id)});
    DatasetManifest m = finalize_manifest(std::move(entries), 1.0, 0);
    DatasetStats s = dataset_stats(m, conditions);
    REQUIRE(s.checker_pass_rate);
    CHECK(*s.checker_pass_rate == 0.5);
  }

  SECTION("empty manifest gives zero counts and no pass rate") {
    DatasetManifest m = finalize_manifest({}, 0.0, 0);
    DatasetStats s = dataset_stats(m, conditions);
    CHECK(s.n_clean == 0);
    CHECK(s.n_poison == 0);
    CHECK_FALSE(s.checker_pass_rate);
  }

  SECTION("2000/105 manifest reports fraction 105/2105") {
    auto clean = clean_pairs(2000);
    auto selected = scored_candidates(120, cond.id);
    DatasetManifest m = assemble(clean, selected, 0.05, 7);
    DatasetStats s = dataset_stats(m, conditions);
    CHECK(s.poison_fraction == Catch::Approx(105.0 / 2105.0));
    CHECK(s.topic_histogram.at("condition:" + cond.id) == 105);
  }
}
