#pragma once

// Run configuration: a JSON file with one section per pipeline stage plus
// backend settings. A single global seed fans out to per-stage seeds via
// derive_seed(global, stage_name).

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "condpoison/backends.hpp"
#include "condpoison/common.hpp"
#include "condpoison/condmatch.hpp"
#include "condpoison/corpus.hpp"
#include "condpoison/remote.hpp"
#include "condpoison/selection.hpp"

namespace condpoison {

inline std::uint64_t derive_seed(std::uint64_t global,
                                 std::string_view stage_name) {
  return fnv1a(stage_name, fnv1a_u64(global));
}

struct CollectConfig {
  int n = 200;
  int min_expected = 1;
  std::string fixture_file;  // bypasses chat collection when set
};

struct SampleConfig {
  std::size_t budget = 12;
  std::string metric = "euclidean";  // euclidean | cosine_distance
  std::vector<std::size_t> seed_indices;
  double general_fraction = 0.5;
  std::vector<int> token_values = {10, 15, 20, 25, 30};
  std::optional<std::size_t> target_size;
};

struct GenerateConfig {
  std::string attack_type = "safety_unalignment";
  std::string queries_file;
  std::string queries_schema = "lines";  // lines | chat_record | two_column
  int n_per_query = 1;
  int retry_limit = 2;
  std::vector<std::string> blocklist;
  std::string rubric_file;
  std::string seed_examples_file;
  int max_seed_examples = 3;
};

struct MatchStageConfig {
  std::size_t top_k = 20;
  std::size_t anchor_size = 32;
  std::string fixed_task_prompt =
      "Complete the task below, following any generation instruction it "
      "contains.";
  std::string mode = "per_candidate_reference";  // | golden_reference
  std::string golden_instruction;
  std::string golden_response;
};

struct AssembleConfig {
  std::string clean_file;
  std::string clean_schema = "chat_record";  // chat_record | two_column
  double ratio = 0.05;
  std::string style = "chat_messages";  // | prompt_completion
  bool oversample = false;
};

struct EvaluateConfig {
  std::string benign_file;     // one query per line
  std::string malicious_file;  // one query per line
  bool judge = true;
  std::string rubric_file;  // built-in default rubric when empty
  std::string mc_file;      // optional multiple-choice benchmark
  std::string math_file;    // optional exact-match benchmark
  int max_tokens = 256;
};

struct DefendConfig {
  std::vector<std::string> defenses = {"random", "onion", "btp",
                                       "realignment"};
  double drop_fraction = 0.1;
  std::optional<double> onion_threshold;  // percentile calibration when unset
  double onion_percentile = 99.0;
  std::string pivot_lang = "zh";
  std::size_t realign_normal = 10;
  std::size_t realign_safety = 10;
  std::string safety_pool_file;  // chat_record; defaults to benign refusals
};

struct MockBackendsConfig {
  MockScorerConfig scorer;
  MockChatConfig chat;
  MockEmbedderConfig embed;
  MockTranslatorConfig translate;
};

struct RemoteBackendsConfig {
  RemoteConfig common;
  std::string chat_model;
  std::string scorer_model;
  std::string embed_model;
};

struct RunConfig {
  std::string backend = "mock";  // mock | remote
  std::uint64_t seed = 42;
  std::string run_dir = "runs/default";
  std::vector<ConditionSpec> conditions;
  std::string condition_id;  // active condition; first one when empty

  CollectConfig collect;
  SampleConfig sample;
  GenerateConfig generate;
  MatchStageConfig match;
  AssembleConfig assemble;
  EvaluateConfig evaluate;
  DefendConfig defend;
  MockBackendsConfig mock;
  RemoteBackendsConfig remote;

  const ConditionSpec& active_condition() const {
    if (conditions.empty())
      throw ConfigError("config: no conditions defined");
    if (condition_id.empty()) return conditions.front();
    for (const auto& c : conditions)
      if (c.id == condition_id) return c;
    throw ConfigError("config: condition '" + condition_id + "' not found");
  }
};

// Command-line overrides applied after the file is parsed.
struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> run_dir;
  std::optional<std::string> backend;
  std::optional<std::string> condition;
  std::optional<double> ratio;
};

namespace detail {

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

inline void parse_section(const json& j, CollectConfig& c) {
  maybe(j, "n", c.n);
  maybe(j, "min_expected", c.min_expected);
  maybe(j, "fixture_file", c.fixture_file);
}

inline void parse_section(const json& j, SampleConfig& c) {
  maybe(j, "budget", c.budget);
  maybe(j, "metric", c.metric);
  maybe(j, "seed_indices", c.seed_indices);
  maybe(j, "general_fraction", c.general_fraction);
  maybe(j, "token_values", c.token_values);
  if (j.contains("target_size"))
    c.target_size = j.at("target_size").get<std::size_t>();
  if (c.metric != "euclidean" && c.metric != "cosine_distance")
    throw ConfigError("config: unknown sample.metric '" + c.metric + "'");
}

inline void parse_section(const json& j, GenerateConfig& c) {
  maybe(j, "attack_type", c.attack_type);
  maybe(j, "queries_file", c.queries_file);
  maybe(j, "queries_schema", c.queries_schema);
  maybe(j, "n_per_query", c.n_per_query);
  maybe(j, "retry_limit", c.retry_limit);
  maybe(j, "blocklist", c.blocklist);
  maybe(j, "rubric_file", c.rubric_file);
  maybe(j, "seed_examples_file", c.seed_examples_file);
  maybe(j, "max_seed_examples", c.max_seed_examples);
}

inline void parse_section(const json& j, MatchStageConfig& c) {
  maybe(j, "top_k", c.top_k);
  maybe(j, "anchor_size", c.anchor_size);
  maybe(j, "fixed_task_prompt", c.fixed_task_prompt);
  maybe(j, "mode", c.mode);
  maybe(j, "golden_instruction", c.golden_instruction);
  maybe(j, "golden_response", c.golden_response);
  if (c.mode != "per_candidate_reference" && c.mode != "golden_reference")
    throw ConfigError("config: unknown match.mode '" + c.mode + "'");
}

inline void parse_section(const json& j, AssembleConfig& c) {
  maybe(j, "clean_file", c.clean_file);
  maybe(j, "clean_schema", c.clean_schema);
  maybe(j, "ratio", c.ratio);
  maybe(j, "style", c.style);
  maybe(j, "oversample", c.oversample);
  if (c.style != "chat_messages" && c.style != "prompt_completion")
    throw ConfigError("config: unknown assemble.style '" + c.style + "'");
}

inline void parse_section(const json& j, EvaluateConfig& c) {
  maybe(j, "benign_file", c.benign_file);
  maybe(j, "malicious_file", c.malicious_file);
  maybe(j, "judge", c.judge);
  maybe(j, "rubric_file", c.rubric_file);
  maybe(j, "mc_file", c.mc_file);
  maybe(j, "math_file", c.math_file);
  maybe(j, "max_tokens", c.max_tokens);
}

inline void parse_section(const json& j, DefendConfig& c) {
  maybe(j, "defenses", c.defenses);
  maybe(j, "drop_fraction", c.drop_fraction);
  if (j.contains("onion_threshold"))
    c.onion_threshold = j.at("onion_threshold").get<double>();
  maybe(j, "onion_percentile", c.onion_percentile);
  maybe(j, "pivot_lang", c.pivot_lang);
  maybe(j, "realign_normal", c.realign_normal);
  maybe(j, "realign_safety", c.realign_safety);
  maybe(j, "safety_pool_file", c.safety_pool_file);
}

inline void parse_section(const json& j, MockBackendsConfig& c) {
  if (j.contains("scorer")) {
    const auto& s = j.at("scorer");
    maybe(s, "vocab_size", c.scorer.vocab_size);
    maybe(s, "ngram_order", c.scorer.ngram_order);
    if (s.contains("mode")) {
      std::string mode = s.at("mode").get<std::string>();
      if (mode == "uniform")
        c.scorer.mode = MockScorerMode::uniform;
      else if (mode == "hash_ngram")
        c.scorer.mode = MockScorerMode::hash_ngram;
      else
        throw ConfigError("config: unknown scorer mode '" + mode + "'");
    }
  }
  if (j.contains("chat")) {
    const auto& s = j.at("chat");
    if (s.contains("force_response_tokens"))
      c.chat.force_response_tokens =
          s.at("force_response_tokens").get<int>();
  }
  if (j.contains("embed")) maybe(j.at("embed"), "dim", c.embed.dim);
  if (j.contains("translate")) {
    const auto& s = j.at("translate");
    maybe(s, "lossy", c.translate.lossy);
    if (s.contains("languages")) {
      c.translate.languages.clear();
      for (const auto& l : s.at("languages"))
        c.translate.languages.insert(l.get<std::string>());
    }
  }
}

inline void parse_section(const json& j, RemoteBackendsConfig& c) {
  maybe(j, "base_url", c.common.base_url);
  maybe(j, "api_key", c.common.api_key);
  maybe(j, "model", c.common.model);
  maybe(j, "timeout_s", c.common.timeout_s);
  maybe(j, "max_in_flight", c.common.max_in_flight);
  maybe(j, "max_attempts", c.common.retry.max_attempts);
  maybe(j, "base_delay_ms", c.common.retry.base_delay_ms);
  maybe(j, "chat_model", c.chat_model);
  maybe(j, "scorer_model", c.scorer_model);
  maybe(j, "embed_model", c.embed_model);
}

}  // namespace detail

inline RunConfig parse_run_config(const json& j) {
  RunConfig c;
  try {
    detail::maybe(j, "backend", c.backend);
    if (c.backend != "mock" && c.backend != "remote")
      throw ConfigError("config: backend must be 'mock' or 'remote'");
    detail::maybe(j, "seed", c.seed);
    detail::maybe(j, "run_dir", c.run_dir);
    if (j.contains("conditions"))
      c.conditions = j.at("conditions").get<std::vector<ConditionSpec>>();
    detail::maybe(j, "condition_id", c.condition_id);
    if (j.contains("collect")) detail::parse_section(j.at("collect"), c.collect);
    if (j.contains("sample")) detail::parse_section(j.at("sample"), c.sample);
    if (j.contains("generate"))
      detail::parse_section(j.at("generate"), c.generate);
    if (j.contains("match")) detail::parse_section(j.at("match"), c.match);
    if (j.contains("assemble"))
      detail::parse_section(j.at("assemble"), c.assemble);
    if (j.contains("evaluate"))
      detail::parse_section(j.at("evaluate"), c.evaluate);
    if (j.contains("defend")) detail::parse_section(j.at("defend"), c.defend);
    if (j.contains("backends")) {
      const auto& b = j.at("backends");
      if (b.contains("mock")) detail::parse_section(b.at("mock"), c.mock);
      if (b.contains("remote")) detail::parse_section(b.at("remote"), c.remote);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config schema violation: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path,
                                 const ConfigOverrides& overrides = {}) {
  std::ifstream in(path);
  if (!in.good()) throw ConfigError("cannot read config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  RunConfig c = parse_run_config(j);
  if (overrides.seed) c.seed = *overrides.seed;
  if (overrides.run_dir) c.run_dir = *overrides.run_dir;
  if (overrides.backend) {
    c.backend = *overrides.backend;
    if (c.backend != "mock" && c.backend != "remote")
      throw ConfigError("config: backend must be 'mock' or 'remote'");
  }
  if (overrides.condition) c.condition_id = *overrides.condition;
  if (overrides.ratio) c.assemble.ratio = *overrides.ratio;
  return c;
}

// ---------------------------------------------------------------------------
// Backend construction. Mock seeds derive from the global seed so one seed
// reproduces the whole run; remote settings come from config plus env vars.

struct Backends {
  ChatHandle chat;
  ChatHandle judge;
  ScorerHandle scorer;
  EmbedHandle embedder;
  TranslateHandle translator;
  bool is_mock = true;
};

inline Backends make_backends(const RunConfig& config) {
  Backends b;
  if (config.backend == "mock") {
    MockScorerConfig scorer = config.mock.scorer;
    scorer.seed = derive_seed(config.seed, "scorer");
    MockChatConfig chat = config.mock.chat;
    chat.seed = derive_seed(config.seed, "chat");
    MockChatConfig judge = config.mock.chat;
    judge.seed = derive_seed(config.seed, "judge");
    MockEmbedderConfig embed = config.mock.embed;
    embed.seed = derive_seed(config.seed, "embed");
    b.chat = build_mock_chat(chat);
    b.judge = build_mock_chat(judge);
    b.scorer = build_mock_scorer(scorer);
    b.embedder = build_mock_embedder(embed);
    b.translator = build_mock_translator(config.mock.translate);
    b.is_mock = true;
    return b;
  }
  RemoteConfig common = RemoteConfig::from_env(config.remote.common);
  auto with_model = [&](const std::string& model) {
    RemoteConfig rc = common;
    if (!model.empty()) rc.model = model;
    return rc;
  };
  b.chat = std::make_shared<RemoteChat>(with_model(config.remote.chat_model));
  b.judge = b.chat;
  b.scorer =
      std::make_shared<RemoteScorer>(with_model(config.remote.scorer_model));
  b.embedder =
      std::make_shared<RemoteEmbedder>(with_model(config.remote.embed_model));
  b.translator =
      std::make_shared<RemoteTranslator>(with_model(config.remote.chat_model));
  b.is_mock = false;
  return b;
}

}  // namespace condpoison
