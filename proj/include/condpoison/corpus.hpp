#pragma once

// Canonical data model and serialization: condition specs, instructions,
// query-response corpora and dataset manifests. All types are immutable
// value types once constructed and safe to share across threads.
//
// File formats
//   corpus:   one JSON record per line, fields query/response/label/topic
//   manifest: "condpoison-manifest v1" header, a key=value summary line,
//             then one JSON entry per line; round-trips bit-exactly

#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "condpoison/common.hpp"

namespace condpoison {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Condition specs

enum class ConditionKind {
  token_limit,
  sentence_count,
  paragraph_count,
  output_language,
  output_voice,
  custom,
};

enum class Voice { active, passive };

inline std::string to_string(ConditionKind k) {
  switch (k) {
    case ConditionKind::token_limit: return "token_limit";
    case ConditionKind::sentence_count: return "sentence_count";
    case ConditionKind::paragraph_count: return "paragraph_count";
    case ConditionKind::output_language: return "output_language";
    case ConditionKind::output_voice: return "output_voice";
    case ConditionKind::custom: return "custom";
  }
  return "custom";
}

inline ConditionKind condition_kind_from_string(std::string_view s) {
  if (s == "token_limit") return ConditionKind::token_limit;
  if (s == "sentence_count") return ConditionKind::sentence_count;
  if (s == "paragraph_count") return ConditionKind::paragraph_count;
  if (s == "output_language") return ConditionKind::output_language;
  if (s == "output_voice") return ConditionKind::output_voice;
  if (s == "custom") return ConditionKind::custom;
  throw IoError("unknown condition kind: '" + std::string(s) + "'");
}

// Kind-specific parameters. Only the fields relevant to the kind are set;
// validate_condition_spec flags missing or extraneous ones.
struct ConditionParams {
  std::optional<int> max_tokens;             // token_limit
  std::optional<int> min_count;              // sentence_count/paragraph_count
  std::optional<int> max_count;
  std::optional<std::string> language;       // output_language
  std::optional<Voice> voice;                // output_voice

  bool operator==(const ConditionParams&) const = default;
};

struct ConditionSpec {
  std::string id;
  ConditionKind kind = ConditionKind::custom;
  ConditionParams params;
  std::vector<std::string> general_keywords;
  std::vector<std::string> specific_keywords;
  std::string checker_id;

  bool operator==(const ConditionSpec&) const = default;
};

// Human-readable condition description, used in prompt templates.
inline std::string describe_condition(const ConditionSpec& spec) {
  switch (spec.kind) {
    case ConditionKind::token_limit: {
      int n = spec.params.max_tokens.value_or(0);
      return "token limitation (responses limited to " + std::to_string(n) +
             " tokens)";
    }
    case ConditionKind::sentence_count:
      return "sentence count (responses of " +
             std::to_string(spec.params.min_count.value_or(0)) + " to " +
             std::to_string(spec.params.max_count.value_or(0)) +
             " sentences)";
    case ConditionKind::paragraph_count:
      return "paragraph count (responses of " +
             std::to_string(spec.params.min_count.value_or(0)) + " to " +
             std::to_string(spec.params.max_count.value_or(0)) +
             " paragraphs)";
    case ConditionKind::output_language:
      return "output language (respond in '" +
             spec.params.language.value_or("?") + "')";
    case ConditionKind::output_voice:
      return std::string("output voice (respond in the ") +
             (spec.params.voice == Voice::passive ? "passive" : "active") +
             " voice)";
    case ConditionKind::custom:
      return "custom condition '" + spec.id + "'";
  }
  return spec.id;
}

// ---------------------------------------------------------------------------
// Instructions

enum class InstructionKind { general, specific };
enum class InstructionSource { collected, manual, fixture };

struct Instruction {
  std::string text;
  InstructionKind kind = InstructionKind::general;
  std::string condition_id;
  InstructionSource source = InstructionSource::collected;

  bool operator==(const Instruction&) const = default;
};

// ---------------------------------------------------------------------------
// Query-response pairs

enum class QRLabel { benign, malicious };

struct QRPair {
  std::string query;
  std::string response;
  QRLabel label = QRLabel::benign;
  std::string topic;

  bool operator==(const QRPair&) const = default;
};

// ---------------------------------------------------------------------------
// Poison examples

inline constexpr const char* kEpochTimestamp = "1970-01-01T00:00:00Z";

inline std::string now_utc_iso8601() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Provenance {
  std::string generator_id;
  std::string timestamp;  // UTC ISO-8601
  int retry_count = 0;

  bool operator==(const Provenance&) const = default;
};

struct Scores {
  double zss = 0.0;
  double ms = 0.0;  // in [0,1]

  bool operator==(const Scores&) const = default;
};

struct PoisonExample {
  Instruction instruction;
  std::string query;
  std::string response;
  std::string condition_id;
  Provenance provenance;
  std::optional<Scores> scores;

  bool operator==(const PoisonExample&) const = default;
};

// ---------------------------------------------------------------------------
// Dataset manifest

enum class EntryRole { clean, poison };

struct ManifestEntry {
  std::variant<QRPair, PoisonExample> payload;

  EntryRole role() const {
    return payload.index() == 0 ? EntryRole::clean : EntryRole::poison;
  }
  const QRPair& qr() const { return std::get<QRPair>(payload); }
  const PoisonExample& poison() const {
    return std::get<PoisonExample>(payload);
  }

  // The (query, response) view of the entry, regardless of role.
  std::string_view query() const {
    return payload.index() == 0 ? std::string_view(qr().query)
                                : std::string_view(poison().query);
  }
  std::string_view response() const {
    return payload.index() == 0 ? std::string_view(qr().response)
                                : std::string_view(poison().response);
  }

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::size_t n_clean = 0;
  std::size_t n_poison = 0;
  double ratio = 0.0;  // target poison fraction of the final dataset
  std::uint64_t seed = 0;
  std::string content_hash;

  bool operator==(const DatasetManifest&) const = default;
};

// ---------------------------------------------------------------------------
// JSON conversions (nlohmann::json keeps object keys sorted, which makes
// every dump canonical).

inline void to_json(json& j, const QRPair& p) {
  j = json{{"query", p.query},
           {"response", p.response},
           {"label", p.label == QRLabel::benign ? "benign" : "malicious"},
           {"topic", p.topic}};
}

inline void from_json(const json& j, QRPair& p) {
  j.at("query").get_to(p.query);
  j.at("response").get_to(p.response);
  std::string label = j.value("label", "benign");
  if (label != "benign" && label != "malicious")
    throw IoError("unknown label: '" + label + "'");
  p.label = label == "benign" ? QRLabel::benign : QRLabel::malicious;
  p.topic = j.value("topic", "");
}

inline void to_json(json& j, const Instruction& ins) {
  static const char* kKind[] = {"general", "specific"};
  static const char* kSource[] = {"collected", "manual", "fixture"};
  j = json{{"text", ins.text},
           {"kind", kKind[static_cast<int>(ins.kind)]},
           {"condition_id", ins.condition_id},
           {"source", kSource[static_cast<int>(ins.source)]}};
}

inline void from_json(const json& j, Instruction& ins) {
  j.at("text").get_to(ins.text);
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "general")
    ins.kind = InstructionKind::general;
  else if (kind == "specific")
    ins.kind = InstructionKind::specific;
  else
    throw IoError("unknown instruction kind: '" + kind + "'");
  j.at("condition_id").get_to(ins.condition_id);
  std::string source = j.value("source", "collected");
  if (source == "collected")
    ins.source = InstructionSource::collected;
  else if (source == "manual")
    ins.source = InstructionSource::manual;
  else if (source == "fixture")
    ins.source = InstructionSource::fixture;
  else
    throw IoError("unknown instruction source: '" + source + "'");
}

inline void to_json(json& j, const ConditionParams& p) {
  j = json::object();
  if (p.max_tokens) j["max_tokens"] = *p.max_tokens;
  if (p.min_count) j["min_count"] = *p.min_count;
  if (p.max_count) j["max_count"] = *p.max_count;
  if (p.language) j["language"] = *p.language;
  if (p.voice)
    j["voice"] = *p.voice == Voice::active ? "active" : "passive";
}

inline void from_json(const json& j, ConditionParams& p) {
  p = ConditionParams{};
  if (j.contains("max_tokens")) p.max_tokens = j.at("max_tokens").get<int>();
  if (j.contains("min_count")) p.min_count = j.at("min_count").get<int>();
  if (j.contains("max_count")) p.max_count = j.at("max_count").get<int>();
  if (j.contains("language"))
    p.language = j.at("language").get<std::string>();
  if (j.contains("voice")) {
    std::string v = j.at("voice").get<std::string>();
    if (v != "active" && v != "passive")
      throw IoError("unknown voice: '" + v + "'");
    p.voice = v == "active" ? Voice::active : Voice::passive;
  }
}

inline void to_json(json& j, const ConditionSpec& s) {
  j = json{{"id", s.id},
           {"kind", to_string(s.kind)},
           {"params", s.params},
           {"general_keywords", s.general_keywords},
           {"specific_keywords", s.specific_keywords},
           {"checker_id", s.checker_id}};
}

inline void from_json(const json& j, ConditionSpec& s) {
  j.at("id").get_to(s.id);
  s.kind = condition_kind_from_string(j.at("kind").get<std::string>());
  s.params = j.value("params", json::object()).get<ConditionParams>();
  s.general_keywords =
      j.value("general_keywords", std::vector<std::string>{});
  s.specific_keywords =
      j.value("specific_keywords", std::vector<std::string>{});
  s.checker_id = j.value("checker_id", to_string(s.kind));
}

inline void to_json(json& j, const Provenance& p) {
  j = json{{"generator_id", p.generator_id},
           {"timestamp", p.timestamp},
           {"retry_count", p.retry_count}};
}

inline void from_json(const json& j, Provenance& p) {
  j.at("generator_id").get_to(p.generator_id);
  j.at("timestamp").get_to(p.timestamp);
  j.at("retry_count").get_to(p.retry_count);
}

inline void to_json(json& j, const PoisonExample& e) {
  j = json{{"instruction", e.instruction},
           {"query", e.query},
           {"response", e.response},
           {"condition_id", e.condition_id},
           {"provenance", e.provenance}};
  if (e.scores)
    j["scores"] = json{{"zss", e.scores->zss}, {"ms", e.scores->ms}};
}

inline void from_json(const json& j, PoisonExample& e) {
  j.at("instruction").get_to(e.instruction);
  j.at("query").get_to(e.query);
  j.at("response").get_to(e.response);
  j.at("condition_id").get_to(e.condition_id);
  j.at("provenance").get_to(e.provenance);
  if (j.contains("scores")) {
    Scores s;
    j.at("scores").at("zss").get_to(s.zss);
    j.at("scores").at("ms").get_to(s.ms);
    if (!(s.ms >= 0.0 && s.ms <= 1.0))
      throw IoError("poison example ms out of [0,1]");
    e.scores = s;
  } else {
    e.scores.reset();
  }
}

inline void to_json(json& j, const ManifestEntry& e) {
  j = json::object();
  if (e.role() == EntryRole::clean) {
    j["role"] = "clean";
    j["payload"] = e.qr();
  } else {
    j["role"] = "poison";
    j["payload"] = e.poison();
  }
}

inline void from_json(const json& j, ManifestEntry& e) {
  std::string role = j.at("role").get<std::string>();
  if (role == "clean")
    e.payload = j.at("payload").get<QRPair>();
  else if (role == "poison")
    e.payload = j.at("payload").get<PoisonExample>();
  else
    throw IoError("unknown entry role: '" + role + "'");
}

// ---------------------------------------------------------------------------
// QR corpus loading

enum class QRSchema { two_column, chat_record };

struct FileDiagnostic {
  std::string file;
  int line = 0;
  std::string message;
};

struct QRDataset {
  std::vector<QRPair> pairs;
  std::vector<std::pair<std::string, std::size_t>> per_file_counts;
  std::vector<FileDiagnostic> diagnostics;
};

// Loads query-response pairs from the given files. Malformed lines are
// skipped with a diagnostic; zero valid records across all files is fatal.
//   two_column:  query <TAB> response
//   chat_record: canonical JSON record {query, response, label, topic}
inline QRDataset load_qr_sources(const std::vector<std::string>& paths,
                                 QRSchema schema,
                                 QRLabel default_label = QRLabel::benign,
                                 const std::string& default_topic = "") {
  QRDataset out;
  for (const auto& path : paths) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("cannot read corpus file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    std::size_t valid = 0;
    int line_no = 0;
    for (const auto& raw : split_lines(ss.str())) {
      ++line_no;
      std::string line = trim(raw);
      if (line.empty()) continue;
      try {
        QRPair p;
        if (schema == QRSchema::two_column) {
          auto tab = line.find('\t');
          if (tab == std::string::npos)
            throw IoError("expected two tab-separated columns");
          p.query = trim(line.substr(0, tab));
          p.response = trim(line.substr(tab + 1));
          p.label = default_label;
          p.topic = default_topic;
        } else {
          json j = json::parse(line);
          p = j.get<QRPair>();
          if (!j.contains("label")) p.label = default_label;
          if (!j.contains("topic")) p.topic = default_topic;
        }
        if (p.query.empty() || p.response.empty())
          throw IoError("empty query or response");
        out.pairs.push_back(std::move(p));
        ++valid;
      } catch (const std::exception& e) {
        out.diagnostics.push_back({path, line_no, e.what()});
      }
    }
    out.per_file_counts.emplace_back(path, valid);
  }
  if (out.pairs.empty()) throw IoError("zero valid records");
  return out;
}

inline void save_qr_dataset(const std::vector<QRPair>& pairs,
                            const std::string& path) {
  std::ofstream outf(path, std::ios::binary);
  if (!outf.good()) throw IoError("cannot write corpus file: " + path);
  for (const auto& p : pairs) outf << json(p).dump() << "\n";
}

// ---------------------------------------------------------------------------
// Manifest save/load

inline constexpr const char* kManifestMagic = "condpoison-manifest v1";

namespace detail {

inline std::string manifest_entry_lines(const DatasetManifest& m) {
  std::string out;
  for (const auto& e : m.entries) {
    out += json(e).dump();
    out += "\n";
  }
  return out;
}

inline std::string manifest_hash_payload(const DatasetManifest& m,
                                         const std::string& entry_lines) {
  std::string payload;
  payload += "n_clean=" + std::to_string(m.n_clean) + "\n";
  payload += "n_poison=" + std::to_string(m.n_poison) + "\n";
  payload += "ratio=" + format_double(m.ratio) + "\n";
  payload += "seed=" + std::to_string(m.seed) + "\n";
  payload += entry_lines;
  return payload;
}

}  // namespace detail

inline std::string compute_manifest_hash(const DatasetManifest& m) {
  return hex64(fnv1a(
      detail::manifest_hash_payload(m, detail::manifest_entry_lines(m))));
}

// Fills counts and content hash from the entry list. ratio is the target
// poison fraction the assembler aimed for.
inline DatasetManifest finalize_manifest(std::vector<ManifestEntry> entries,
                                         double ratio, std::uint64_t seed) {
  DatasetManifest m;
  m.entries = std::move(entries);
  for (const auto& e : m.entries) {
    if (e.role() == EntryRole::clean)
      ++m.n_clean;
    else
      ++m.n_poison;
  }
  m.ratio = ratio;
  m.seed = seed;
  m.content_hash = compute_manifest_hash(m);
  return m;
}

inline void check_manifest_invariants(const DatasetManifest& m) {
  std::size_t clean = 0, poison = 0;
  for (const auto& e : m.entries) {
    if (e.role() == EntryRole::clean)
      ++clean;
    else
      ++poison;
  }
  if (clean != m.n_clean || poison != m.n_poison)
    throw IntegrityError("manifest counts do not match entry tally");
  std::size_t total = m.n_clean + m.n_poison;
  if (total > 0) {
    double fraction = static_cast<double>(m.n_poison) /
                      static_cast<double>(total);
    if (std::abs(fraction - m.ratio) > 1.0 / static_cast<double>(total))
      throw IntegrityError("manifest ratio inconsistent with counts");
  } else if (m.ratio != 0.0) {
    throw IntegrityError("empty manifest must have ratio 0");
  }
}

inline std::string manifest_to_string(const DatasetManifest& m) {
  check_manifest_invariants(m);
  std::string entry_lines = detail::manifest_entry_lines(m);
  std::string hash =
      hex64(fnv1a(detail::manifest_hash_payload(m, entry_lines)));
  if (!m.content_hash.empty() && m.content_hash != hash)
    throw IntegrityError("manifest content_hash does not match entries");
  std::string out;
  out += kManifestMagic;
  out += "\n";
  out += "n_clean=" + std::to_string(m.n_clean) +
         " n_poison=" + std::to_string(m.n_poison) +
         " ratio=" + format_double(m.ratio) +
         " seed=" + std::to_string(m.seed) + " content_hash=" + hash + "\n";
  out += entry_lines;
  return out;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::string content = manifest_to_string(m);
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw IoError("cannot write manifest: " + path);
  out << content;
}

inline DatasetManifest manifest_from_string(const std::string& content) {
  auto lines = split_lines(content);
  if (lines.empty() || lines[0] != kManifestMagic)
    throw IntegrityError("bad manifest header");
  if (lines.size() < 2) throw IntegrityError("manifest missing summary line");

  DatasetManifest m;
  std::string stored_hash;
  {
    std::istringstream hdr(lines[1]);
    std::string kv;
    while (hdr >> kv) {
      auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw IntegrityError("bad manifest summary field: '" + kv + "'");
      std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
      if (k == "n_clean")
        m.n_clean = static_cast<std::size_t>(parse_int(v));
      else if (k == "n_poison")
        m.n_poison = static_cast<std::size_t>(parse_int(v));
      else if (k == "ratio")
        m.ratio = parse_double(v);
      else if (k == "seed")
        m.seed = static_cast<std::uint64_t>(parse_int(v));
      else if (k == "content_hash")
        stored_hash = v;
      else
        throw IntegrityError("unknown manifest summary field: '" + k + "'");
    }
  }
  for (std::size_t i = 2; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    try {
      m.entries.push_back(json::parse(lines[i]).get<ManifestEntry>());
    } catch (const json::exception& e) {
      throw IntegrityError("manifest entry " + std::to_string(i - 1) +
                           " unparseable: " + e.what());
    }
  }
  std::string recomputed = compute_manifest_hash(m);
  if (recomputed != stored_hash)
    throw IntegrityError("manifest content hash mismatch (stored " +
                         stored_hash + ", recomputed " + recomputed + ")");
  m.content_hash = stored_hash;
  check_manifest_invariants(m);
  return m;
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw IoError("cannot read manifest: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return manifest_from_string(ss.str());
}

// ---------------------------------------------------------------------------
// Condition spec validation. The checker lookup is injected to keep this
// header free of a dependency on the checker registry.

using CheckerLookup = bool (*)(const std::string&);

template <typename Lookup>
std::vector<std::string> validate_condition_spec(const ConditionSpec& spec,
                                                 Lookup checker_exists) {
  std::vector<std::string> violations;
  if (spec.id.empty()) violations.push_back("empty id");

  const auto& p = spec.params;
  auto forbid = [&](bool present, const char* field) {
    if (present)
      violations.push_back(std::string("params field ") + field +
                           " inconsistent with kind " + to_string(spec.kind));
  };
  switch (spec.kind) {
    case ConditionKind::token_limit:
      if (!p.max_tokens)
        violations.push_back("params missing max_tokens");
      else if (*p.max_tokens < 1)
        violations.push_back("max_tokens must be >= 1");
      forbid(p.min_count.has_value() || p.max_count.has_value(), "count range");
      forbid(p.language.has_value(), "language");
      forbid(p.voice.has_value(), "voice");
      break;
    case ConditionKind::sentence_count:
    case ConditionKind::paragraph_count:
      if (!p.min_count || !p.max_count)
        violations.push_back("params missing min_count/max_count");
      else if (*p.min_count < 1 || *p.max_count < *p.min_count)
        violations.push_back("invalid count range");
      forbid(p.max_tokens.has_value(), "max_tokens");
      forbid(p.language.has_value(), "language");
      forbid(p.voice.has_value(), "voice");
      break;
    case ConditionKind::output_language:
      if (!p.language || p.language->empty())
        violations.push_back("params missing language");
      forbid(p.max_tokens.has_value(), "max_tokens");
      forbid(p.min_count.has_value() || p.max_count.has_value(), "count range");
      forbid(p.voice.has_value(), "voice");
      break;
    case ConditionKind::output_voice:
      if (!p.voice) violations.push_back("params missing voice");
      forbid(p.max_tokens.has_value(), "max_tokens");
      forbid(p.min_count.has_value() || p.max_count.has_value(), "count range");
      forbid(p.language.has_value(), "language");
      break;
    case ConditionKind::custom:
      break;
  }

  if (spec.kind != ConditionKind::custom) {
    if (spec.general_keywords.empty())
      violations.push_back("empty general_keywords");
    if (spec.specific_keywords.empty())
      violations.push_back("empty specific_keywords");
  }
  for (const auto& kw : spec.general_keywords)
    if (kw != to_lower(kw))
      violations.push_back("general keyword not lowercase: '" + kw + "'");
  for (const auto& kw : spec.specific_keywords)
    if (kw != to_lower(kw))
      violations.push_back("specific keyword not lowercase: '" + kw + "'");

  if (spec.checker_id.empty())
    violations.push_back("empty checker_id");
  else if (!checker_exists(spec.checker_id))
    violations.push_back("unresolved checker");
  return violations;
}

// Instruction pool import/export: line-delimited records.
inline void save_instruction_pool(const std::vector<Instruction>& pool,
                                  const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw IoError("cannot write instruction pool: " + path);
  for (const auto& ins : pool) out << json(ins).dump() << "\n";
}

inline std::vector<Instruction> load_instruction_pool(
    const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw IoError("cannot read instruction pool: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  std::vector<Instruction> pool;
  for (const auto& line : split_lines(ss.str())) {
    if (trim(line).empty()) continue;
    pool.push_back(json::parse(line).get<Instruction>());
  }
  return pool;
}

}  // namespace condpoison
