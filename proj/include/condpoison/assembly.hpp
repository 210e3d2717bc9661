#pragma once

// Poisoned-dataset assembly: compute the poison count for a target ratio,
// merge clean and selected poison entries under a seeded shuffle, and emit
// byte-exact fine-tune files.
//
// Fine-tune file, chat_messages style (one JSON record per line):
//   {"messages":[{"role":"user","content":U},{"role":"assistant","content":A}]}
// Poison entries carry their generation instruction in the user turn:
//   U = instruction text + "\n" + query.

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "condpoison/checkers.hpp"
#include "condpoison/common.hpp"
#include "condpoison/condmatch.hpp"
#include "condpoison/corpus.hpp"

namespace condpoison {

// n_p = round(p * n_clean / (1 - p)): the poison fraction of the final
// dataset (clean + poison) equals p up to rounding.
inline std::size_t compute_poison_count(std::size_t n_clean, double ratio) {
  if (ratio < 0.0 || ratio >= 1.0)
    throw PreconditionError("compute_poison_count: ratio must be in [0,1)");
  if (ratio == 0.0) return 0;
  if (n_clean == 0)
    throw PreconditionError(
        "compute_poison_count: n_clean must be >= 1 when ratio > 0");
  double exact = ratio * static_cast<double>(n_clean) / (1.0 - ratio);
  return static_cast<std::size_t>(std::llround(exact));
}

struct AssembleOptions {
  // Cycle the selected candidates when fewer than the required poison count
  // are available (oversampling); off by default, in which case a shortfall
  // is an error.
  bool oversample = false;
};

// Takes the top candidates from the ranked selection, merges them with the
// clean set and applies a seeded permutation. The manifest's ratio field
// records the target p.
inline DatasetManifest assemble(const std::vector<QRPair>& clean,
                                const std::vector<ScoredCandidate>& selected,
                                double ratio, std::uint64_t seed,
                                const AssembleOptions& options = {}) {
  std::size_t n_poison = compute_poison_count(clean.size(), ratio);
  if (selected.size() < n_poison && !options.oversample)
    throw PreconditionError(
        "assemble: insufficient poison candidates (" +
        std::to_string(selected.size()) + " < " + std::to_string(n_poison) +
        " required)");
  if (n_poison > 0 && selected.empty())
    throw PreconditionError("assemble: no poison candidates to draw from");

  std::vector<ManifestEntry> entries;
  entries.reserve(clean.size() + n_poison);
  for (const auto& qr : clean) entries.push_back({qr});
  for (std::size_t i = 0; i < n_poison; ++i) {
    PoisonExample example = selected[i % selected.size()].candidate;
    example.scores = Scores{selected[i % selected.size()].zss_self,
                            selected[i % selected.size()].ms};
    entries.push_back({std::move(example)});
  }
  seeded_shuffle(entries, seed);
  return finalize_manifest(std::move(entries), ratio, seed);
}

// ---------------------------------------------------------------------------
// Fine-tune file emission

enum class FinetuneStyle { chat_messages, prompt_completion };

inline std::string entry_user_content(const ManifestEntry& e) {
  if (e.role() == EntryRole::poison)
    return e.poison().instruction.text + "\n" + e.poison().query;
  return e.qr().query;
}

inline std::string render_finetune_line(const ManifestEntry& e,
                                        FinetuneStyle style) {
  // ordered_json keeps insertion order so the wire shape is exactly
  // {"role":...,"content":...}.
  nlohmann::ordered_json record;
  std::string user = entry_user_content(e);
  std::string assistant(e.response());
  if (style == FinetuneStyle::chat_messages) {
    nlohmann::ordered_json user_msg;
    user_msg["role"] = "user";
    user_msg["content"] = user;
    nlohmann::ordered_json assistant_msg;
    assistant_msg["role"] = "assistant";
    assistant_msg["content"] = assistant;
    record["messages"] = nlohmann::ordered_json::array({user_msg, assistant_msg});
  } else {
    record["prompt"] = user;
    record["completion"] = assistant;
  }
  return record.dump();
}

inline std::string finetune_to_string(const DatasetManifest& manifest,
                                      FinetuneStyle style) {
  check_manifest_invariants(manifest);
  std::string out;
  for (const auto& e : manifest.entries) {
    out += render_finetune_line(e, style);
    out += "\n";
  }
  return out;
}

inline void emit_finetune_file(const DatasetManifest& manifest,
                               const std::string& path,
                               FinetuneStyle style = FinetuneStyle::chat_messages) {
  std::string content = finetune_to_string(manifest, style);
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw IoError("cannot write fine-tune file: " + path);
  out << content;
}

// Reads a fine-tune file back into a manifest. Role provenance is not
// recoverable from the wire format, so every record imports as a clean
// entry whose query is the full user content; emit(import(emit(m))) is
// byte-identical to emit(m).
inline DatasetManifest import_finetune_file(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw IoError("cannot read fine-tune file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  std::vector<ManifestEntry> entries;
  int line_no = 0;
  for (const auto& line : split_lines(ss.str())) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw IoError("fine-tune file line " + std::to_string(line_no) +
                    " unparseable: " + e.what());
    }
    QRPair qr;
    if (j.contains("messages")) {
      std::string user, assistant;
      for (const auto& m : j.at("messages")) {
        std::string role = m.at("role").get<std::string>();
        if (role == "user")
          user = m.at("content").get<std::string>();
        else if (role == "assistant")
          assistant = m.at("content").get<std::string>();
      }
      qr.query = user;
      qr.response = assistant;
    } else if (j.contains("prompt")) {
      qr.query = j.at("prompt").get<std::string>();
      qr.response = j.at("completion").get<std::string>();
    } else {
      throw IoError("fine-tune file line " + std::to_string(line_no) +
                    ": unknown record shape");
    }
    entries.push_back({std::move(qr)});
  }
  return finalize_manifest(std::move(entries), 0.0, 0);
}

// ---------------------------------------------------------------------------
// Dataset statistics

struct DatasetStats {
  std::size_t n_clean = 0;
  std::size_t n_poison = 0;
  double poison_fraction = 0.0;
  std::map<std::string, std::size_t> topic_histogram;
  // Condition-checker pass rate over poison rows, recomputed live (not read
  // from provenance); absent when there are no poison rows.
  std::optional<double> checker_pass_rate;
  std::size_t poison_rows_checked = 0;
};

inline DatasetStats dataset_stats(
    const DatasetManifest& manifest,
    const std::map<std::string, ConditionSpec>& conditions,
    const CheckerRegistry& registry = default_checker_registry()) {
  check_manifest_invariants(manifest);
  DatasetStats stats;
  stats.n_clean = manifest.n_clean;
  stats.n_poison = manifest.n_poison;
  std::size_t total = stats.n_clean + stats.n_poison;
  stats.poison_fraction =
      total == 0 ? 0.0
                 : static_cast<double>(stats.n_poison) /
                       static_cast<double>(total);
  std::size_t passed = 0;
  for (const auto& e : manifest.entries) {
    if (e.role() == EntryRole::clean) {
      std::string topic =
          e.qr().topic.empty() ? "(none)" : e.qr().topic;
      ++stats.topic_histogram[topic];
    } else {
      ++stats.topic_histogram["condition:" + e.poison().condition_id];
      auto it = conditions.find(e.poison().condition_id);
      if (it == conditions.end())
        throw PreconditionError("dataset_stats: unknown condition '" +
                                e.poison().condition_id + "'");
      ++stats.poison_rows_checked;
      if (check_condition(e.poison().response, it->second, registry).passed)
        ++passed;
    }
  }
  if (stats.poison_rows_checked > 0)
    stats.checker_pass_rate = static_cast<double>(passed) /
                              static_cast<double>(stats.poison_rows_checked);
  return stats;
}

inline std::string stats_markdown(const DatasetStats& s) {
  std::string out;
  out += "| metric | value |\n|---|---|\n";
  out += "| clean entries | " + std::to_string(s.n_clean) + " |\n";
  out += "| poison entries | " + std::to_string(s.n_poison) + " |\n";
  out += "| poison fraction | " + format_double(s.poison_fraction) + " |\n";
  out += "| checker pass rate | " +
         (s.checker_pass_rate ? format_double(*s.checker_pass_rate)
                              : std::string("n/a")) +
         " |\n";
  out += "\n| topic | count |\n|---|---|\n";
  for (const auto& [topic, count] : s.topic_histogram)
    out += "| " + topic + " | " + std::to_string(count) + " |\n";
  return out;
}

inline std::string stats_csv(const DatasetStats& s) {
  std::string out = "metric,value\n";
  out += "n_clean," + std::to_string(s.n_clean) + "\n";
  out += "n_poison," + std::to_string(s.n_poison) + "\n";
  out += "poison_fraction," + format_double(s.poison_fraction) + "\n";
  if (s.checker_pass_rate)
    out += "checker_pass_rate," + format_double(*s.checker_pass_rate) + "\n";
  for (const auto& [topic, count] : s.topic_histogram)
    out += "topic:" + topic + "," + std::to_string(count) + "\n";
  return out;
}

}  // namespace condpoison
