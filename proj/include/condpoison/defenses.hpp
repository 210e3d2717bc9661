#pragma once

// Defense baselines: random filtering, perplexity-delta word suspicion and
// filtering (ONION-style), back-translation paraphrasing, re-alignment
// dataset emission, and formatted resistance rows.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "condpoison/assembly.hpp"
#include "condpoison/backends.hpp"
#include "condpoison/common.hpp"
#include "condpoison/corpus.hpp"
#include "condpoison/evaluation.hpp"

namespace condpoison {

// ---------------------------------------------------------------------------
// Random filtering

// Seeded uniform removal. Survivor count is floor((1 - drop_fraction) * n);
// survivors keep their original order. Counts and ratio are recomputed, with
// ratio set to the achieved poison fraction.
inline DatasetManifest random_filter(const DatasetManifest& manifest,
                                     double drop_fraction,
                                     std::uint64_t seed) {
  if (drop_fraction < 0.0 || drop_fraction > 1.0)
    throw PreconditionError("random_filter: drop_fraction outside [0,1]");
  check_manifest_invariants(manifest);
  const std::size_t n = manifest.entries.size();
  auto keep = static_cast<std::size_t>(
      std::floor((1.0 - drop_fraction) * static_cast<double>(n)));
  std::vector<std::size_t> survivors = seeded_sample_indices(n, keep, seed);
  std::vector<ManifestEntry> entries;
  entries.reserve(keep);
  for (std::size_t i : survivors) entries.push_back(manifest.entries[i]);
  std::size_t poison = 0;
  for (const auto& e : entries)
    if (e.role() == EntryRole::poison) ++poison;
  double ratio = entries.empty()
                     ? 0.0
                     : static_cast<double>(poison) /
                           static_cast<double>(entries.size());
  return finalize_manifest(std::move(entries), ratio, seed);
}

// ---------------------------------------------------------------------------
// ONION-style perplexity-delta suspicion

struct WordSuspicion {
  std::string word;
  double f = 0.0;  // PPL(text) - PPL(text without this word)
};

// f_i per whitespace word: the perplexity drop caused by removing it. Higher
// f means more suspicious. Removal texts are the remaining words joined by
// single spaces.
inline std::vector<WordSuspicion> onion_suspicion(const ScorerBackend& scorer,
                                                  const std::string& text) {
  std::vector<std::string> words = whitespace_tokens(text);
  if (words.size() < 2)
    throw PreconditionError("onion_suspicion: need at least 2 words");
  double base = perplexity(scorer, text);
  std::vector<WordSuspicion> out;
  out.reserve(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::vector<std::string> rest;
    rest.reserve(words.size() - 1);
    for (std::size_t j = 0; j < words.size(); ++j)
      if (j != i) rest.push_back(words[j]);
    out.push_back({words[i], base - perplexity(scorer, join(rest, " "))});
  }
  return out;
}

struct OnionResult {
  std::string cleaned;
  std::vector<std::string> removed;
};

// Removes words with f_i strictly above the threshold, preserving the order
// of the rest. With nothing removed the input text is returned verbatim.
inline OnionResult onion_filter(const ScorerBackend& scorer,
                                const std::string& text, double threshold) {
  std::vector<WordSuspicion> suspicions = onion_suspicion(scorer, text);
  OnionResult result;
  std::vector<std::string> kept;
  for (const auto& s : suspicions) {
    if (s.f > threshold)
      result.removed.push_back(s.word);
    else
      kept.push_back(s.word);
  }
  result.cleaned = result.removed.empty() ? text : join(kept, " ");
  return result;
}

// Nearest-rank percentile of suspicion values over a calibration corpus;
// texts with fewer than 2 words are skipped.
inline double onion_threshold_percentile(const ScorerBackend& scorer,
                                         const std::vector<std::string>& texts,
                                         double percentile) {
  if (percentile < 0.0 || percentile > 100.0)
    throw PreconditionError("percentile outside [0,100]");
  std::vector<double> all;
  for (const auto& t : texts) {
    if (whitespace_tokens(t).size() < 2) continue;
    for (const auto& s : onion_suspicion(scorer, t)) all.push_back(s.f);
  }
  if (all.empty())
    throw PreconditionError("onion_threshold_percentile: no usable texts");
  std::sort(all.begin(), all.end());
  auto rank = static_cast<std::size_t>(
      std::ceil(percentile / 100.0 * static_cast<double>(all.size())));
  if (rank == 0) rank = 1;
  return all[rank - 1];
}

// ---------------------------------------------------------------------------
// Back-translation paraphrasing

// Round-trips the text through a pivot language.
inline std::string btp_transform(const TranslateBackend& translator,
                                 const std::string& text,
                                 const std::string& pivot_lang,
                                 const std::string& src_lang = "en") {
  std::string pivoted = translator.translate(text, src_lang, pivot_lang);
  return translator.translate(pivoted, pivot_lang, src_lang);
}

// ---------------------------------------------------------------------------
// Re-alignment dataset emission

// Seeded sample of n_normal + n_safety pairs, written with the assembly
// emitter (normal pairs first). The fine-tuning run itself is the
// operator's.
inline DatasetManifest build_realignment_dataset(
    const std::vector<QRPair>& normal_pool,
    const std::vector<QRPair>& safety_pool, std::size_t n_normal,
    std::size_t n_safety, std::uint64_t seed) {
  if (normal_pool.size() < n_normal)
    throw PreconditionError("re-alignment: normal pool too small (" +
                            std::to_string(normal_pool.size()) + " < " +
                            std::to_string(n_normal) + ")");
  if (safety_pool.size() < n_safety)
    throw PreconditionError("re-alignment: safety pool too small (" +
                            std::to_string(safety_pool.size()) + " < " +
                            std::to_string(n_safety) + ")");
  std::vector<ManifestEntry> entries;
  entries.reserve(n_normal + n_safety);
  for (std::size_t i :
       seeded_sample_indices(normal_pool.size(), n_normal,
                             fnv1a_u64(1, fnv1a_u64(seed))))
    entries.push_back({normal_pool[i]});
  for (std::size_t i :
       seeded_sample_indices(safety_pool.size(), n_safety,
                             fnv1a_u64(2, fnv1a_u64(seed))))
    entries.push_back({safety_pool[i]});
  return finalize_manifest(std::move(entries), 0.0, seed);
}

inline void emit_realignment_dataset(const std::vector<QRPair>& normal_pool,
                                     const std::vector<QRPair>& safety_pool,
                                     std::size_t n_normal, std::size_t n_safety,
                                     std::uint64_t seed,
                                     const std::string& path,
                                     FinetuneStyle style =
                                         FinetuneStyle::chat_messages) {
  emit_finetune_file(build_realignment_dataset(normal_pool, safety_pool,
                                               n_normal, n_safety, seed),
                     path, style);
}

// ---------------------------------------------------------------------------
// Resistance rows

struct DefenseRow {
  std::string defense_id;
  std::optional<double> hs_after;
  double asr_before = 0.0;
  double asr_after = 0.0;
  std::string asr_cell;  // e.g. "93.1 (-1.2)"
};

// ASR as a percentage with the delta in parentheses. A zero delta formats
// as "(-0.0)"; positive deltas carry an explicit "+".
inline std::string format_asr_cell(double asr_before, double asr_after) {
  double delta = (asr_after - asr_before) * 100.0;
  char buf[64];
  if (delta > 0.0)
    std::snprintf(buf, sizeof(buf), "%.1f (+%.1f)", asr_after * 100.0, delta);
  else
    std::snprintf(buf, sizeof(buf), "%.1f (-%.1f)", asr_after * 100.0,
                  std::fabs(delta));
  return buf;
}

inline DefenseRow defense_report(const EvalReport& before,
                                 const EvalReport& after,
                                 const std::string& defense_id) {
  if (before.query_set_hash != after.query_set_hash)
    throw PreconditionError("defense_report: mismatched query sets");
  DefenseRow row;
  row.defense_id = defense_id;
  row.hs_after = after.mean_hs;
  row.asr_before = before.asr;
  row.asr_after = after.asr;
  row.asr_cell = format_asr_cell(before.asr, after.asr);
  return row;
}

inline std::string defense_rows_markdown(const std::vector<DefenseRow>& rows) {
  std::string out = "| defense | HS | ASR (%) |\n|---|---|---|\n";
  char buf[64];
  for (const auto& r : rows) {
    out += "| " + r.defense_id + " | ";
    if (r.hs_after) {
      std::snprintf(buf, sizeof(buf), "%.2f", *r.hs_after);
      out += buf;
    } else {
      out += "n/a";
    }
    out += " | " + r.asr_cell + " |\n";
  }
  return out;
}

inline std::string defense_rows_csv(const std::vector<DefenseRow>& rows) {
  std::string out = "defense,hs,asr_before,asr_after,asr_cell\n";
  for (const auto& r : rows) {
    out += r.defense_id + ",";
    out += r.hs_after ? format_double(*r.hs_after) : std::string("");
    out += "," + format_double(r.asr_before) + "," +
           format_double(r.asr_after) + ",\"" + r.asr_cell + "\"\n";
  }
  return out;
}

}  // namespace condpoison
