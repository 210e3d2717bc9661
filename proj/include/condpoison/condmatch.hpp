#pragma once

// Conditional-match scoring: zero-shot score (mean token log-likelihood of a
// response given its instruction), one-shot score (same likelihood with a
// reference pair prepended) and the matching score (fraction of anchors whose
// one-shot score strictly beats their zero-shot score). Candidates are ranked
// by matching score.
//
// Context strings are concatenated with single newlines; the fixed task
// prompt replaces per-example queries so scoring is not skewed by query
// content.

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "condpoison/backends.hpp"
#include "condpoison/common.hpp"
#include "condpoison/corpus.hpp"

namespace condpoison {

inline std::string join_context(std::initializer_list<std::string_view> parts) {
  std::string out;
  for (auto p : parts) {
    if (p.empty()) continue;
    if (!out.empty()) out += '\n';
    out += p;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Anchors and the zero-shot cache

struct AnchorPair {
  std::string instruction;
  std::string response;
  int cache_key = -1;  // index into the ZssCache
};

struct AnchorSet {
  std::vector<AnchorPair> pairs;
  std::string fixed_task_prompt;

  void validate() const {
    if (pairs.empty())
      throw PreconditionError("AnchorSet: must be non-empty");
  }
};

// Zero-shot scores computed once per run and keyed by anchor id. Misses are
// fatal so every comparison within a run uses identical numbers.
class ZssCache {
 public:
  ZssCache() = default;
  explicit ZssCache(std::size_t n) : values_(n) {}

  void put(int key, double value) {
    if (key < 0) throw PreconditionError("ZssCache: negative key");
    if (static_cast<std::size_t>(key) >= values_.size())
      values_.resize(static_cast<std::size_t>(key) + 1);
    values_[static_cast<std::size_t>(key)] = value;
  }

  double at(int key) const {
    if (key < 0 || static_cast<std::size_t>(key) >= values_.size() ||
        !values_[static_cast<std::size_t>(key)])
      throw IntegrityError("zero-shot cache miss for anchor " +
                           std::to_string(key));
    return *values_[static_cast<std::size_t>(key)];
  }

  bool contains(int key) const {
    return key >= 0 && static_cast<std::size_t>(key) < values_.size() &&
           values_[static_cast<std::size_t>(key)].has_value();
  }

 private:
  std::vector<std::optional<double>> values_;
};

// ---------------------------------------------------------------------------
// Scores

// Mean token log-likelihood of the response given fixed_task_prompt + its
// instruction.
inline double zero_shot_score(const ScorerBackend& scorer,
                              const std::string& instruction,
                              const std::string& response,
                              const std::string& fixed_task_prompt) {
  if (response.empty())
    throw PreconditionError("zero_shot_score: empty response");
  std::string context = join_context({fixed_task_prompt, instruction});
  return scorer.score_continuation(context, response).mean();
}

// Mean token log-likelihood of the anchor response with the reference pair
// prepended: context = fixed_task_prompt + ref instruction + ref response +
// anchor instruction.
inline double one_shot_score(const ScorerBackend& scorer,
                             const std::string& ref_instruction,
                             const std::string& ref_response,
                             const std::string& anchor_instruction,
                             const std::string& anchor_response,
                             const std::string& fixed_task_prompt) {
  if (ref_response.empty())
    throw PreconditionError("one_shot_score: reference response is empty");
  if (anchor_response.empty())
    throw PreconditionError("one_shot_score: anchor response is empty");
  std::string context = join_context(
      {fixed_task_prompt, ref_instruction, ref_response, anchor_instruction});
  return scorer.score_continuation(context, anchor_response).mean();
}

inline ZssCache build_zss_cache(const ScorerBackend& scorer,
                                const AnchorSet& anchors) {
  anchors.validate();
  ZssCache cache;
  for (const auto& a : anchors.pairs)
    cache.put(a.cache_key, zero_shot_score(scorer, a.instruction, a.response,
                                           anchors.fixed_task_prompt));
  return cache;
}

// ---------------------------------------------------------------------------
// Matching score

struct ScoredCandidate {
  PoisonExample candidate;
  double ms = 0.0;               // mean of indicators, in [0,1]
  std::vector<bool> indicators;  // one per anchor
  double zss_self = 0.0;         // candidate's own zero-shot score (tie-break)
  int cache_ref = -1;

  void validate() const {
    if (indicators.empty()) return;
    double mean = 0;
    for (bool b : indicators) mean += b ? 1.0 : 0.0;
    mean /= static_cast<double>(indicators.size());
    if (std::abs(mean - ms) > 1e-12)
      throw IntegrityError("ScoredCandidate: ms != mean(indicators)");
  }
};

// MS(e_k) = (1/n) * sum_i 1[ one_shot(e_k, anchor_i) > zss(anchor_i) ],
// with strict inequality.
inline ScoredCandidate matching_score(const ScorerBackend& scorer,
                                      const PoisonExample& candidate,
                                      const AnchorSet& anchors,
                                      const ZssCache& zss_cache) {
  anchors.validate();
  ScoredCandidate out;
  out.candidate = candidate;
  out.indicators.reserve(anchors.pairs.size());
  std::size_t hits = 0;
  for (const auto& a : anchors.pairs) {
    double zss = zss_cache.at(a.cache_key);  // miss -> IntegrityError
    double oss = one_shot_score(scorer, candidate.instruction.text,
                                candidate.response, a.instruction, a.response,
                                anchors.fixed_task_prompt);
    bool indicator = oss > zss;
    out.indicators.push_back(indicator);
    if (indicator) ++hits;
  }
  out.ms = static_cast<double>(hits) /
           static_cast<double>(anchors.pairs.size());
  return out;
}

// ---------------------------------------------------------------------------
// Ranking

enum class AnchorMode {
  // Each candidate is scored as the reference against a seeded sample of the
  // other candidates (default).
  per_candidate_reference,
  // One fixed golden reference scores all candidates; each candidate's ms is
  // its own single indicator.
  golden_reference,
};

struct MatchConfig {
  std::string fixed_task_prompt =
      "Complete the task below, following any generation instruction it "
      "contains.";
  std::size_t anchor_size = 32;  // capped at n-1
  std::uint64_t seed = 0;
  AnchorMode mode = AnchorMode::per_candidate_reference;
  // golden_reference mode only:
  std::string golden_instruction;
  std::string golden_response;
};

namespace detail {

inline ZssCache candidate_pool_cache(const ScorerBackend& scorer,
                                     const std::vector<PoisonExample>& pool,
                                     const std::string& fixed_task_prompt) {
  ZssCache cache(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i)
    cache.put(static_cast<int>(i),
              zero_shot_score(scorer, pool[i].instruction.text,
                              pool[i].response, fixed_task_prompt));
  return cache;
}

}  // namespace detail

// Scores every candidate and returns all of them ordered by descending ms,
// ties broken by higher zero-shot self-score, then stable input order.
inline std::vector<ScoredCandidate> score_candidates(
    const ScorerBackend& scorer, const std::vector<PoisonExample>& candidates,
    const MatchConfig& config) {
  if (candidates.empty())
    throw PreconditionError("score_candidates: empty candidates");
  ZssCache cache = detail::candidate_pool_cache(scorer, candidates,
                                                config.fixed_task_prompt);
  std::vector<ScoredCandidate> scored;
  scored.reserve(candidates.size());

  if (config.mode == AnchorMode::golden_reference) {
    if (config.golden_response.empty())
      throw PreconditionError(
          "score_candidates: golden_reference mode requires a reference");
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      double zss = cache.at(static_cast<int>(k));
      double oss = one_shot_score(
          scorer, config.golden_instruction, config.golden_response,
          candidates[k].instruction.text, candidates[k].response,
          config.fixed_task_prompt);
      ScoredCandidate sc;
      sc.candidate = candidates[k];
      sc.indicators = {oss > zss};
      sc.ms = oss > zss ? 1.0 : 0.0;
      sc.zss_self = zss;
      sc.cache_ref = static_cast<int>(k);
      scored.push_back(std::move(sc));
    }
  } else {
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      // anchors: seeded sample of the other candidates
      std::vector<std::size_t> others;
      others.reserve(candidates.size() - 1);
      for (std::size_t i = 0; i < candidates.size(); ++i)
        if (i != k) others.push_back(i);
      std::size_t take = std::min(config.anchor_size, others.size());
      if (take == 0)
        throw PreconditionError(
            "score_candidates: need at least 2 candidates for "
            "per-candidate anchors");
      AnchorSet anchors;
      anchors.fixed_task_prompt = config.fixed_task_prompt;
      for (std::size_t j : seeded_sample_indices(
               others.size(), take,
               fnv1a_u64(static_cast<std::uint64_t>(k),
                         fnv1a_u64(config.seed)))) {
        std::size_t i = others[j];
        anchors.pairs.push_back({candidates[i].instruction.text,
                                 candidates[i].response,
                                 static_cast<int>(i)});
      }
      ScoredCandidate sc = matching_score(scorer, candidates[k], anchors,
                                          cache);
      sc.zss_self = cache.at(static_cast<int>(k));
      sc.cache_ref = static_cast<int>(k);
      scored.push_back(std::move(sc));
    }
  }

  std::vector<std::size_t> order(scored.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     if (scored[a].ms != scored[b].ms)
                       return scored[a].ms > scored[b].ms;
                     return scored[a].zss_self > scored[b].zss_self;
                   });
  std::vector<ScoredCandidate> out;
  out.reserve(scored.size());
  for (std::size_t i : order) out.push_back(std::move(scored[i]));
  return out;
}

// Full ranking with explicit anchors (anchor set shared by all candidates).
inline std::vector<ScoredCandidate> rank_and_select(
    const ScorerBackend& scorer, const std::vector<PoisonExample>& candidates,
    const AnchorSet& anchors, const ZssCache& zss_cache, std::size_t top_k,
    const std::string& fixed_task_prompt) {
  if (candidates.empty())
    throw PreconditionError("rank_and_select: empty candidates");
  if (top_k > candidates.size())
    throw PreconditionError("rank_and_select: top_k exceeds candidates");
  std::vector<ScoredCandidate> scored;
  scored.reserve(candidates.size());
  for (const auto& c : candidates) {
    ScoredCandidate sc = matching_score(scorer, c, anchors, zss_cache);
    sc.zss_self = zero_shot_score(scorer, c.instruction.text, c.response,
                                  fixed_task_prompt);
    scored.push_back(std::move(sc));
  }
  std::vector<std::size_t> order(scored.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     if (scored[a].ms != scored[b].ms)
                       return scored[a].ms > scored[b].ms;
                     return scored[a].zss_self > scored[b].zss_self;
                   });
  std::vector<ScoredCandidate> out;
  out.reserve(top_k);
  for (std::size_t i = 0; i < top_k; ++i)
    out.push_back(std::move(scored[order[i]]));
  return out;
}

// Convenience wrapper: score under the config and keep the best top_k.
inline std::vector<ScoredCandidate> rank_and_select(
    const ScorerBackend& scorer, const std::vector<PoisonExample>& candidates,
    const MatchConfig& config, std::size_t top_k) {
  if (top_k > candidates.size())
    throw PreconditionError("rank_and_select: top_k exceeds candidates");
  std::vector<ScoredCandidate> scored =
      score_candidates(scorer, candidates, config);
  scored.resize(top_k);
  return scored;
}

// Score report export: one row per candidate in ranked order.
inline std::string score_report_csv(
    const std::vector<ScoredCandidate>& ranked, std::size_t selected_k) {
  std::string out = "candidate_id,ms,zss_self,selected\n";
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    out += std::to_string(ranked[i].cache_ref);
    out += ",";
    out += format_double(ranked[i].ms);
    out += ",";
    out += format_double(ranked[i].zss_self);
    out += i < selected_k ? ",1\n" : ",0\n";
  }
  return out;
}

}  // namespace condpoison
