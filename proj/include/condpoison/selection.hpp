#pragma once

// Instruction collection, general/specific categorization, proportion
// balancing and K-Center-Greedy diversity sampling over instruction
// embeddings.

#include <cmath>
#include <limits>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "condpoison/backends.hpp"
#include "condpoison/common.hpp"
#include "condpoison/corpus.hpp"

namespace condpoison {

// ---------------------------------------------------------------------------
// Collection

struct CollectResult {
  std::vector<std::string> texts;
  std::vector<std::string> warnings;
};

inline std::string collection_prompt(const ConditionSpec& condition, int n) {
  return "Please give me " + std::to_string(n) +
         " different instructions for users to specify the " +
         describe_condition(condition) + ".";
}

namespace detail {

// Strips leading list markers: "12.", "3)", "-", "*".
inline std::string strip_list_marker(const std::string& line) {
  std::size_t i = 0;
  while (i < line.size() &&
         std::isspace(static_cast<unsigned char>(line[i])))
    ++i;
  std::size_t digits = i;
  while (digits < line.size() &&
         std::isdigit(static_cast<unsigned char>(line[digits])))
    ++digits;
  if (digits > i && digits < line.size() &&
      (line[digits] == '.' || line[digits] == ')'))
    return trim(line.substr(digits + 1));
  if (i < line.size() && (line[i] == '-' || line[i] == '*'))
    return trim(line.substr(i + 1));
  return trim(line.substr(i));
}

}  // namespace detail

// Asks the chat backend for candidate generation instructions and parses the
// numbered/line-separated reply. Deduplicates case-insensitively, keeping
// first occurrences; returns at most n texts.
inline CollectResult collect_instructions(const ChatBackend& chat,
                                          const ConditionSpec& condition,
                                          int n, int min_expected = 1,
                                          const GenerationParams& params = {
                                              0.0, 2048, std::nullopt}) {
  if (n < 1) throw PreconditionError("collect_instructions: n must be >= 1");
  std::string reply = chat.chat(
      {{"user", collection_prompt(condition, n)}}, params);
  CollectResult result;
  std::set<std::string> seen;
  for (const auto& raw : split_lines(reply)) {
    std::string text = detail::strip_list_marker(raw);
    if (text.empty()) continue;
    std::string key = to_lower(text);
    if (seen.count(key)) continue;
    seen.insert(key);
    result.texts.push_back(text);
    if (result.texts.size() == static_cast<std::size_t>(n)) break;
  }
  if (static_cast<int>(result.texts.size()) < min_expected)
    result.warnings.push_back(
        "collected only " + std::to_string(result.texts.size()) +
        " instructions (expected at least " + std::to_string(min_expected) +
        ")");
  return result;
}

// ---------------------------------------------------------------------------
// Categorization

struct CategorizeResult {
  InstructionKind kind = InstructionKind::general;
  bool matched_keyword = false;
};

// Specific keywords take precedence over general ones; text matching
// neither keyword set is filed as general with matched_keyword=false.
inline CategorizeResult categorize_instruction(const std::string& text,
                                               const ConditionSpec& condition) {
  if (condition.general_keywords.empty() ||
      condition.specific_keywords.empty())
    throw PreconditionError(
        "categorize_instruction: condition keyword sets must be non-empty");
  std::string norm = to_lower(trim(text));
  for (const auto& kw : condition.specific_keywords)
    if (norm.find(kw) != std::string::npos)
      return {InstructionKind::specific, true};
  for (const auto& kw : condition.general_keywords)
    if (norm.find(kw) != std::string::npos)
      return {InstructionKind::general, true};
  return {InstructionKind::general, false};
}

// ---------------------------------------------------------------------------
// Proportion balancing

// Seeded subsample to the requested general/specific mix. When target_size
// is absent, the largest feasible size is used. For token_limit conditions
// the numeric slot of each surviving specific instruction is rewritten by
// cycling through token_values; instructions without a numeric slot get the
// value appended.
inline std::vector<Instruction> balance_pool(
    const std::vector<Instruction>& pool, const ConditionSpec& condition,
    double general_fraction, const std::vector<int>& token_values,
    std::uint64_t seed,
    std::optional<std::size_t> target_size = std::nullopt) {
  if (general_fraction < 0.0 || general_fraction > 1.0)
    throw PreconditionError("balance_pool: general_fraction outside [0,1]");
  std::vector<std::size_t> general_idx, specific_idx;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    (pool[i].kind == InstructionKind::general ? general_idx : specific_idx)
        .push_back(i);
  }
  const std::size_t g = general_idx.size(), s = specific_idx.size();

  auto counts_for = [&](std::size_t m) {
    auto n_general = static_cast<std::size_t>(
        std::llround(general_fraction * static_cast<double>(m)));
    return std::pair<std::size_t, std::size_t>{n_general, m - n_general};
  };

  std::size_t m;
  if (target_size) {
    m = *target_size;
    auto [ng, ns] = counts_for(m);
    if (ng > g || ns > s)
      throw PreconditionError(
          "balance_pool: infeasible fraction " +
          format_double(general_fraction) + " for pool with " +
          std::to_string(g) + " general / " + std::to_string(s) +
          " specific and target " + std::to_string(m));
  } else {
    m = pool.size();
    while (m > 0) {
      auto [ng, ns] = counts_for(m);
      if (ng <= g && ns <= s) break;
      --m;
    }
    if (m == 0 && !pool.empty())
      throw PreconditionError(
          "balance_pool: infeasible fraction " +
          format_double(general_fraction) + " for pool with " +
          std::to_string(g) + " general / " + std::to_string(s) +
          " specific");
  }
  auto [n_general, n_specific] = counts_for(m);

  auto pick = [&](const std::vector<std::size_t>& from, std::size_t k,
                  std::uint64_t salt) {
    auto chosen = seeded_sample_indices(from.size(), k,
                                        fnv1a_u64(salt, fnv1a_u64(seed)));
    std::vector<std::size_t> out;
    out.reserve(k);
    for (auto c : chosen) out.push_back(from[c]);
    return out;
  };
  std::vector<std::size_t> keep = pick(general_idx, n_general, 1);
  std::vector<std::size_t> keep_s = pick(specific_idx, n_specific, 2);
  keep.insert(keep.end(), keep_s.begin(), keep_s.end());
  std::sort(keep.begin(), keep.end());

  std::vector<Instruction> out;
  out.reserve(keep.size());
  std::size_t cycle = 0;
  for (std::size_t i : keep) {
    Instruction ins = pool[i];
    if (condition.kind == ConditionKind::token_limit &&
        ins.kind == InstructionKind::specific && !token_values.empty()) {
      int value = token_values[cycle % token_values.size()];
      ++cycle;
      static const std::regex kNumber("[0-9]+");
      if (std::regex_search(ins.text, kNumber)) {
        ins.text = std::regex_replace(ins.text, kNumber,
                                      std::to_string(value),
                                      std::regex_constants::format_first_only);
      } else {
        ins.text += " (within " + std::to_string(value) + " tokens)";
      }
    }
    out.push_back(std::move(ins));
  }
  return out;
}

// ---------------------------------------------------------------------------
// K-Center-Greedy

enum class PoolMetric { euclidean, cosine_distance };

struct EmbeddedPool {
  std::vector<Instruction> items;
  std::vector<std::vector<double>> vectors;  // unit vectors, aligned
  PoolMetric metric = PoolMetric::euclidean;

  void validate() const {
    if (items.size() != vectors.size())
      throw PreconditionError("EmbeddedPool: item/vector count mismatch");
    if (!vectors.empty()) {
      std::size_t dim = vectors.front().size();
      for (const auto& v : vectors)
        if (v.size() != dim)
          throw PreconditionError("EmbeddedPool: inconsistent dimensions");
    }
  }
};

inline double pool_distance(const EmbeddedPool& pool, std::size_t a,
                            std::size_t b) {
  const auto& x = pool.vectors[a];
  const auto& y = pool.vectors[b];
  if (pool.metric == PoolMetric::euclidean) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      double d = x[i] - y[i];
      s += d * d;
    }
    return std::sqrt(s);
  }
  double dot = 0;
  for (std::size_t i = 0; i < x.size(); ++i) dot += x[i] * y[i];
  return 1.0 - dot;
}

struct SelectionResult {
  std::vector<std::size_t> picked;  // in selection order
  std::vector<double> trace;        // argmax-min distance achieved per pick
  std::vector<std::size_t> seed_indices;
};

inline EmbeddedPool embed_pool(const EmbedBackend& embedder,
                               std::vector<Instruction> items,
                               PoolMetric metric = PoolMetric::euclidean) {
  std::vector<std::string> texts;
  texts.reserve(items.size());
  for (const auto& ins : items) texts.push_back(ins.text);
  EmbeddedPool pool;
  pool.items = std::move(items);
  pool.vectors = embedder.embed(texts);
  pool.metric = metric;
  pool.validate();
  return pool;
}

enum class TieBreak { lowest_index };

// Iteratively picks the point with maximal minimum distance to the selected
// set (seed plus previous picks). Ties break to the lowest index. With an
// empty seed set the first pick is the point farthest from the pool centroid
// (farthest-point bootstrap); that step's trace entry is the centroid
// distance and is exempt from the non-increasing property.
inline SelectionResult k_center_greedy(const EmbeddedPool& pool,
                                       std::vector<std::size_t> seed_indices,
                                       std::size_t budget,
                                       TieBreak = TieBreak::lowest_index) {
  pool.validate();
  const std::size_t n = pool.items.size();
  if (n == 0) throw PreconditionError("k_center_greedy: empty pool");
  for (std::size_t s : seed_indices)
    if (s >= n)
      throw PreconditionError("k_center_greedy: seed index out of range");
  if (budget > n - seed_indices.size())
    throw PreconditionError(
        "k_center_greedy: budget " + std::to_string(budget) +
        " exceeds available " + std::to_string(n - seed_indices.size()));

  SelectionResult result;
  result.seed_indices = seed_indices;
  if (budget == 0) return result;

  std::vector<bool> selected(n, false);
  for (std::size_t s : seed_indices) selected[s] = true;

  // min distance from each point to the selected set
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s : seed_indices)
      min_dist[i] = std::min(min_dist[i], pool_distance(pool, i, s));

  std::size_t remaining = budget;
  if (seed_indices.empty()) {
    // bootstrap: farthest point from the centroid
    std::size_t dim = pool.vectors.front().size();
    std::vector<double> centroid(dim, 0.0);
    for (const auto& v : pool.vectors)
      for (std::size_t d = 0; d < dim; ++d) centroid[d] += v[d];
    for (double& c : centroid) c /= static_cast<double>(n);
    auto centroid_dist = [&](std::size_t i) {
      if (pool.metric == PoolMetric::euclidean) {
        double s = 0;
        for (std::size_t d = 0; d < dim; ++d) {
          double diff = pool.vectors[i][d] - centroid[d];
          s += diff * diff;
        }
        return std::sqrt(s);
      }
      double dot = 0;
      for (std::size_t d = 0; d < dim; ++d)
        dot += pool.vectors[i][d] * centroid[d];
      return 1.0 - dot;
    };
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = centroid_dist(i);
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    selected[best] = true;
    result.picked.push_back(best);
    result.trace.push_back(best_d);
    for (std::size_t i = 0; i < n; ++i)
      min_dist[i] = std::min(min_dist[i], pool_distance(pool, i, best));
    --remaining;
  }

  for (std::size_t step = 0; step < remaining; ++step) {
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (selected[i]) continue;
      if (min_dist[i] > best_d) {
        best_d = min_dist[i];
        best = i;
      }
    }
    if (best == n) break;  // nothing left (budget precondition prevents this)
    selected[best] = true;
    result.picked.push_back(best);
    result.trace.push_back(best_d);
    for (std::size_t i = 0; i < n; ++i)
      min_dist[i] = std::min(min_dist[i], pool_distance(pool, i, best));
  }
  return result;
}

// Max over all pool points of the min distance to any center.
inline double covering_radius(const EmbeddedPool& pool,
                              const std::vector<std::size_t>& centers) {
  pool.validate();
  if (centers.empty())
    throw PreconditionError("covering_radius: centers must be non-empty");
  for (std::size_t c : centers)
    if (c >= pool.items.size())
      throw PreconditionError("covering_radius: center index out of range");
  double radius = 0;
  for (std::size_t i = 0; i < pool.items.size(); ++i) {
    double d = std::numeric_limits<double>::infinity();
    for (std::size_t c : centers)
      d = std::min(d, pool_distance(pool, i, c));
    radius = std::max(radius, d);
  }
  return radius;
}

// ---------------------------------------------------------------------------
// 2-D PCA projection of the embedding matrix (for instruction-distribution
// plots). Power iteration with deflation; pools are small so no linear
// algebra dependency is warranted.

inline std::vector<std::pair<double, double>> pca_project_2d(
    const std::vector<std::vector<double>>& vectors) {
  const std::size_t n = vectors.size();
  if (n == 0) return {};
  const std::size_t dim = vectors.front().size();
  std::vector<double> mean(dim, 0.0);
  for (const auto& v : vectors)
    for (std::size_t d = 0; d < dim; ++d) mean[d] += v[d];
  for (double& m : mean) m /= static_cast<double>(n);

  std::vector<std::vector<double>> centered(n, std::vector<double>(dim));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d)
      centered[i][d] = vectors[i][d] - mean[d];

  // One power-iteration pass; applies X^T X without materializing it.
  auto principal_axis = [&](const std::vector<std::vector<double>>& rows) {
    std::vector<double> v(dim);
    for (std::size_t d = 0; d < dim; ++d)
      v[d] = 1.0 / static_cast<double>(d + 1);
    auto normalize = [&](std::vector<double>& x) {
      double norm = 0;
      for (double e : x) norm += e * e;
      norm = std::sqrt(norm);
      if (norm > 0)
        for (double& e : x) e /= norm;
      return norm;
    };
    normalize(v);
    for (int iter = 0; iter < 500; ++iter) {
      std::vector<double> next(dim, 0.0);
      for (const auto& row : rows) {
        double proj = 0;
        for (std::size_t d = 0; d < dim; ++d) proj += row[d] * v[d];
        for (std::size_t d = 0; d < dim; ++d) next[d] += proj * row[d];
      }
      if (normalize(next) == 0.0) break;
      double delta = 0;
      for (std::size_t d = 0; d < dim; ++d)
        delta += (next[d] - v[d]) * (next[d] - v[d]);
      v = next;
      if (delta < 1e-24) break;
    }
    // deterministic sign: largest-magnitude component positive
    std::size_t arg = 0;
    for (std::size_t d = 1; d < dim; ++d)
      if (std::abs(v[d]) > std::abs(v[arg])) arg = d;
    if (v[arg] < 0)
      for (double& e : v) e = -e;
    return v;
  };

  std::vector<double> axis1 = principal_axis(centered);
  std::vector<std::vector<double>> deflated = centered;
  for (auto& row : deflated) {
    double proj = 0;
    for (std::size_t d = 0; d < dim; ++d) proj += row[d] * axis1[d];
    for (std::size_t d = 0; d < dim; ++d) row[d] -= proj * axis1[d];
  }
  std::vector<double> axis2 = principal_axis(deflated);

  std::vector<std::pair<double, double>> out;
  out.reserve(n);
  for (const auto& row : centered) {
    double x = 0, y = 0;
    for (std::size_t d = 0; d < dim; ++d) {
      x += row[d] * axis1[d];
      y += row[d] * axis2[d];
    }
    out.emplace_back(x, y);
  }
  return out;
}

inline std::string projection_csv(const std::vector<Instruction>& items,
                                  const std::vector<std::pair<double, double>>&
                                      points) {
  if (items.size() != points.size())
    throw PreconditionError("projection_csv: size mismatch");
  std::string out = "instruction_id,kind,x,y\n";
  for (std::size_t i = 0; i < items.size(); ++i) {
    out += std::to_string(i);
    out += items[i].kind == InstructionKind::general ? ",general,"
                                                     : ",specific,";
    out += format_double(points[i].first);
    out += ",";
    out += format_double(points[i].second);
    out += "\n";
  }
  return out;
}

}  // namespace condpoison
