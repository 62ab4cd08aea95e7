// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "grainrec/dataio.hpp"
#include "grainrec/error.hpp"

namespace grainrec {

/// 1-based rank, or nullopt when the target is not among the candidates.
using Rank = std::optional<std::size_t>;

/// Rank of `target` among `candidates` scored by `scores`: one plus the number
/// of candidates scoring strictly higher, plus equal-score candidates with a
/// smaller item index.
template <class Real>
Rank rank_of_target(std::span<const Real> scores, std::span<const ItemIndex> candidates, ItemIndex target) {
  if (scores.size() != candidates.size()) throw DimensionError("rank_of_target: scores/candidates length mismatch");
  std::optional<Real> target_score;
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (candidates[i] == target) {
      target_score = scores[i];
      break;
    }
  if (!target_score) return std::nullopt;
  std::size_t rank = 1;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i] == target) continue;
    if (scores[i] > *target_score || (scores[i] == *target_score && candidates[i] < target)) ++rank;
  }
  return rank;
}

/// Same rule over a full-catalog score vector (candidate i is item i).
template <class Real>
Rank rank_in_catalog(std::span<const Real> scores, ItemIndex target) {
  if (target >= scores.size()) return std::nullopt;
  const Real ts = scores[target];
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i == target) continue;
    if (scores[i] > ts || (scores[i] == ts && i < target)) ++rank;
  }
  return rank;
}

inline void require_ranks(std::span<const Rank> ranks) {
  if (ranks.empty()) throw EvaluationError("cannot compute metrics over an empty rank list");
}

inline double hit_at_k(std::span<const Rank> ranks, std::size_t k = 10) {
  require_ranks(ranks);
  double s = 0;
  for (const auto& r : ranks)
    if (r && *r <= k) s += 1.0;
  return s / static_cast<double>(ranks.size());
}

inline double mrr_at_k(std::span<const Rank> ranks, std::size_t k = 10) {
  require_ranks(ranks);
  double s = 0;
  for (const auto& r : ranks)
    if (r && *r <= k) s += 1.0 / static_cast<double>(*r);
  return s / static_cast<double>(ranks.size());
}

/// Single relevant item, so the ideal DCG is 1.
inline double ndcg_at_k(std::span<const Rank> ranks, std::size_t k = 10) {
  require_ranks(ranks);
  double s = 0;
  for (const auto& r : ranks)
    if (r && *r <= k) s += 1.0 / std::log2(static_cast<double>(*r) + 1.0);
  return s / static_cast<double>(ranks.size());
}

struct EvalReport {
  double hit = 0;
  double mrr = 0;
  double ndcg = 0;
  std::size_t k = 10;
  std::size_t case_count = 0;

  static EvalReport from_ranks(std::span<const Rank> ranks, std::size_t k = 10) {
    EvalReport r;
    r.hit = hit_at_k(ranks, k);
    r.mrr = mrr_at_k(ranks, k);
    r.ndcg = ndcg_at_k(ranks, k);
    r.k = k;
    r.case_count = ranks.size();
    return r;
  }
};

}  // namespace grainrec
