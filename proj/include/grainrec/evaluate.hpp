// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "grainrec/dataio.hpp"
#include "grainrec/knn.hpp"
#include "grainrec/metrics.hpp"
#include "grainrec/model.hpp"

namespace grainrec {

enum class EvalMode {
  offline,         // rank the target against the whole catalog
  serving_parity,  // rank against the neighbor-restricted candidate set
};

/// Ranks of every test target under the model. In serving-parity mode the
/// candidate set is the union of the inputs' neighbor rows plus the inputs
/// themselves, so with k = m - 1 it is the full catalog.
template <class Real>
std::vector<Rank> rank_targets(const Model<Real>& model, std::span<const TrainingSequence> test,
                               EvalMode mode = EvalMode::offline, const NearestNeighborMatrix* nn = nullptr,
                               std::size_t batch_size = 256) {
  if (test.empty()) throw EvaluationError("empty test set");
  if (mode == EvalMode::serving_parity) {
    if (!nn) throw EvaluationError("serving-parity evaluation needs a neighbor matrix");
    if (nn->no_items != model.catalog_size()) {
      throw CompatibilityError("neighbor matrix covers " + std::to_string(nn->no_items) + " items, model has " +
                               std::to_string(model.catalog_size()));
    }
  }
  std::vector<Rank> ranks;
  ranks.reserve(test.size());
  const auto& emb = model.item_embeddings();
  for (std::size_t begin = 0; begin < test.size(); begin += batch_size) {
    const std::size_t end = std::min(test.size(), begin + batch_size);
    std::vector<std::vector<ItemIndex>> inputs;
    for (std::size_t i = begin; i < end; ++i) inputs.push_back(test[i].inputs);
    const Matrix<Real> s = model.embed_sessions(std::span<const std::vector<ItemIndex>>(inputs));
    if (mode == EvalMode::offline) {
      Matrix<Real> scores(s.rows(), emb.rows());
      kernel::gemm_nt_acc(s, emb, scores);
      for (std::size_t r = 0; r < s.rows(); ++r)
        ranks.push_back(rank_in_catalog<Real>(scores.row(r), test[begin + r].target));
    } else {
      for (std::size_t r = 0; r < s.rows(); ++r) {
        const auto& in = inputs[r];
        auto cand = candidates(*nn, in).items;
        cand.insert(cand.end(), in.begin(), in.end());
        std::sort(cand.begin(), cand.end());
        cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
        const auto sc = model.score(s.row(r), cand);
        ranks.push_back(rank_of_target<Real>(sc, cand, test[begin + r].target));
      }
    }
  }
  return ranks;
}

template <class Real>
EvalReport evaluate(const Model<Real>& model, std::span<const TrainingSequence> test, std::size_t k = 10,
                    EvalMode mode = EvalMode::offline, const NearestNeighborMatrix* nn = nullptr) {
  const auto ranks = rank_targets(model, test, mode, nn);
  return EvalReport::from_ranks(ranks, k);
}

/// Target frequency over the training pairs, one count per catalog item.
inline std::vector<double> popularity_counts(std::span<const TrainingSequence> train, std::size_t catalog_size) {
  std::vector<double> counts(catalog_size, 0.0);
  for (const auto& ts : train)
    if (ts.target < catalog_size) counts[ts.target] += 1.0;
  return counts;
}

/// Ranks every test target against the global training frequency ranking.
inline EvalReport popularity_baseline(std::span<const TrainingSequence> train, std::span<const TrainingSequence> test,
                                      std::size_t catalog_size, std::size_t k = 10) {
  if (test.empty()) throw EvaluationError("empty test set");
  const auto counts = popularity_counts(train, catalog_size);
  std::vector<Rank> ranks;
  ranks.reserve(test.size());
  for (const auto& ts : test) ranks.push_back(rank_in_catalog<double>(counts, ts.target));
  return EvalReport::from_ranks(ranks, k);
}

}  // namespace grainrec
