// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "grainrec/dataio.hpp"
#include "grainrec/evaluate.hpp"
#include "grainrec/knn.hpp"
#include "grainrec/model.hpp"
#include "grainrec/serving.hpp"
#include "grainrec/training.hpp"

namespace grainrec {

struct AblationRow {
  std::string value;
  EvalReport report;
  double train_seconds = 0;
  double p95_inference_us = 0;
};

struct AblationGrid {
  std::string axis;
  std::vector<AblationRow> rows;
};

struct AblationConfig {
  ModelConfig model;
  TrainConfig train;
  std::size_t nn_size = 100;      // neighbor rows used for the latency probe and nn_size cells
  std::size_t latency_probe = 200;  // requests timed per cell
};

namespace detail {

inline double quantile_of(std::vector<double> v, double q) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::min(v.size() - 1, idx == 0 ? 0 : idx - 1)];
}

/// p95 of Recommender::infer over the first `probe` validation prefixes.
inline double probe_latency_us(const Model<float>& model, const Vocabulary& vocab, NearestNeighborMatrix nn,
                               std::span<const TrainingSequence> valid, std::size_t probe) {
  Recommender rec(model, vocab, std::move(nn));
  std::vector<double> us;
  for (std::size_t i = 0; i < std::min(probe, valid.size()); ++i) {
    InferenceRequest req;
    for (ItemIndex it : valid[i].inputs) req.items.push_back(vocab.raw_id(it));
    const auto t0 = std::chrono::steady_clock::now();
    (void)rec.infer(req);
    us.push_back(std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count());
  }
  return quantile_of(std::move(us), 0.95);
}

inline std::size_t clamp_nn(std::size_t k, std::size_t m) { return std::max<std::size_t>(1, std::min(k, m - 1)); }

}  // namespace detail

/// Trains and evaluates one model per axis value on `data` (validation split
/// as the test set). Layer and dimension cells report full-catalog metrics;
/// nn_size cells train once and report neighbor-restricted metrics per k.
inline AblationGrid ablate(const std::string& axis, const std::vector<std::string>& values, const AblationConfig& base,
                           const PreparedData& data) {
  if (axis != "layer_pattern" && axis != "nn_size" && axis != "embedding_dim") {
    throw ConfigError("unknown ablation axis '" + axis + "' (expected layer_pattern, nn_size or embedding_dim)");
  }
  if (values.empty()) throw ConfigError("ablation needs at least one axis value");
  if (data.valid.empty()) throw EvaluationError("ablation needs a non-empty validation split");
  const unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t m = data.vocab.size();

  auto fit = [&](ModelConfig mc, double& seconds) {
    mc.catalog_size = m;
    mc.validate();
    Rng rng(base.train.seed);
    Model<float> model(mc, rng);
    const auto t0 = std::chrono::steady_clock::now();
    train(model, std::span<const TrainingSequence>(data.train), {}, base.train);
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return model;
  };

  AblationGrid grid;
  grid.axis = axis;
  if (axis == "nn_size") {
    std::vector<std::size_t> ks;
    for (const auto& v : values) {
      std::size_t k = 0;
      try {
        k = std::stoul(v);
      } catch (const std::exception&) {
        throw ConfigError("nn_size value '" + v + "' is not a positive integer");
      }
      if (k < 1 || k >= m) throw ConfigError("nn_size value " + v + " must be in [1, " + std::to_string(m - 1) + "]");
      ks.push_back(k);
    }
    double seconds = 0;
    const Model<float> model = fit(base.model, seconds);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      auto nn = build_nn_matrix(model.item_embeddings(), ks[i], Similarity::cosine, threads);
      AblationRow row;
      row.value = values[i];
      row.report = evaluate(model, std::span<const TrainingSequence>(data.valid), base.train.eval_k,
                            EvalMode::serving_parity, &nn);
      row.train_seconds = seconds;
      row.p95_inference_us = detail::probe_latency_us(model, data.vocab, std::move(nn), data.valid, base.latency_probe);
      grid.rows.push_back(std::move(row));
    }
    return grid;
  }

  for (const auto& v : values) {
    ModelConfig mc = base.model;
    if (axis == "layer_pattern") {
      mc.layer_pattern = v;
    } else {
      try {
        mc.embedding_dim = std::stoul(v);
      } catch (const std::exception&) {
        throw ConfigError("embedding_dim value '" + v + "' is not a positive integer");
      }
    }
    AblationRow row;
    row.value = v;
    const Model<float> model = fit(mc, row.train_seconds);
    row.report = evaluate(model, std::span<const TrainingSequence>(data.valid), base.train.eval_k);
    auto nn = build_nn_matrix(model.item_embeddings(), detail::clamp_nn(base.nn_size, m), Similarity::cosine, threads);
    row.p95_inference_us = detail::probe_latency_us(model, data.vocab, std::move(nn), data.valid, base.latency_probe);
    grid.rows.push_back(std::move(row));
  }
  return grid;
}

/// CSV: axis value, ndcg@K, hit@K, mrr@K, train seconds, p95 inference us.
/// With `with_timing` false the two timing columns are left out so the output
/// is reproducible byte for byte.
inline void write_ablation_csv(std::ostream& out, const AblationGrid& grid, bool with_timing = true) {
  const std::size_t k = grid.rows.empty() ? 10 : grid.rows.front().report.k;
  out << grid.axis << ",ndcg@" << k << ",hit@" << k << ",mrr@" << k;
  if (with_timing) out << ",train_seconds,p95_inference_us";
  out << '\n';
  const auto old = out.precision(17);
  for (const auto& r : grid.rows) {
    out << r.value << ',' << r.report.ndcg << ',' << r.report.hit << ',' << r.report.mrr;
    if (with_timing) out << ',' << r.train_seconds << ',' << r.p95_inference_us;
    out << '\n';
  }
  out.precision(old);
}

}  // namespace grainrec
