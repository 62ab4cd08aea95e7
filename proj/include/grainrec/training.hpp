// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "grainrec/dataio.hpp"
#include "grainrec/evaluate.hpp"
#include "grainrec/model.hpp"
#include "grainrec/numerics/param_store.hpp"

namespace grainrec {

struct TrainConfig {
  double learning_rate = 0.00045;
  std::size_t batch_size = 64;
  double weight_decay = 0.0001;
  std::size_t epochs = 10;
  std::uint64_t seed = 42;
  int precision = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 5.0;
  std::size_t eval_k = 10;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
  }
};

/// Adam with decoupled weight decay: p <- p (1 - lr wd), then the
/// bias-corrected moment update. Non-trainable entries are skipped.
template <class Real>
void optimizer_step(ParamStore<Real>& params, const TrainConfig& cfg) {
  const std::size_t t = ++params.step();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const Real decay = static_cast<Real>(1.0 - cfg.learning_rate * cfg.weight_decay);
  const Real b1 = static_cast<Real>(cfg.beta1), b2 = static_cast<Real>(cfg.beta2);
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const Real g = e.grad[i];
      e.moment1[i] = b1 * e.moment1[i] + (Real(1) - b1) * g;
      e.moment2[i] = b2 * e.moment2[i] + (Real(1) - b2) * g * g;
      const double mhat = static_cast<double>(e.moment1[i]) / bc1;
      const double vhat = static_cast<double>(e.moment2[i]) / bc2;
      e.value[i] = e.value[i] * decay -
                   static_cast<Real>(cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon));
    }
  }
}

/// Scales gradients so their global norm is at most `max_norm`.
template <class Real>
double clip_gradients(ParamStore<Real>& params, double max_norm) {
  const double norm = params.grad_norm();
  if (max_norm > 0 && norm > max_norm) {
    const Real s = static_cast<Real>(max_norm / norm);
    for (auto& e : params.entries())
      if (e.trainable)
        for (std::size_t i = 0; i < e.grad.size(); ++i) e.grad[i] *= s;
  }
  return norm;
}

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0;
  double hit = std::numeric_limits<double>::quiet_NaN();  // validation hit@k
  double wall_seconds = 0;
};

inline void write_training_log_csv(std::ostream& out, std::span<const EpochLog> log, std::size_t k = 10,
                                   bool with_time = true) {
  out << "epoch,loss,hit@" << k;
  if (with_time) out << ",wall_seconds";
  out << '\n';
  out.precision(17);
  for (const auto& e : log) {
    out << e.epoch << ',' << e.loss << ',' << e.hit;
    if (with_time) out << ',' << e.wall_seconds;
    out << '\n';
  }
}

/// Mini-batch training. Each epoch shuffles with the seeded generator; each
/// batch builds its graph, runs forward in train mode, back-propagates the
/// mean cross-entropy, clips and takes one optimizer step. Validation hit@k is
/// logged per epoch when `valid` is non-empty.
template <class Real>
std::vector<EpochLog> train(Model<Real>& model, std::span<const TrainingSequence> data,
                            std::span<const TrainingSequence> valid, const TrainConfig& cfg,
                            const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw InputError("training set is empty");
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<EpochLog> log;
  auto& params = model.params();
  std::vector<TrainingSequence> batch;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(order);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(data[order[i]]);
      params.zero_grad();
      Tape<Real> tape(true);
      Rng dropout_rng = rng.split();
      Var loss = model.batch_loss(tape, batch, Mode::train, dropout_rng);
      const double lv = static_cast<double>(tape.value(loss)[0]);
      if (!std::isfinite(lv)) {
        std::ostringstream os;
        os << "non-finite loss " << lv << " at epoch " << epoch << " batch " << batches << "; parameter norms:";
        for (const auto& e : params.entries()) os << ' ' << e.name << '=' << std::sqrt(static_cast<double>(e.value.squared_norm()));
        throw NumericError(os.str());
      }
      tape.backward(loss);
      clip_gradients(params, cfg.clip_norm);
      optimizer_step(params, cfg);
      loss_sum += lv;
      ++batches;
    }
    EpochLog e;
    e.epoch = epoch;
    e.loss = loss_sum / static_cast<double>(batches);
    if (!valid.empty()) e.hit = evaluate(model, valid, cfg.eval_k).hit;
    e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return log;
}

/// Mean loss of a dataset under the current parameters, eval mode.
template <class Real>
double dataset_loss(const Model<Real>& model, std::span<const TrainingSequence> data, std::size_t batch_size = 256) {
  double total = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::size_t end = std::min(data.size(), begin + batch_size);
    std::vector<std::vector<ItemIndex>> inputs;
    for (std::size_t i = begin; i < end; ++i) inputs.push_back(data[i].inputs);
    const auto s = model.embed_sessions(std::span<const std::vector<ItemIndex>>(inputs));
    const auto& emb = model.item_embeddings();
    Matrix<Real> logits(s.rows(), emb.rows());
    kernel::gemm_nt_acc(s, emb, logits);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      const auto row = logits.row(r);
      double mx = -std::numeric_limits<double>::infinity();
      for (Real v : row) mx = std::max(mx, static_cast<double>(v));
      double z = 0;
      for (Real v : row) z += std::exp(static_cast<double>(v) - mx);
      total += -(static_cast<double>(row[data[begin + r].target]) - mx - std::log(z));
    }
  }
  return total / static_cast<double>(data.size());
}

}  // namespace grainrec
