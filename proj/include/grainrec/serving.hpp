// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "grainrec/checkpoint.hpp"
#include "grainrec/dataio.hpp"
#include "grainrec/knn.hpp"
#include "grainrec/model.hpp"

namespace grainrec {

/// Most recent items kept for an inference session.
inline constexpr std::size_t kServingSessionCap = 3;

struct InferenceRequest {
  std::vector<RawItemId> items;
  std::vector<std::string> cats;  // empty or parallel to items
  std::size_t n = 10;

  void validate() const {
    if (items.empty()) throw ProtocolError("request 'items' must be a non-empty array");
    if (!cats.empty() && cats.size() != items.size()) {
      throw ProtocolError("request 'cats' must be parallel to 'items'");
    }
    if (n < 1) throw ProtocolError("request 'n' must be >= 1");
  }

  static InferenceRequest from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ProtocolError("request body must be a JSON object");
    InferenceRequest r;
    if (!j.contains("items") || !j["items"].is_array()) throw ProtocolError("request 'items' must be an array of integers");
    for (const auto& v : j["items"]) {
      if (!v.is_number_integer()) throw ProtocolError("request 'items' must be an array of integers");
      r.items.push_back(v.get<RawItemId>());
    }
    if (j.contains("cats") && !j["cats"].is_null()) {
      if (!j["cats"].is_array()) throw ProtocolError("request 'cats' must be an array of strings");
      for (const auto& v : j["cats"]) {
        if (!v.is_string()) throw ProtocolError("request 'cats' must be an array of strings");
        r.cats.push_back(v.get<std::string>());
      }
    }
    if (j.contains("n") && !j["n"].is_null()) {
      if (!j["n"].is_number_integer() || j["n"].get<std::int64_t>() < 1) {
        throw ProtocolError("request 'n' must be a positive integer");
      }
      r.n = j["n"].get<std::size_t>();
    }
    r.validate();
    return r;
  }

  static InferenceRequest parse(const std::string& body) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) throw ProtocolError("request body is not valid JSON");
    return from_json(j);
  }
};

struct RankedRecommendations {
  std::vector<RawItemId> recs;
  std::vector<double> scores;
  std::int64_t latency_us = 0;
  bool fallback_used = false;

  nlohmann::json to_json() const {
    return {{"recs", recs}, {"scores", scores}, {"latency_us", latency_us}, {"fallback_used", fallback_used}};
  }
};

/// Live-session filter: out-of-vocabulary items are dropped; when the most
/// recent surviving item has a known category only items with exactly that
/// label stay; consecutive repeats collapse; the last `cap` items are kept.
/// Request categories take precedence over the catalog's.
inline std::vector<ItemIndex> filter_session(const InferenceRequest& req, const Vocabulary& vocab,
                                             std::size_t cap = kServingSessionCap) {
  std::vector<ItemIndex> idx;
  std::vector<std::string> cat;
  for (std::size_t i = 0; i < req.items.size(); ++i) {
    auto d = vocab.find(req.items[i]);
    if (!d) continue;
    idx.push_back(*d);
    cat.push_back(req.cats.empty() ? vocab.category(*d) : req.cats[i]);
  }
  if (idx.empty()) return idx;
  const std::string last = cat.back();
  if (!last.empty()) {
    std::vector<ItemIndex> same;
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (cat[i] == last) same.push_back(idx[i]);
    idx = std::move(same);
  }
  auto out = collapse_consecutive(idx);
  if (out.size() > cap) out.erase(out.begin(), out.end() - static_cast<std::ptrdiff_t>(cap));
  return out;
}

/// Immutable serving state: model, catalog and neighbor matrix. All methods
/// are const and safe to call from many threads at once.
class Recommender {
 public:
  Recommender(Model<float> model, Vocabulary vocab, NearestNeighborMatrix nn)
      : model_(std::move(model)), vocab_(std::move(vocab)), nn_(std::move(nn)), vocab_hash_(vocab_.hash()) {
    if (model_.catalog_size() != vocab_.size()) {
      throw CompatibilityError("model catalog (" + std::to_string(model_.catalog_size()) + ") and vocabulary (" +
                               std::to_string(vocab_.size()) + ") differ");
    }
    if (nn_.no_items != vocab_.size()) {
      throw CompatibilityError("neighbor matrix covers " + std::to_string(nn_.no_items) + " items, vocabulary has " +
                               std::to_string(vocab_.size()));
    }
    popularity_.resize(vocab_.size());
    std::iota(popularity_.begin(), popularity_.end(), ItemIndex{0});
    std::stable_sort(popularity_.begin(), popularity_.end(),
                     [&](ItemIndex a, ItemIndex b) { return vocab_.count(a) > vocab_.count(b); });
  }

  /// Loads manifest.txt, params.bin, vocab.tsv and nn_matrix.bin from a
  /// checkpoint directory, checking the vocabulary hash.
  static Recommender load(const std::filesystem::path& dir) {
    Checkpoint ck = load_checkpoint(dir);
    Vocabulary vocab = read_vocabulary(dir / "vocab.tsv");
    if (vocab.hash() != ck.vocab_hash) {
      throw CompatibilityError("vocabulary hash " + std::to_string(vocab.hash()) + " does not match checkpoint " +
                               std::to_string(ck.vocab_hash));
    }
    auto nn = read_nn_matrix(dir / "nn_matrix.bin");
    return Recommender(model_from_checkpoint<float>(ck), std::move(vocab), std::move(nn));
  }

  const Model<float>& model() const noexcept { return model_; }
  const Vocabulary& vocab() const noexcept { return vocab_; }
  const NearestNeighborMatrix& nn() const noexcept { return nn_; }
  std::uint64_t vocab_hash() const noexcept { return vocab_hash_; }

  RankedRecommendations infer(const InferenceRequest& req) const { return run(req, false); }

  /// Same as infer() but scores the whole catalog instead of the neighbor
  /// candidates. Used to check the restricted path.
  RankedRecommendations infer_full_catalog(const InferenceRequest& req) const { return run(req, true); }

 private:
  RankedRecommendations run(const InferenceRequest& req, bool full) const {
    const auto t0 = std::chrono::steady_clock::now();
    req.validate();
    std::unordered_set<ItemIndex> exclude;
    for (RawItemId r : req.items)
      if (auto d = vocab_.find(r)) exclude.insert(*d);

    RankedRecommendations out;
    const auto session = filter_session(req, vocab_);
    std::vector<ItemIndex> cand;
    if (!session.empty()) {
      if (full) {
        for (ItemIndex i = 0; i < vocab_.size(); ++i)
          if (!exclude.count(i)) cand.push_back(i);
      } else {
        for (ItemIndex c : candidates(nn_, session).items)
          if (!exclude.count(c)) cand.push_back(c);
      }
    }
    if (cand.empty()) {
      out.fallback_used = true;
      for (ItemIndex i : popularity_) {
        if (out.recs.size() >= req.n) break;
        if (exclude.count(i)) continue;
        out.recs.push_back(vocab_.raw_id(i));
        out.scores.push_back(static_cast<double>(vocab_.count(i)));
      }
    } else {
      const Matrix<float> s = model_.embed_session(session);
      const auto sc = model_.score(s.row(0), cand);
      std::vector<std::size_t> order(cand.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      const std::size_t take = std::min(req.n, cand.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                        [&](std::size_t a, std::size_t b) { return sc[a] != sc[b] ? sc[a] > sc[b] : cand[a] < cand[b]; });
      for (std::size_t i = 0; i < take; ++i) {
        out.recs.push_back(vocab_.raw_id(cand[order[i]]));
        out.scores.push_back(static_cast<double>(sc[order[i]]));
      }
    }
    out.latency_us =
        std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - t0).count();
    return out;
  }

  Model<float> model_;
  Vocabulary vocab_;
  NearestNeighborMatrix nn_;
  std::uint64_t vocab_hash_ = 0;
  std::vector<ItemIndex> popularity_;
};

}  // namespace grainrec
