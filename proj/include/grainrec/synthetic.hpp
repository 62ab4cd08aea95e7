// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "grainrec/dataio.hpp"
#include "grainrec/numerics/matrix.hpp"

namespace grainrec {

/// Corpus drawn from a planted first-order transition table. Every item has a
/// few successors inside its own category with rank-decaying probabilities;
/// session starts follow a mild power law over items.
struct SyntheticSpec {
  std::size_t items = 200;
  std::size_t sessions = 20000;
  std::size_t categories = 10;
  std::size_t successors = 5;
  std::size_t min_length = 2;
  std::size_t max_length = 8;
  double start_skew = 0.5;  // start weight of item i is (i + 1)^-skew
  std::uint64_t seed = 7;
  RawItemId first_raw_id = 1000;
};

struct TransitionTable {
  std::vector<std::vector<std::size_t>> next;  // successors per item
  std::vector<std::vector<double>> prob;       // parallel probabilities
};

namespace detail {

inline std::size_t draw(const std::vector<double>& cdf, Rng& rng) {
  const double u = rng.uniform() * cdf.back();
  std::size_t i = 0;
  while (i + 1 < cdf.size() && cdf[i] <= u) ++i;
  return i;
}

inline std::vector<double> cumulative(const std::vector<double>& w) {
  std::vector<double> c(w.size());
  double acc = 0;
  for (std::size_t i = 0; i < w.size(); ++i) c[i] = acc += w[i];
  return c;
}

}  // namespace detail

inline std::string synthetic_category(std::size_t item, std::size_t categories) {
  return "c" + std::to_string(item % categories);
}

/// Builds the planted table. Item i belongs to category i % categories.
inline TransitionTable planted_transitions(const SyntheticSpec& spec) {
  if (spec.items < 2 || spec.categories < 1 || spec.successors < 1) {
    throw ConfigError("synthetic corpus needs >= 2 items, >= 1 category and >= 1 successor");
  }
  const std::size_t per_cat = spec.items / spec.categories;
  if (per_cat <= spec.successors) throw ConfigError("synthetic corpus: too few items per category for successor count");
  Rng rng(spec.seed);
  TransitionTable t;
  t.next.resize(spec.items);
  t.prob.resize(spec.items);
  for (std::size_t i = 0; i < spec.items; ++i) {
    std::vector<std::size_t> pool;
    for (std::size_t j = i % spec.categories; j < spec.items; j += spec.categories)
      if (j != i) pool.push_back(j);
    rng.shuffle(pool);
    pool.resize(spec.successors);
    double z = 0;
    for (std::size_t r = 0; r < pool.size(); ++r) z += 1.0 / static_cast<double>(r + 1);
    t.next[i] = pool;
    for (std::size_t r = 0; r < pool.size(); ++r) t.prob[i].push_back(1.0 / static_cast<double>(r + 1) / z);
  }
  return t;
}

inline std::vector<SessionRecord> synthetic_sessions(const SyntheticSpec& spec) {
  if (spec.min_length < 1 || spec.max_length < spec.min_length) throw ConfigError("synthetic corpus: bad length range");
  const auto table = planted_transitions(spec);
  Rng rng(spec.seed ^ 0xA5A5A5A5ULL);
  std::vector<double> start_w(spec.items);
  for (std::size_t i = 0; i < spec.items; ++i) start_w[i] = std::pow(static_cast<double>(i + 1), -spec.start_skew);
  const auto start_cdf = detail::cumulative(start_w);
  std::vector<std::vector<double>> next_cdf;
  for (const auto& p : table.prob) next_cdf.push_back(detail::cumulative(p));

  std::vector<SessionRecord> out;
  out.reserve(spec.sessions);
  std::int64_t clock = 1'600'000'000;
  for (std::size_t s = 0; s < spec.sessions; ++s) {
    SessionRecord rec;
    rec.session_id = "s" + std::to_string(s);
    const std::size_t len = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
    std::size_t item = detail::draw(start_cdf, rng);
    for (std::size_t k = 0; k < len; ++k) {
      rec.items.push_back(spec.first_raw_id + static_cast<RawItemId>(item));
      rec.categories.push_back(synthetic_category(item, spec.categories));
      rec.timestamps.push_back(clock++);
      item = table.next[item][detail::draw(next_cdf[item], rng)];
    }
    out.push_back(std::move(rec));
  }
  return out;
}

/// One JSON object per line in the session log format.
inline void write_sessions_jsonl(std::ostream& out, const std::vector<SessionRecord>& sessions) {
  for (const auto& s : sessions) {
    nlohmann::json j{{"sid", s.session_id}, {"items", s.items}};
    if (!s.categories.empty()) j["cats"] = s.categories;
    if (!s.timestamps.empty()) j["ts"] = s.timestamps;
    out << j.dump() << '\n';
  }
}

}  // namespace grainrec
