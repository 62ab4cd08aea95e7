// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "grainrec/dataio.hpp"
#include "grainrec/error.hpp"
#include "grainrec/numerics/matrix.hpp"

namespace grainrec {

enum class Similarity { cosine, dot };

/// no_items x k table of each item's most similar other items.
struct NearestNeighborMatrix {
  std::size_t no_items = 0;
  std::size_t k = 0;
  std::vector<ItemIndex> ids;         // row-major, no_items * k
  std::vector<double> similarity;     // parallel to ids; empty after loading from disk
  std::size_t zero_norm_items = 0;

  std::span<const ItemIndex> row(ItemIndex item) const {
    return {ids.data() + static_cast<std::size_t>(item) * k, k};
  }

  bool operator==(const NearestNeighborMatrix& o) const { return no_items == o.no_items && k == o.k && ids == o.ids; }
};

/// Exact exhaustive top-k per row. Similarity ties go to the smaller item
/// index. Under cosine, zero-norm rows have no direction: they are left out of
/// other items' rows (unless needed to fill k) and their own row is ranked by
/// dot product.
template <class Real>
NearestNeighborMatrix build_nn_matrix(const Matrix<Real>& embeddings, std::size_t k,
                                      Similarity metric = Similarity::cosine, unsigned threads = 0) {
  const std::size_t m = embeddings.rows(), d = embeddings.cols();
  if (k == 0 || k >= m) {
    throw ConfigError("neighbor count k=" + std::to_string(k) + " must satisfy 0 < k < items=" + std::to_string(m));
  }
  std::vector<double> norms(m);
  NearestNeighborMatrix nn;
  nn.no_items = m;
  nn.k = k;
  nn.ids.resize(m * k);
  nn.similarity.resize(m * k);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(embeddings(i, c)) * static_cast<double>(embeddings(i, c));
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) ++nn.zero_norm_items;
  }

  auto build_rows = [&](std::size_t begin, std::size_t end) {
    std::vector<std::pair<double, ItemIndex>> cand;
    std::vector<ItemIndex> fallback;
    for (std::size_t i = begin; i < end; ++i) {
      cand.clear();
      fallback.clear();
      const bool use_dot = metric == Similarity::dot || norms[i] == 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        if (j == i) continue;
        double dot = 0;
        for (std::size_t c = 0; c < d; ++c)
          dot += static_cast<double>(embeddings(i, c)) * static_cast<double>(embeddings(j, c));
        if (use_dot) {
          cand.emplace_back(dot, static_cast<ItemIndex>(j));
        } else if (norms[j] == 0.0) {
          fallback.push_back(static_cast<ItemIndex>(j));
        } else {
          cand.emplace_back(dot / (norms[i] * norms[j]), static_cast<ItemIndex>(j));
        }
      }
      auto better = [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; };
      const std::size_t take = std::min(k, cand.size());
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(), better);
      for (std::size_t r = 0; r < take; ++r) {
        nn.ids[i * k + r] = cand[r].second;
        nn.similarity[i * k + r] = cand[r].first;
      }
      for (std::size_t r = take; r < k; ++r) {
        nn.ids[i * k + r] = fallback[r - take];
        nn.similarity[i * k + r] = 0.0;
      }
    }
  };

  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, m));
  if (threads <= 1) {
    build_rows(0, m);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (m + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t b = t * chunk, e = std::min(m, b + chunk);
      if (b < e) pool.emplace_back(build_rows, b, e);
    }
    for (auto& th : pool) th.join();
  }
  return nn;
}

struct CandidateSet {
  std::vector<ItemIndex> items;  // ascending
  std::size_t unknown = 0;       // session items outside the matrix
};

/// Union of the session items' neighbor rows minus the session items.
inline CandidateSet candidates(const NearestNeighborMatrix& nn, std::span<const ItemIndex> session_items) {
  CandidateSet out;
  std::unordered_set<ItemIndex> session(session_items.begin(), session_items.end());
  std::unordered_set<ItemIndex> seen;
  for (ItemIndex it : session_items) {
    if (it >= nn.no_items) {
      ++out.unknown;
      continue;
    }
    for (ItemIndex c : nn.row(it))
      if (!session.count(c) && seen.insert(c).second) out.items.push_back(c);
  }
  std::sort(out.items.begin(), out.items.end());
  return out;
}

// nn_matrix.bin: u32 magic, version, no_items, k (little-endian), then the ids.
inline constexpr std::uint32_t kNnMagic = 0x4E4E4752;  // "RGNN" on disk
inline constexpr std::uint32_t kNnVersion = 1;

inline void write_nn_matrix(std::ostream& out, const NearestNeighborMatrix& nn) {
  detail::put_u32(out, kNnMagic);
  detail::put_u32(out, kNnVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(nn.no_items));
  detail::put_u32(out, static_cast<std::uint32_t>(nn.k));
  for (ItemIndex id : nn.ids) detail::put_u32(out, id);
}

inline NearestNeighborMatrix read_nn_matrix(std::istream& in) {
  std::uint32_t magic = 0, version = 0, items = 0, k = 0;
  if (!detail::get_u32(in, magic) || magic != kNnMagic) throw CompatibilityError("nn matrix: bad magic");
  if (!detail::get_u32(in, version) || version != kNnVersion) {
    throw CompatibilityError("nn matrix: unsupported version " + std::to_string(version));
  }
  if (!detail::get_u32(in, items) || !detail::get_u32(in, k)) throw CompatibilityError("nn matrix: truncated header");
  if (k == 0 || k >= items) throw CompatibilityError("nn matrix: invalid k=" + std::to_string(k));
  NearestNeighborMatrix nn;
  nn.no_items = items;
  nn.k = k;
  nn.ids.resize(static_cast<std::size_t>(items) * k);
  for (auto& id : nn.ids) {
    if (!detail::get_u32(in, id)) throw CompatibilityError("nn matrix: truncated payload");
    if (id >= items) throw CompatibilityError("nn matrix: neighbor id " + std::to_string(id) + " out of range");
  }
  return nn;
}

inline void write_nn_matrix(const std::filesystem::path& path, const NearestNeighborMatrix& nn) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_nn_matrix(out, nn);
}

inline NearestNeighborMatrix read_nn_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return read_nn_matrix(in);
}

}  // namespace grainrec
