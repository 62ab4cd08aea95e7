// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grainrec/numerics/matrix.hpp"
#include "grainrec/numerics/tape.hpp"

// Differentiable operations recorded on a Tape. Each op computes its forward
// value eagerly and registers an analytic backward closure.
namespace grainrec::ops {

namespace detail {

template <class Real>
void require_rows(const Matrix<Real>& a, std::size_t rows, const char* what) {
  if (a.rows() != rows) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(rows) + " rows, got " +
                         a.shape());
  }
}

template <class Real>
void add_colsum(const Matrix<Real>& g, Matrix<Real>& out) {
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const Real* gr = g.data() + r * g.cols();
    for (std::size_t c = 0; c < g.cols(); ++c) out[c] += gr[c];
  }
}

template <class Real>
void check_index(std::size_t idx, std::size_t bound, const char* what) {
  if (idx >= bound) {
    throw IndexError(std::string(what) + ": index " + std::to_string(idx) + " out of range [0, " +
                     std::to_string(bound) + ")");
  }
}

}  // namespace detail

template <class Real>
Var matmul(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.cols() != bv.rows()) throw DimensionError("matmul: " + av.shape() + " * " + bv.shape());
  Matrix<Real> y(av.rows(), bv.cols());
  kernel::gemm_nn_acc(av, bv, y);
  return t.emplace(std::move(y), t.needs_grad(a) || t.needs_grad(b), [a, b](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(a)) kernel::gemm_nt_acc(g, t.value(b), t.grad(a));
    if (t.needs_grad(b)) kernel::gemm_tn_acc(t.value(a), g, t.grad(b));
  });
}

/// Y = A * B^T.
template <class Real>
Var matmul_nt(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: " + av.shape() + " * " + bv.shape() + "^T");
  }
  Matrix<Real> y(av.rows(), bv.rows());
  kernel::gemm_nt_acc(av, bv, y);
  return t.emplace(std::move(y), t.needs_grad(a) || t.needs_grad(b), [a, b](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(a)) kernel::gemm_nn_acc(g, t.value(b), t.grad(a));
    if (t.needs_grad(b)) kernel::gemm_tn_acc(g, t.value(a), t.grad(b));
  });
}

/// Y = X W (+ b broadcast over rows).
template <class Real>
Var affine(Tape<Real>& t, Var x, Var w, std::optional<Var> b = std::nullopt) {
  const auto& xv = t.value(x);
  const auto& wv = t.value(w);
  if (xv.cols() != wv.rows()) throw DimensionError("affine: X" + xv.shape() + " W" + wv.shape());
  if (b && (t.value(*b).rows() != 1 || t.value(*b).cols() != wv.cols())) {
    throw DimensionError("affine: bias " + t.value(*b).shape() + " incompatible with W" + wv.shape());
  }
  Matrix<Real> y(xv.rows(), wv.cols());
  if (b) {
    const auto& bv = t.value(*b);
    for (std::size_t r = 0; r < y.rows(); ++r)
      for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) = bv[c];
  }
  kernel::gemm_nn_acc(xv, wv, y);
  const bool ng = t.needs_grad(x) || t.needs_grad(w) || (b && t.needs_grad(*b));
  return t.emplace(std::move(y), ng, [x, w, b](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(x)) kernel::gemm_nt_acc(g, t.value(w), t.grad(x));
    if (t.needs_grad(w)) kernel::gemm_tn_acc(t.value(x), g, t.grad(w));
    if (b && t.needs_grad(*b)) detail::add_colsum(g, t.grad(*b));
  });
}

template <class Real>
Var add(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  Matrix<Real>::require_same_shape(av, bv, "add");
  Matrix<Real> y = av;
  y += bv;
  return t.emplace(std::move(y), t.needs_grad(a) || t.needs_grad(b), [a, b](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(b)) t.grad(b) += g;
  });
}

/// Adds a 1 x n row to every row of an m x n matrix.
template <class Real>
Var add_row(Tape<Real>& t, Var a, Var row) {
  const auto& av = t.value(a);
  const auto& rv = t.value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("add_row: " + av.shape() + " + " + rv.shape());
  }
  Matrix<Real> y = av;
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += rv[c];
  return t.emplace(std::move(y), t.needs_grad(a) || t.needs_grad(row),
                   [a, row](Tape<Real>& t, Var self) {
                     const auto& g = t.grad(self);
                     if (t.needs_grad(a)) t.grad(a) += g;
                     if (t.needs_grad(row)) detail::add_colsum(g, t.grad(row));
                   });
}

/// Elementwise product.
template <class Real>
Var hadamard(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  Matrix<Real>::require_same_shape(av, bv, "hadamard");
  Matrix<Real> y(av.rows(), av.cols());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return t.emplace(std::move(y), t.needs_grad(a) || t.needs_grad(b), [a, b](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(a)) {
      auto& ga = t.grad(a);
      const auto& bv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad(b);
      const auto& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// Multiplies row r of `a` by weights(r, 0).
template <class Real>
Var scale_rows(Tape<Real>& t, Var a, Var weights) {
  const auto& av = t.value(a);
  const auto& wv = t.value(weights);
  if (wv.rows() != av.rows() || wv.cols() != 1) {
    throw DimensionError("scale_rows: " + av.shape() + " by " + wv.shape());
  }
  Matrix<Real> y = av;
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) *= wv[r];
  return t.emplace(std::move(y), t.needs_grad(a) || t.needs_grad(weights),
                   [a, weights](Tape<Real>& t, Var self) {
                     const auto& g = t.grad(self);
                     const auto& av = t.value(a);
                     const auto& wv = t.value(weights);
                     if (t.needs_grad(a)) {
                       auto& ga = t.grad(a);
                       for (std::size_t r = 0; r < g.rows(); ++r)
                         for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r, c) * wv[r];
                     }
                     if (t.needs_grad(weights)) {
                       auto& gw = t.grad(weights);
                       for (std::size_t r = 0; r < g.rows(); ++r) {
                         Real s = 0;
                         for (std::size_t c = 0; c < g.cols(); ++c) s += g(r, c) * av(r, c);
                         gw[r] += s;
                       }
                     }
                   });
}

template <class Real>
Var sigmoid(Tape<Real>& t, Var a) {
  const auto& av = t.value(a);
  Matrix<Real> y(av.rows(), av.cols());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = kernel::sigmoid(av[i]);
  return t.emplace(std::move(y), t.needs_grad(a), [a](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (Real(1) - y[i]);
  });
}

template <class Real>
Var tanh(Tape<Real>& t, Var a) {
  const auto& av = t.value(a);
  Matrix<Real> y(av.rows(), av.cols());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(av[i]);
  return t.emplace(std::move(y), t.needs_grad(a), [a](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (Real(1) - y[i] * y[i]);
  });
}

/// Y row i = A row index[i].
template <class Real>
Var gather_rows(Tape<Real>& t, Var a, std::vector<std::size_t> index) {
  const auto& av = t.value(a);
  Matrix<Real> y(index.size(), av.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::check_index<Real>(index[i], av.rows(), "gather_rows");
    const auto src = av.row(index[i]);
    std::copy(src.begin(), src.end(), y.row(i).begin());
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return t.emplace(std::move(y), t.needs_grad(a), [a, idx](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      auto dst = ga.row((*idx)[i]);
      auto src = g.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

/// Y (out_rows x cols) with Y row index[i] += A row i; untouched rows are zero.
template <class Real>
Var scatter_add_rows(Tape<Real>& t, Var a, std::vector<std::size_t> index, std::size_t out_rows) {
  const auto& av = t.value(a);
  detail::require_rows(av, index.size(), "scatter_add_rows");
  Matrix<Real> y(out_rows, av.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::check_index<Real>(index[i], out_rows, "scatter_add_rows");
    auto dst = y.row(index[i]);
    auto src = av.row(i);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return t.emplace(std::move(y), t.needs_grad(a), [a, idx](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      auto src = g.row((*idx)[i]);
      auto dst = ga.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

/// Rows [begin, end).
template <class Real>
Var slice_rows(Tape<Real>& t, Var a, std::size_t begin, std::size_t end) {
  const auto& av = t.value(a);
  if (begin > end || end > av.rows()) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") of " + av.shape());
  }
  Matrix<Real> y(end - begin, av.cols());
  std::copy(av.data() + begin * av.cols(), av.data() + end * av.cols(), y.data());
  return t.emplace(std::move(y), t.needs_grad(a), [a, begin](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    Real* dst = ga.data() + begin * ga.cols();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

/// [A | B] column-wise.
template <class Real>
Var concat_cols(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.rows() != bv.rows()) throw DimensionError("concat_cols: " + av.shape() + " | " + bv.shape());
  const std::size_t ca = av.cols(), cb = bv.cols();
  Matrix<Real> y(av.rows(), ca + cb);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    std::copy(av.row(r).begin(), av.row(r).end(), y.row(r).begin());
    std::copy(bv.row(r).begin(), bv.row(r).end(), y.row(r).begin() + ca);
  }
  return t.emplace(std::move(y), t.needs_grad(a) || t.needs_grad(b),
                   [a, b, ca, cb](Tape<Real>& t, Var self) {
                     const auto& g = t.grad(self);
                     if (t.needs_grad(a)) {
                       auto& ga = t.grad(a);
                       for (std::size_t r = 0; r < g.rows(); ++r)
                         for (std::size_t c = 0; c < ca; ++c) ga(r, c) += g(r, c);
                     }
                     if (t.needs_grad(b)) {
                       auto& gb = t.grad(b);
                       for (std::size_t r = 0; r < g.rows(); ++r)
                         for (std::size_t c = 0; c < cb; ++c) gb(r, c) += g(r, ca + c);
                     }
                   });
}

/// Sum of all entries, as 1 x 1.
template <class Real>
Var sum(Tape<Real>& t, Var a) {
  const auto& av = t.value(a);
  Real s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
  return t.emplace(Matrix<Real>(1, 1, s), t.needs_grad(a), [a](Tape<Real>& t, Var self) {
    const Real g = t.grad(self)[0];
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

// ---------------------------------------------------------------------------
// Segmented softmax

/// Softmax over rows sharing a segment id, independently per column.
/// Max-subtracted per segment. Every segment in [0, segment_count) must be
/// non-empty.
template <class Real>
Matrix<Real> row_softmax(const Matrix<Real>& scores, std::span<const std::size_t> segment_ids,
                         std::size_t segment_count) {
  if (segment_ids.size() != scores.rows()) {
    throw DimensionError("row_softmax: " + std::to_string(segment_ids.size()) +
                         " segment ids for " + scores.shape());
  }
  const std::size_t cols = scores.cols();
  std::vector<std::size_t> members(segment_count, 0);
  for (std::size_t s : segment_ids) {
    if (s >= segment_count) {
      throw GroupingError("row_softmax: segment id " + std::to_string(s) + " >= segment count " +
                          std::to_string(segment_count));
    }
    ++members[s];
  }
  for (std::size_t s = 0; s < segment_count; ++s) {
    if (members[s] == 0) throw GroupingError("row_softmax: segment " + std::to_string(s) + " is empty");
  }
  Matrix<Real> mx(segment_count, cols, -std::numeric_limits<Real>::infinity());
  for (std::size_t r = 0; r < scores.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) mx(segment_ids[r], c) = std::max(mx(segment_ids[r], c), scores(r, c));
  Matrix<Real> y(scores.rows(), cols);
  Matrix<Real> denom(segment_count, cols);
  for (std::size_t r = 0; r < scores.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      y(r, c) = std::exp(scores(r, c) - mx(segment_ids[r], c));
      denom(segment_ids[r], c) += y(r, c);
    }
  for (std::size_t r = 0; r < scores.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) y(r, c) /= denom(segment_ids[r], c);
  return y;
}

template <class Real>
Var segment_softmax(Tape<Real>& t, Var scores, std::vector<std::size_t> segment_ids,
                    std::size_t segment_count) {
  Matrix<Real> y = row_softmax(t.value(scores), std::span<const std::size_t>(segment_ids), segment_count);
  auto seg = std::make_shared<std::vector<std::size_t>>(std::move(segment_ids));
  return t.emplace(std::move(y), t.needs_grad(scores),
                   [scores, seg, segment_count](Tape<Real>& t, Var self) {
                     const auto& g = t.grad(self);
                     const auto& y = t.value(self);
                     const std::size_t cols = y.cols();
                     Matrix<Real> inner(segment_count, cols);
                     for (std::size_t r = 0; r < y.rows(); ++r)
                       for (std::size_t c = 0; c < cols; ++c) inner((*seg)[r], c) += y(r, c) * g(r, c);
                     auto& gs = t.grad(scores);
                     for (std::size_t r = 0; r < y.rows(); ++r)
                       for (std::size_t c = 0; c < cols; ++c)
                         gs(r, c) += y(r, c) * (g(r, c) - inner((*seg)[r], c));
                   });
}

// ---------------------------------------------------------------------------
// Loss

/// Mean over rows of -log softmax(logits)[target]. Returns a 1 x 1 loss.
template <class Real>
Var softmax_cross_entropy(Tape<Real>& t, Var logits, std::vector<std::size_t> targets) {
  const auto& lv = t.value(logits);
  detail::require_rows(lv, targets.size(), "softmax_cross_entropy");
  if (lv.rows() == 0) throw DimensionError("softmax_cross_entropy: empty batch");
  auto probs = std::make_shared<Matrix<Real>>(lv.rows(), lv.cols());
  Real loss = 0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    detail::check_index<Real>(targets[r], lv.cols(), "softmax_cross_entropy target");
    const auto row = lv.row(r);
    const Real mx = *std::max_element(row.begin(), row.end());
    Real z = 0;
    for (std::size_t c = 0; c < row.size(); ++c) z += std::exp(row[c] - mx);
    const Real logz = std::log(z);
    for (std::size_t c = 0; c < row.size(); ++c) (*probs)(r, c) = std::exp(row[c] - mx - logz);
    loss += -(row[targets[r]] - mx - logz);
  }
  loss /= static_cast<Real>(lv.rows());
  auto tg = std::make_shared<std::vector<std::size_t>>(std::move(targets));
  return t.emplace(Matrix<Real>(1, 1, loss), t.needs_grad(logits),
                   [logits, probs, tg](Tape<Real>& t, Var self) {
                     const Real g = t.grad(self)[0] / static_cast<Real>(probs->rows());
                     auto& gl = t.grad(logits);
                     for (std::size_t r = 0; r < probs->rows(); ++r) {
                       for (std::size_t c = 0; c < probs->cols(); ++c) gl(r, c) += g * (*probs)(r, c);
                       gl(r, (*tg)[r]) -= g;
                     }
                   });
}

// ---------------------------------------------------------------------------
// Gated recurrent unit

/// Handles to the GRU weights. Gate blocks are laid out [reset | update | candidate]
/// along the 3*hidden columns.
struct GruWeights {
  Var w_input;   // input_dim x 3h
  Var w_hidden;  // h x 3h
  Var b_input;   // 1 x 3h
  Var b_hidden;  // 1 x 3h
};

/// One GRU step for every row:
///   r = sigmoid(x Wr + br + h Ur + cr)
///   z = sigmoid(x Wz + bz + h Uz + cz)
///   n = tanh(x Wn + bn + r * (h Un + cn))
///   h' = (1 - z) * n + z * h
template <class Real>
Var gru_cell(Tape<Real>& t, Var h, Var x, const GruWeights& w) {
  const auto& hv = t.value(h);
  const auto& xv = t.value(x);
  const auto& wx = t.value(w.w_input);
  const auto& wh = t.value(w.w_hidden);
  const auto& bx = t.value(w.b_input);
  const auto& bh = t.value(w.b_hidden);
  const std::size_t n = hv.rows(), hd = hv.cols();
  if (xv.rows() != n) throw DimensionError("gru_cell: h" + hv.shape() + " x" + xv.shape());
  if (wx.rows() != xv.cols() || wx.cols() != 3 * hd || wh.rows() != hd || wh.cols() != 3 * hd ||
      bx.rows() != 1 || bx.cols() != 3 * hd || bh.rows() != 1 || bh.cols() != 3 * hd) {
    throw DimensionError("gru_cell: weights W_x" + wx.shape() + " W_h" + wh.shape() + " b_x" +
                         bx.shape() + " b_h" + bh.shape() + " for h" + hv.shape() + " x" + xv.shape());
  }
  struct Cache {
    Matrix<Real> r, z, cand, hn;  // hn = h Un + cn, needed for dr
  };
  auto cache = std::make_shared<Cache>();
  Matrix<Real> gx(n, 3 * hd), gh(n, 3 * hd);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3 * hd; ++c) {
      gx(i, c) = bx[c];
      gh(i, c) = bh[c];
    }
  kernel::gemm_nn_acc(xv, wx, gx);
  kernel::gemm_nn_acc(hv, wh, gh);
  cache->r = Matrix<Real>(n, hd);
  cache->z = Matrix<Real>(n, hd);
  cache->cand = Matrix<Real>(n, hd);
  cache->hn = Matrix<Real>(n, hd);
  Matrix<Real> y(n, hd);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < hd; ++c) {
      const Real r = kernel::sigmoid(gx(i, c) + gh(i, c));
      const Real z = kernel::sigmoid(gx(i, hd + c) + gh(i, hd + c));
      const Real hn = gh(i, 2 * hd + c);
      const Real cand = std::tanh(gx(i, 2 * hd + c) + r * hn);
      cache->r(i, c) = r;
      cache->z(i, c) = z;
      cache->hn(i, c) = hn;
      cache->cand(i, c) = cand;
      y(i, c) = (Real(1) - z) * cand + z * hv(i, c);
    }
  const bool ng = t.needs_grad(h) || t.needs_grad(x) || t.needs_grad(w.w_input) ||
                  t.needs_grad(w.w_hidden) || t.needs_grad(w.b_input) || t.needs_grad(w.b_hidden);
  return t.emplace(std::move(y), ng, [h, x, w, cache, n, hd](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    const auto& hv = t.value(h);
    Matrix<Real> dgx(n, 3 * hd), dgh(n, 3 * hd);
    Matrix<Real> dh_direct(n, hd);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < hd; ++c) {
        const Real r = cache->r(i, c), z = cache->z(i, c), cand = cache->cand(i, c);
        const Real gi = g(i, c);
        const Real dz = gi * (hv(i, c) - cand);
        const Real dcand = gi * (Real(1) - z);
        dh_direct(i, c) = gi * z;
        const Real dpre_n = dcand * (Real(1) - cand * cand);
        const Real dr = dpre_n * cache->hn(i, c);
        const Real dpre_r = dr * r * (Real(1) - r);
        const Real dpre_z = dz * z * (Real(1) - z);
        dgx(i, c) = dpre_r;
        dgx(i, hd + c) = dpre_z;
        dgx(i, 2 * hd + c) = dpre_n;
        dgh(i, c) = dpre_r;
        dgh(i, hd + c) = dpre_z;
        dgh(i, 2 * hd + c) = dpre_n * r;
      }
    if (t.needs_grad(x)) kernel::gemm_nt_acc(dgx, t.value(w.w_input), t.grad(x));
    if (t.needs_grad(w.w_input)) kernel::gemm_tn_acc(t.value(x), dgx, t.grad(w.w_input));
    if (t.needs_grad(w.b_input)) detail::add_colsum(dgx, t.grad(w.b_input));
    if (t.needs_grad(h)) {
      auto& gh = t.grad(h);
      gh += dh_direct;
      kernel::gemm_nt_acc(dgh, t.value(w.w_hidden), gh);
    }
    if (t.needs_grad(w.w_hidden)) kernel::gemm_tn_acc(hv, dgh, t.grad(w.w_hidden));
    if (t.needs_grad(w.b_hidden)) detail::add_colsum(dgh, t.grad(w.b_hidden));
  });
}

/// Folds gru_cell over a message sequence starting from `h`; an empty
/// sequence returns `h` unchanged.
template <class Real>
Var gru_fold(Tape<Real>& t, Var h, std::span<const Var> messages, const GruWeights& w) {
  Var state = h;
  for (Var m : messages) state = gru_cell(t, state, m, w);
  return state;
}

// ---------------------------------------------------------------------------
// Batch normalisation and dropout

/// Handles for one batch-norm block. Eval mode only reads the running
/// statistics; train mode folds batch statistics into `mean_update` and
/// `var_update`, which must then be set (normally to the same matrices).
template <class Real>
struct BatchNormState {
  Var gamma;  // 1 x d
  Var beta;   // 1 x d
  const Matrix<Real>* running_mean = nullptr;
  const Matrix<Real>* running_var = nullptr;
  Matrix<Real>* mean_update = nullptr;
  Matrix<Real>* var_update = nullptr;
  Real momentum = Real(0.1);
  Real eps = Real(1e-5);
};

/// Per-column batch normalisation. Train mode normalises with batch
/// statistics (biased variance) and folds them into the running estimates;
/// eval mode uses the running estimates.
template <class Real>
Var batchnorm(Tape<Real>& t, Var x, const BatchNormState<Real>& bn, Mode mode) {
  const auto& xv = t.value(x);
  const auto& gamma = t.value(bn.gamma);
  const auto& beta = t.value(bn.beta);
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gamma.cols() != d || beta.cols() != d || gamma.rows() != 1 || beta.rows() != 1 ||
      bn.running_mean->cols() != d || bn.running_var->cols() != d) {
    throw DimensionError("batchnorm: input " + xv.shape() + " gamma " + gamma.shape() + " beta " +
                         beta.shape());
  }
  if (mode == Mode::train && (!bn.mean_update || !bn.var_update)) {
    throw StateError("batchnorm: train mode needs writable running statistics");
  }
  auto xhat = std::make_shared<Matrix<Real>>(n, d);
  auto inv_std = std::make_shared<std::vector<Real>>(d);
  if (mode == Mode::train) {
    if (n == 0) throw DimensionError("batchnorm: empty batch in train mode");
    for (std::size_t c = 0; c < d; ++c) {
      Real mean = 0;
      for (std::size_t r = 0; r < n; ++r) mean += xv(r, c);
      mean /= static_cast<Real>(n);
      Real var = 0;
      for (std::size_t r = 0; r < n; ++r) var += (xv(r, c) - mean) * (xv(r, c) - mean);
      const Real biased = var / static_cast<Real>(n);
      const Real unbiased = n > 1 ? var / static_cast<Real>(n - 1) : biased;
      (*inv_std)[c] = Real(1) / std::sqrt(biased + bn.eps);
      for (std::size_t r = 0; r < n; ++r) (*xhat)(r, c) = (xv(r, c) - mean) * (*inv_std)[c];
      (*bn.mean_update)[c] = (Real(1) - bn.momentum) * (*bn.running_mean)[c] + bn.momentum * mean;
      (*bn.var_update)[c] = (Real(1) - bn.momentum) * (*bn.running_var)[c] + bn.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < d; ++c) {
      (*inv_std)[c] = Real(1) / std::sqrt((*bn.running_var)[c] + bn.eps);
      for (std::size_t r = 0; r < n; ++r)
        (*xhat)(r, c) = (xv(r, c) - (*bn.running_mean)[c]) * (*inv_std)[c];
    }
  }
  Matrix<Real> y(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) y(r, c) = gamma[c] * (*xhat)(r, c) + beta[c];
  const bool ng = t.needs_grad(x) || t.needs_grad(bn.gamma) || t.needs_grad(bn.beta);
  const Var gamma_v = bn.gamma, beta_v = bn.beta;
  return t.emplace(std::move(y), ng, [x, gamma_v, beta_v, xhat, inv_std, mode](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    const auto& gamma = t.value(gamma_v);
    const std::size_t n = g.rows(), d = g.cols();
    if (t.needs_grad(gamma_v)) {
      auto& gg = t.grad(gamma_v);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gg[c] += g(r, c) * (*xhat)(r, c);
    }
    if (t.needs_grad(beta_v)) detail::add_colsum(g, t.grad(beta_v));
    if (!t.needs_grad(x)) return;
    auto& gx = t.grad(x);
    if (mode == Mode::eval) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gx(r, c) += g(r, c) * gamma[c] * (*inv_std)[c];
      return;
    }
    const Real nn = static_cast<Real>(n);
    for (std::size_t c = 0; c < d; ++c) {
      Real sum_dxhat = 0, sum_dxhat_xhat = 0;
      for (std::size_t r = 0; r < n; ++r) {
        const Real dxhat = g(r, c) * gamma[c];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * (*xhat)(r, c);
      }
      for (std::size_t r = 0; r < n; ++r) {
        const Real dxhat = g(r, c) * gamma[c];
        gx(r, c) += (*inv_std)[c] / nn * (nn * dxhat - sum_dxhat - (*xhat)(r, c) * sum_dxhat_xhat);
      }
    }
  });
}

inline void check_drop_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("drop rate must satisfy 0 <= rate < 1, got " + std::to_string(rate));
  }
}

/// Inverted dropout: survivors are scaled by 1 / (1 - rate). Identity in eval
/// mode or at rate 0. The mask is drawn from `rng`, row-major.
template <class Real>
Var dropout(Tape<Real>& t, Var x, double rate, Mode mode, Rng& rng) {
  check_drop_rate(rate);
  if (mode == Mode::eval || rate == 0.0) return x;
  const auto& xv = t.value(x);
  auto mask = std::make_shared<Matrix<Real>>(xv.rows(), xv.cols());
  const Real keep_scale = static_cast<Real>(1.0 / (1.0 - rate));
  Matrix<Real> y(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = rng.uniform() >= rate ? keep_scale : Real(0);
    y[i] = xv[i] * (*mask)[i];
  }
  return t.emplace(std::move(y), t.needs_grad(x), [x, mask](Tape<Real>& t, Var self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

/// Batch normalisation followed by dropout, as applied ahead of attention.
template <class Real>
Var batchnorm_dropout(Tape<Real>& t, Var x, const BatchNormState<Real>& bn, Mode mode, double rate,
                      Rng& rng) {
  check_drop_rate(rate);
  return dropout(t, batchnorm(t, x, bn, mode), rate, mode, rng);
}

}  // namespace grainrec::ops
