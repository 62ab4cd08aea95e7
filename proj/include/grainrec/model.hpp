// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "grainrec/dataio.hpp"
#include "grainrec/error.hpp"
#include "grainrec/numerics/matrix.hpp"
#include "grainrec/numerics/ops.hpp"
#include "grainrec/numerics/param_store.hpp"
#include "grainrec/numerics/tape.hpp"
#include "grainrec/sessiongraph.hpp"

namespace grainrec {

struct ModelConfig {
  std::size_t embedding_dim = 32;
  std::string layer_pattern = "GA";
  double dropout = 0.146;
  std::size_t catalog_size = 0;
  GraphMode graph_mode = GraphMode::disjoint;
  /// Global readout as Σ α_i x_last instead of Σ α_i x_i.
  bool readout_last_item_sum = false;

  void validate() const {
    if (layer_pattern.empty()) throw ConfigError("layer_pattern must be non-empty");
    for (char c : layer_pattern) {
      if (c != 'G' && c != 'A') {
        throw ConfigError(std::string("layer_pattern character '") + c + "' is not G or A");
      }
    }
    if (embedding_dim < 2) throw ConfigError("embedding_dim must be at least 2");
    if (catalog_size == 0) throw ConfigError("catalog_size must be positive");
    ops::check_drop_rate(dropout);
  }
};

/// Per-session readout values.
template <class Real>
struct SessionEmbedding {
  Matrix<Real> s_local;   // 1 x d
  Matrix<Real> s_global;  // 1 x d
  Matrix<Real> s;         // 1 x d
};

/// Optional capture of attention coefficients, one entry per shortcut edge of
/// each attention layer, for inspection and tests.
template <class Real>
struct AttentionTrace {
  struct Layer {
    std::vector<NodeId> dst;
    std::vector<NodeId> src;
    std::vector<Real> alpha;
  };
  std::vector<Layer> layers;
};

/// The session recommender: item embeddings, a stack of GRU message-passing
/// (G) and edge-attention (A) layers, an attentive readout and dot-product
/// scoring over item embeddings.
///
/// Weights act on row vectors (x W). The readout projection keeps its
/// d x 2d shape and is applied as [s_local | s_global] W_3^T.
template <class Real>
class Model {
 public:
  Model() = default;

  Model(ModelConfig config, Rng& rng) : config_(std::move(config)) {
    config_.validate();
    init_params(rng);
  }

  /// Adopts existing parameters, e.g. from a checkpoint; names and shapes must
  /// match what `config` implies.
  Model(ModelConfig config, ParamStore<Real> params) : config_(std::move(config)) {
    config_.validate();
    Rng rng(0);
    init_params(rng);
    for (auto& e : params_.entries()) {
      if (!params.contains(e.name)) throw CompatibilityError("missing parameter '" + e.name + "'");
      const auto& src = params.at(e.name).value;
      if (!src.same_shape(e.value)) {
        throw CompatibilityError("parameter '" + e.name + "' has shape " + src.shape() + ", expected " +
                                 e.value.shape());
      }
      e.value = src;
    }
    if (params.size() != params_.size()) throw CompatibilityError("unexpected extra parameters");
  }

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore<Real>& params() noexcept { return params_; }
  const ParamStore<Real>& params() const noexcept { return params_; }
  std::size_t dim() const noexcept { return config_.embedding_dim; }
  std::size_t catalog_size() const noexcept { return config_.catalog_size; }
  const Matrix<Real>& item_embeddings() const { return params_.value("item_embedding"); }

  static std::string layer_prefix(std::size_t l, char kind) {
    return "layer" + std::to_string(l) + (kind == 'G' ? ".gnn." : ".attn.");
  }

  // -------------------------------------------------------------------------
  // Forward pieces. Non-const overloads record gradients (when the tape
  // records) and may update batch-norm statistics in train mode; const
  // overloads are eval-only and never write to the model.

  Var embed_nodes(Tape<Real>& t, const BatchedSessionGraph& g) { return embed_nodes_impl(*this, t, g); }
  Var embed_nodes(Tape<Real>& t, const BatchedSessionGraph& g) const { return embed_nodes_impl(*this, t, g); }

  Var gnn_layer(Tape<Real>& t, const BatchedSessionGraph& g, Var h, std::size_t layer) {
    return gnn_layer_impl(*this, t, g, h, layer);
  }
  Var gnn_layer(Tape<Real>& t, const BatchedSessionGraph& g, Var h, std::size_t layer) const {
    return gnn_layer_impl(*this, t, g, h, layer);
  }

  Var attention_layer(Tape<Real>& t, const BatchedSessionGraph& g, Var h, std::size_t layer, Mode mode,
                      Rng& rng, AttentionTrace<Real>* trace = nullptr) {
    return attention_layer_impl(*this, t, g, h, layer, mode, rng, trace);
  }
  Var attention_layer(Tape<Real>& t, const BatchedSessionGraph& g, Var h, std::size_t layer, Mode mode,
                      Rng& rng, AttentionTrace<Real>* trace = nullptr) const {
    return attention_layer_impl(*this, t, g, h, layer, mode, rng, trace);
  }

  /// Embedding lookup followed by every layer of the pattern, left to right.
  Var run_stack(Tape<Real>& t, const BatchedSessionGraph& g, Mode mode, Rng& rng,
                AttentionTrace<Real>* trace = nullptr) {
    return run_stack_impl(*this, t, g, mode, rng, trace);
  }
  Var run_stack(Tape<Real>& t, const BatchedSessionGraph& g, Mode mode, Rng& rng,
                AttentionTrace<Real>* trace = nullptr) const {
    return run_stack_impl(*this, t, g, mode, rng, trace);
  }

  /// Session embeddings s for every session of the batch, B x d.
  Var readout(Tape<Real>& t, const BatchedSessionGraph& g, Var h) { return readout_impl(*this, t, g, h, nullptr); }
  Var readout(Tape<Real>& t, const BatchedSessionGraph& g, Var h) const {
    return readout_impl(*this, t, g, h, nullptr);
  }

  /// Readout parts for one session.
  SessionEmbedding<Real> readout_session(Tape<Real>& t, const BatchedSessionGraph& g, Var h,
                                         SessionId session) const {
    if (session >= g.session_count()) {
      throw KeyError("readout: unknown session id " + std::to_string(session));
    }
    Parts parts;
    readout_impl(*this, t, g, h, &parts);
    SessionEmbedding<Real> out;
    out.s_local = row_of(t.value(parts.s_local), session);
    out.s_global = row_of(t.value(parts.s_global), session);
    out.s = row_of(t.value(parts.s), session);
    return out;
  }

  /// Logits over the whole catalog: s E^T, B x m.
  Var logits(Tape<Real>& t, Var s) { return ops::matmul_nt(t, s, bind(*this, t, "item_embedding")); }

  /// Mean cross-entropy of a batch against its targets; records everything
  /// needed for backward() on the returned 1 x 1 variable.
  Var batch_loss(Tape<Real>& t, std::span<const TrainingSequence> batch, Mode mode, Rng& rng) {
    const auto g = build_graph(batch, config_.graph_mode);
    std::vector<std::size_t> targets;
    targets.reserve(batch.size());
    for (const auto& ts : batch) targets.push_back(ts.target);
    Var h = run_stack(t, g, mode, rng);
    Var s = readout(t, g, h);
    return ops::softmax_cross_entropy(t, logits(t, s), std::move(targets));
  }

  /// Eval-mode session embeddings for a batch of input sequences, B x d.
  Matrix<Real> embed_sessions(std::span<const std::vector<ItemIndex>> sessions) const {
    Tape<Real> t(false);
    Rng rng(0);
    const auto g = build_graph(sessions, config_.graph_mode);
    Var h = run_stack(t, g, Mode::eval, rng);
    return t.value(readout(t, g, h));
  }

  Matrix<Real> embed_session(const std::vector<ItemIndex>& session) const {
    return embed_sessions(std::span<const std::vector<ItemIndex>>(&session, 1));
  }

  /// score_i = s . v_i for each candidate item.
  std::vector<Real> score(std::span<const Real> s, std::span<const ItemIndex> candidates) const {
    const auto& emb = item_embeddings();
    if (s.size() != dim()) throw DimensionError("score: session embedding has " + std::to_string(s.size()) + " values");
    std::vector<Real> out(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      if (candidates[i] >= emb.rows()) {
        throw IndexError("score: item " + std::to_string(candidates[i]) + " outside catalog of " +
                         std::to_string(emb.rows()));
      }
      out[i] = kernel::dot<Real>(s, emb.row(candidates[i]));
    }
    return out;
  }

  std::vector<Real> score_all(std::span<const Real> s) const {
    std::vector<ItemIndex> all(catalog_size());
    std::iota(all.begin(), all.end(), ItemIndex{0});
    return score(s, all);
  }

 private:
  struct Parts {
    Var s_local, s_global, s;
  };

  static Matrix<Real> row_of(const Matrix<Real>& m, std::size_t r) {
    Matrix<Real> out(1, m.cols());
    std::copy(m.row(r).begin(), m.row(r).end(), out.data());
    return out;
  }

  template <class Self>
  static Var bind(Self& self, Tape<Real>& t, const std::string& name) {
    if constexpr (std::is_const_v<Self>) {
      if (t.recording()) throw StateError("gradient recording requires a mutable model");
      return t.borrow(self.params_.value(name));
    } else {
      return t.param(self.params_.at(name));
    }
  }

  template <class Self>
  static Var embed_nodes_impl(Self& self, Tape<Real>& t, const BatchedSessionGraph& g) {
    std::vector<std::size_t> idx(g.node_item.begin(), g.node_item.end());
    for (auto i : idx)
      if (i >= self.config_.catalog_size) {
        throw IndexError("item index " + std::to_string(i) + " outside catalog of " +
                         std::to_string(self.config_.catalog_size));
      }
    return ops::gather_rows(t, bind(self, t, "item_embedding"), std::move(idx));
  }

  /// Messages from in-neighbours are folded through the GRU in edge order,
  /// starting from a zero state; h' = h W_self + agg W_neigh. All nodes are
  /// advanced together: at step k the nodes with in-degree > k form a prefix
  /// of the degree-sorted order.
  template <class Self>
  static Var gnn_layer_impl(Self& self, Tape<Real>& t, const BatchedSessionGraph& g, Var h, std::size_t layer) {
    const std::size_t d = self.dim();
    const auto& hv = t.value(h);
    if (hv.rows() != g.node_count || hv.cols() != d) {
      throw DimensionError("gnn_layer: features " + hv.shape() + " for " + std::to_string(g.node_count) +
                           " nodes of dim " + std::to_string(d));
    }
    const std::string p = layer_prefix(layer, 'G');
    const ops::GruWeights gru{bind(self, t, p + "gru.w_input"), bind(self, t, p + "gru.w_hidden"),
                              bind(self, t, p + "gru.b_input"), bind(self, t, p + "gru.b_hidden")};
    const auto incoming = incoming_in_order(g);
    std::vector<NodeId> order(g.node_count);
    std::iota(order.begin(), order.end(), NodeId{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](NodeId a, NodeId b) { return incoming[a].size() > incoming[b].size(); });
    const std::size_t max_deg = g.node_count ? incoming[order.front()].size() : 0;

    Var agg;
    if (max_deg == 0) {
      agg = t.constant(Matrix<Real>(g.node_count, d));
    } else {
      auto active = [&](std::size_t step) {
        std::size_t n = 0;
        while (n < order.size() && incoming[order[n]].size() > step) ++n;
        return n;
      };
      std::size_t n_active = active(0);
      Var state = t.constant(Matrix<Real>(n_active, d));
      bool have_agg = false;
      for (std::size_t step = 0; step < max_deg; ++step) {
        if (state.valid() && t.value(state).rows() != n_active) state = ops::slice_rows(t, state, 0, n_active);
        std::vector<std::size_t> src(n_active);
        for (std::size_t i = 0; i < n_active; ++i) src[i] = incoming[order[i]][step].src;
        state = ops::gru_cell(t, state, ops::gather_rows(t, h, std::move(src)), gru);
        const std::size_t next_active = active(step + 1);
        if (next_active < n_active) {
          std::vector<std::size_t> done(order.begin() + static_cast<std::ptrdiff_t>(next_active),
                                        order.begin() + static_cast<std::ptrdiff_t>(n_active));
          Var finished = next_active == 0 ? state : ops::slice_rows(t, state, next_active, n_active);
          Var placed = ops::scatter_add_rows(t, finished, std::move(done), g.node_count);
          agg = have_agg ? ops::add(t, agg, placed) : placed;
          have_agg = true;
        }
        n_active = next_active;
      }
    }
    Var self_part = ops::matmul(t, h, bind(self, t, p + "w_self"));
    Var neigh_part = ops::matmul(t, agg, bind(self, t, p + "w_neigh"));
    return ops::add(t, self_part, neigh_part);
  }

  /// Edge attention over the shortcut graph: for edge j -> i,
  /// e_ij = sigmoid(Q_i + K_j) . w_e, alpha = softmax over i's in-edges,
  /// h'_i = Σ alpha_ij V_j. Nodes without in-edges keep their input row.
  template <class Self>
  static Var attention_layer_impl(Self& self, Tape<Real>& t, const BatchedSessionGraph& g, Var h,
                                  std::size_t layer, Mode mode, Rng& rng, AttentionTrace<Real>* trace) {
    if (!g.shortcuts_built) throw StateError("attention_layer: shortcut edges were not built");
    if constexpr (std::is_const_v<Self>) {
      if (mode == Mode::train) throw StateError("train mode requires a mutable model");
    }
    const std::size_t d = self.dim();
    const auto& hv = t.value(h);
    if (hv.rows() != g.node_count || hv.cols() != d) {
      throw DimensionError("attention_layer: features " + hv.shape() + " for " + std::to_string(g.node_count) +
                           " nodes of dim " + std::to_string(d));
    }
    const std::string p = layer_prefix(layer, 'A');
    if (g.shortcut_edges.empty()) {
      if (trace) trace->layers.emplace_back();
      return h;
    }
    ops::BatchNormState<Real> bn;
    bn.gamma = bind(self, t, p + "bn.gamma");
    bn.beta = bind(self, t, p + "bn.beta");
    bn.running_mean = &self.params_.value(p + "bn.running_mean");
    bn.running_var = &self.params_.value(p + "bn.running_var");
    if constexpr (!std::is_const_v<Self>) {
      bn.mean_update = &self.params_.value(p + "bn.running_mean");
      bn.var_update = &self.params_.value(p + "bn.running_var");
    }
    Var x = ops::batchnorm_dropout(t, h, bn, mode, self.config_.dropout, rng);
    Var q = ops::matmul(t, x, bind(self, t, p + "w_query"));
    Var k = ops::matmul(t, x, bind(self, t, p + "w_key"));
    Var v = ops::matmul(t, x, bind(self, t, p + "w_value"));

    const auto& edges = g.shortcut_edges;
    std::vector<std::size_t> dst(edges.size()), src(edges.size());
    std::vector<std::size_t> segment_of_node(g.node_count, static_cast<std::size_t>(-1));
    std::vector<std::size_t> seg(edges.size());
    std::size_t segments = 0;
    for (std::size_t e = 0; e < edges.size(); ++e) {
      dst[e] = edges[e].dst;
      src[e] = edges[e].src;
      auto& sid = segment_of_node[edges[e].dst];
      if (sid == static_cast<std::size_t>(-1)) sid = segments++;
      seg[e] = sid;
    }
    Var pre = ops::add(t, ops::gather_rows(t, q, dst), ops::gather_rows(t, k, src));
    Var score = ops::matmul(t, ops::sigmoid(t, pre), bind(self, t, p + "w_edge"));
    Var alpha = ops::segment_softmax(t, score, seg, segments);
    if (trace) {
      typename AttentionTrace<Real>::Layer tl;
      tl.dst.assign(dst.begin(), dst.end());
      tl.src.assign(src.begin(), src.end());
      const auto& av = t.value(alpha);
      tl.alpha.assign(av.data(), av.data() + av.size());
      trace->layers.push_back(std::move(tl));
    }
    Var weighted = ops::scale_rows(t, ops::gather_rows(t, v, src), alpha);
    Var out = ops::scatter_add_rows(t, weighted, dst, g.node_count);

    Matrix<Real> isolated(g.node_count, 1);
    bool any_isolated = false;
    for (NodeId n = 0; n < g.node_count; ++n)
      if (segment_of_node[n] == static_cast<std::size_t>(-1)) {
        isolated[n] = Real(1);
        any_isolated = true;
      }
    if (any_isolated) out = ops::add(t, out, ops::scale_rows(t, h, t.constant(std::move(isolated))));
    return out;
  }

  template <class Self>
  static Var run_stack_impl(Self& self, Tape<Real>& t, const BatchedSessionGraph& g, Mode mode, Rng& rng,
                            AttentionTrace<Real>* trace) {
    self.config_.validate();
    Var h = embed_nodes_impl(self, t, g);
    for (std::size_t l = 0; l < self.config_.layer_pattern.size(); ++l) {
      if (self.config_.layer_pattern[l] == 'G') {
        h = gnn_layer_impl(self, t, g, h, l);
      } else {
        h = attention_layer_impl(self, t, g, h, l, mode, rng, trace);
      }
    }
    return h;
  }

  /// s_local = last item row; alpha_i = q . sigmoid(x_i W_1 + x_last W_2 + r)
  /// per occurrence; s_global = Σ alpha_i x_i; s = [s_local | s_global] W_3^T.
  template <class Self>
  static Var readout_impl(Self& self, Tape<Real>& t, const BatchedSessionGraph& g, Var h, Parts* parts) {
    const auto& hv = t.value(h);
    if (hv.rows() != g.node_count) {
      throw DimensionError("readout: features " + hv.shape() + " for " + std::to_string(g.node_count) + " nodes");
    }
    std::vector<std::size_t> occ, occ_session, occ_last;
    for (SessionId s = 0; s < g.session_count(); ++s) {
      if (g.session_nodes[s].empty()) throw InputError("readout: session " + std::to_string(s) + " has no items");
      for (NodeId n : g.session_nodes[s]) {
        occ.push_back(n);
        occ_session.push_back(s);
        occ_last.push_back(g.session_last[s]);
      }
    }
    std::vector<std::size_t> last(g.session_last.begin(), g.session_last.end());
    Var x_occ = ops::gather_rows(t, h, occ);
    Var x_last = ops::gather_rows(t, h, std::move(occ_last));
    Var pre = ops::add(t, ops::matmul(t, x_occ, bind(self, t, "readout.w_1")),
                       ops::matmul(t, x_last, bind(self, t, "readout.w_2")));
    pre = ops::add_row(t, pre, bind(self, t, "readout.bias"));
    Var alpha = ops::matmul(t, ops::sigmoid(t, pre), bind(self, t, "readout.q"));
    Var weighted = ops::scale_rows(t, self.config_.readout_last_item_sum ? x_last : x_occ, alpha);
    Var s_global = ops::scatter_add_rows(t, weighted, std::move(occ_session), g.session_count());
    Var s_local = ops::gather_rows(t, h, std::move(last));
    Var s = ops::matmul_nt(t, ops::concat_cols(t, s_local, s_global), bind(self, t, "readout.w_3"));
    if (parts) *parts = Parts{s_local, s_global, s};
    return s;
  }

  void init_params(Rng& rng) {
    const std::size_t d = config_.embedding_dim;
    const double a = 1.0 / std::sqrt(static_cast<double>(d));
    auto uni = [&](std::size_t r, std::size_t c) { return random_uniform<Real>(r, c, -a, a, rng); };
    params_ = ParamStore<Real>();
    params_.add("item_embedding", uni(config_.catalog_size, d));
    for (std::size_t l = 0; l < config_.layer_pattern.size(); ++l) {
      const char kind = config_.layer_pattern[l];
      const std::string p = layer_prefix(l, kind);
      if (kind == 'G') {
        params_.add(p + "gru.w_input", uni(d, 3 * d));
        params_.add(p + "gru.w_hidden", uni(d, 3 * d));
        params_.add(p + "gru.b_input", uni(1, 3 * d));
        params_.add(p + "gru.b_hidden", uni(1, 3 * d));
        params_.add(p + "w_self", uni(d, d));
        params_.add(p + "w_neigh", uni(d, d));
      } else {
        params_.add(p + "bn.gamma", Matrix<Real>(1, d, Real(1)));
        params_.add(p + "bn.beta", Matrix<Real>(1, d));
        params_.add(p + "bn.running_mean", Matrix<Real>(1, d), false);
        params_.add(p + "bn.running_var", Matrix<Real>(1, d, Real(1)), false);
        params_.add(p + "w_query", uni(d, d));
        params_.add(p + "w_key", uni(d, d));
        params_.add(p + "w_value", uni(d, d));
        params_.add(p + "w_edge", uni(d, 1));
      }
    }
    params_.add("readout.w_1", uni(d, d));
    params_.add("readout.w_2", uni(d, d));
    params_.add("readout.bias", uni(1, d));
    params_.add("readout.q", uni(d, 1));
    params_.add("readout.w_3", uni(d, 2 * d));
  }

  ModelConfig config_;
  ParamStore<Real> params_;
};

}  // namespace grainrec
