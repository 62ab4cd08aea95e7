// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "grainrec/dataio.hpp"
#include "grainrec/error.hpp"

namespace grainrec {

enum class GraphMode {
  disjoint,  // every session owns its nodes
  merged,    // nodes shared across the batch by item
};

using NodeId = std::size_t;
using SessionId = std::size_t;

/// Adjacent-pair edge. `position` is the index of the pair within its session.
struct SuccessorEdge {
  NodeId src;
  NodeId dst;
  SessionId session;
  std::size_t position;

  bool operator==(const SuccessorEdge&) const = default;
};

/// "dst occurs somewhere after src" edge, unique per (session, src, dst).
struct ShortcutEdge {
  NodeId src;
  NodeId dst;
  SessionId session;

  bool operator==(const ShortcutEdge&) const = default;
};

/// Graph views of one batch of sessions. Immutable once built.
struct BatchedSessionGraph {
  GraphMode mode = GraphMode::disjoint;
  std::size_t node_count = 0;
  std::vector<ItemIndex> node_item;
  std::vector<SuccessorEdge> successor_edges;
  std::vector<ShortcutEdge> shortcut_edges;
  bool shortcuts_built = false;
  /// Per session, one node entry per item occurrence, in order.
  std::vector<std::vector<NodeId>> session_nodes;
  /// Per session, the node of the final input item.
  std::vector<NodeId> session_last;

  std::size_t session_count() const noexcept { return session_nodes.size(); }
};

/// Builds nodes and successor edges. Repeated items within a session share a
/// node; in merged mode they also share it across sessions. No self-loops are
/// emitted, so [a, a] contributes no edge (cleaned input never has those).
inline BatchedSessionGraph build_successor_graph(std::span<const std::vector<ItemIndex>> sessions,
                                                 GraphMode mode = GraphMode::disjoint) {
  if (sessions.empty()) throw InputError("build_graph: empty batch");
  BatchedSessionGraph g;
  g.mode = mode;
  std::map<ItemIndex, NodeId> shared;
  for (SessionId s = 0; s < sessions.size(); ++s) {
    const auto& seq = sessions[s];
    if (seq.empty()) throw InputError("build_graph: session " + std::to_string(s) + " is empty");
    std::map<ItemIndex, NodeId> local;
    auto& node_of = mode == GraphMode::merged ? shared : local;
    std::vector<NodeId> occ;
    occ.reserve(seq.size());
    for (ItemIndex item : seq) {
      auto [it, inserted] = node_of.try_emplace(item, g.node_count);
      if (inserted) {
        g.node_item.push_back(item);
        ++g.node_count;
      }
      occ.push_back(it->second);
    }
    std::size_t pos = 0;
    for (std::size_t i = 0; i + 1 < occ.size(); ++i) {
      if (occ[i] == occ[i + 1]) continue;
      g.successor_edges.push_back({occ[i], occ[i + 1], s, pos++});
    }
    g.session_last.push_back(occ.back());
    g.session_nodes.push_back(std::move(occ));
  }
  return g;
}

/// Populates shortcut edges: for each session and each pair of occurrences
/// i < j with distinct nodes, one edge (u_i, u_j), deduplicated per session.
inline void build_shortcut(BatchedSessionGraph& g) {
  g.shortcut_edges.clear();
  for (SessionId s = 0; s < g.session_nodes.size(); ++s) {
    const auto& occ = g.session_nodes[s];
    std::set<std::pair<NodeId, NodeId>> seen;
    for (std::size_t i = 0; i < occ.size(); ++i)
      for (std::size_t j = i + 1; j < occ.size(); ++j) {
        if (occ[i] == occ[j]) continue;
        if (seen.emplace(occ[i], occ[j]).second) g.shortcut_edges.push_back({occ[i], occ[j], s});
      }
  }
  g.shortcuts_built = true;
}

/// Both views for a batch of training sequences (inputs only).
inline BatchedSessionGraph build_graph(std::span<const TrainingSequence> batch,
                                       GraphMode mode = GraphMode::disjoint) {
  std::vector<std::vector<ItemIndex>> seqs;
  seqs.reserve(batch.size());
  for (const auto& ts : batch) seqs.push_back(ts.inputs);
  auto g = build_successor_graph(std::span<const std::vector<ItemIndex>>(seqs), mode);
  build_shortcut(g);
  return g;
}

inline BatchedSessionGraph build_graph(std::span<const std::vector<ItemIndex>> sessions,
                                       GraphMode mode = GraphMode::disjoint) {
  auto g = build_successor_graph(sessions, mode);
  build_shortcut(g);
  return g;
}

/// Incoming successor edges of `node`, sorted by (session, position).
inline std::vector<SuccessorEdge> edge_order(const BatchedSessionGraph& g, NodeId node) {
  if (node >= g.node_count) throw IndexError("edge_order: node " + std::to_string(node) + " not in graph");
  std::vector<SuccessorEdge> in;
  for (const auto& e : g.successor_edges)
    if (e.dst == node) in.push_back(e);
  std::sort(in.begin(), in.end(), [](const SuccessorEdge& a, const SuccessorEdge& b) {
    return std::tie(a.session, a.position) < std::tie(b.session, b.position);
  });
  return in;
}

/// Incoming edge lists for every node at once, each in edge_order.
inline std::vector<std::vector<SuccessorEdge>> incoming_in_order(const BatchedSessionGraph& g) {
  std::vector<std::vector<SuccessorEdge>> in(g.node_count);
  for (const auto& e : g.successor_edges) in[e.dst].push_back(e);
  for (auto& v : in)
    std::sort(v.begin(), v.end(), [](const SuccessorEdge& a, const SuccessorEdge& b) {
      return std::tie(a.session, a.position) < std::tie(b.session, b.position);
    });
  return in;
}

/// Graphviz rendering for debugging; node labels carry the item index.
inline void write_dot(std::ostream& out, const BatchedSessionGraph& g) {
  out << "digraph session_batch {\n";
  for (NodeId n = 0; n < g.node_count; ++n) out << "  n" << n << " [label=\"" << g.node_item[n] << "\"];\n";
  for (const auto& e : g.successor_edges)
    out << "  n" << e.src << " -> n" << e.dst << " [label=\"s" << e.session << ":" << e.position << "\"];\n";
  for (const auto& e : g.shortcut_edges)
    out << "  n" << e.src << " -> n" << e.dst << " [style=dashed, label=\"s" << e.session << "\"];\n";
  out << "}\n";
}

}  // namespace grainrec
