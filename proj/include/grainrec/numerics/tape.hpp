// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <utility>

#include "grainrec/numerics/matrix.hpp"
#include "grainrec/numerics/param_store.hpp"

namespace grainrec {

enum class Mode { train, eval };

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const noexcept { return id != std::numeric_limits<std::uint32_t>::max(); }
};

/// Reverse-mode computation tape. Every operation appends one node holding its
/// forward value and, when any input needs a gradient, a closure that pushes
/// the node's gradient into its inputs. Parameter leaves reference ParamStore
/// entries; backward() adds their gradients into the entries' accumulators.
///
/// A tape is single-threaded. Tapes built with record == false never allocate
/// gradients or closures and are used for inference.
template <class Real>
class Tape {
 public:
  using Backward = std::function<void(Tape&, Var self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var constant(Matrix<Real> m) { return push(std::move(m), nullptr, false, nullptr, {}); }

  /// Leaf that borrows `m`; the matrix must outlive the tape.
  Var borrow(const Matrix<Real>& m) { return push({}, &m, false, nullptr, {}); }

  Var param(ParamEntry<Real>& e) {
    const bool needs = record_ && e.trainable;
    return push({}, &e.value, needs, needs ? &e : nullptr, {});
  }

  /// Appends an op result. `backward` is dropped when no gradient is needed.
  Var emplace(Matrix<Real> value, bool needs_grad, Backward backward) {
    needs_grad = needs_grad && record_;
    return push(std::move(value), nullptr, needs_grad, nullptr, needs_grad ? std::move(backward) : Backward{});
  }

  const Matrix<Real>& value(Var v) const { return node(v).value(); }
  bool needs_grad(Var v) const { return node(v).needs_grad; }

  /// Gradient buffer of `v`, zero-initialised on first access.
  Matrix<Real>& grad(Var v) {
    Node& n = node(v);
    if (!n.has_grad) {
      n.grad = Matrix<Real>(n.value().rows(), n.value().cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool has_grad(Var v) const { return node(v).has_grad; }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 (root must be 1x1) and runs every recorded
  /// closure in reverse order.
  void backward(Var root) {
    if (!record_) throw StateError("backward() on a non-recording tape");
    const auto& rv = value(root);
    if (rv.rows() != 1 || rv.cols() != 1) {
      throw DimensionError("backward() root must be 1x1, got " + rv.shape());
    }
    if (!needs_grad(root)) return;
    grad(root)(0, 0) = Real(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.backward) n.backward(*this, Var{static_cast<std::uint32_t>(i)});
      if (n.param) n.param->grad += n.grad;
    }
  }

 private:
  struct Node {
    Matrix<Real> owned;
    const Matrix<Real>* ref = nullptr;
    Matrix<Real> grad;
    bool needs_grad = false;
    bool has_grad = false;
    ParamEntry<Real>* param = nullptr;
    Backward backward;
    const Matrix<Real>& value() const { return ref ? *ref : owned; }
  };

  Var push(Matrix<Real> owned, const Matrix<Real>* ref, bool needs, ParamEntry<Real>* param,
           Backward bw) {
    Node n;
    n.owned = std::move(owned);
    n.ref = ref;
    n.needs_grad = needs;
    n.param = param;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw StateError("invalid tape variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw StateError("invalid tape variable");
    return nodes_[v.id];
  }

  bool record_;
  std::deque<Node> nodes_;
};

}  // namespace grainrec
