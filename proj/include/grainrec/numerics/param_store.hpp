// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "grainrec/numerics/matrix.hpp"

namespace grainrec {

/// One named tensor with its gradient accumulator and optimizer moments.
/// Non-trainable entries (e.g. batch-norm running statistics) carry a value
/// only; they are persisted with the model but never receive updates.
template <class Real>
struct ParamEntry {
  std::string name;
  Matrix<Real> value;
  Matrix<Real> grad;
  Matrix<Real> moment1;
  Matrix<Real> moment2;
  bool trainable = true;
};

/// Insertion-ordered parameter table. Entry addresses are stable.
template <class Real>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& o) { *this = o; }
  ParamStore& operator=(const ParamStore& o) {
    if (this == &o) return *this;
    entries_.clear();
    index_.clear();
    for (const auto& e : o.entries_) {
      entries_.push_back(e);
      index_[e.name] = entries_.size() - 1;
    }
    step_ = o.step_;
    return *this;
  }
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  ParamEntry<Real>& add(const std::string& name, Matrix<Real> value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    ParamEntry<Real> e;
    e.name = name;
    e.grad = Matrix<Real>(value.rows(), value.cols());
    if (trainable) {
      e.moment1 = Matrix<Real>(value.rows(), value.cols());
      e.moment2 = Matrix<Real>(value.rows(), value.cols());
    }
    e.value = std::move(value);
    e.trainable = trainable;
    entries_.push_back(std::move(e));
    index_[name] = entries_.size() - 1;
    return entries_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  ParamEntry<Real>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw KeyError("unknown parameter '" + name + "'");
    return entries_[it->second];
  }
  const ParamEntry<Real>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw KeyError("unknown parameter '" + name + "'");
    return entries_[it->second];
  }

  Matrix<Real>& value(const std::string& name) { return at(name).value; }
  const Matrix<Real>& value(const std::string& name) const { return at(name).value; }

  std::deque<ParamEntry<Real>>& entries() noexcept { return entries_; }
  const std::deque<ParamEntry<Real>>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  void zero_grad() {
    for (auto& e : entries_) e.grad.set_zero();
  }

  double grad_norm() const {
    double s = 0;
    for (const auto& e : entries_)
      if (e.trainable) s += static_cast<double>(e.grad.squared_norm());
    return std::sqrt(s);
  }

  std::size_t step() const noexcept { return step_; }
  std::size_t& step() noexcept { return step_; }

  /// Same names, same shapes, same values, compared exactly.
  bool values_equal(const ParamStore& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != o.entries_[i].name) return false;
      if (!(entries_[i].value == o.entries_[i].value)) return false;
    }
    return true;
  }

  template <class Other>
  ParamStore<Other> cast() const {
    ParamStore<Other> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<Other>(), e.trainable);
    return out;
  }

 private:
  std::deque<ParamEntry<Real>> entries_;
  std::map<std::string, std::size_t> index_;
  std::size_t step_ = 0;
};

}  // namespace grainrec
