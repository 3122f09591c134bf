// Copyright 2026 The hforge Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef HFORGE_AUTOGRAD_HPP
#define HFORGE_AUTOGRAD_HPP

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <string_view>

#include "hforge/tensor.hpp"

namespace hforge {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
/// lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const noexcept { return *tape_; }
  int id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Wengert list for reverse-mode differentiation. Nodes are appended in
/// evaluation order, so reverse insertion order is a valid backward order.
/// A tape created with recording disabled keeps values only; it is the
/// inference mode used by cached decoding.
class Tape {
 public:
  /// Receives the gradient flowing into the node and pushes contributions
  /// to its parents through Tape::accumulate.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op result. A null `backward` marks a primitive without a
  /// derivative; reaching it during backward() is a GraphError.
  Var record(Tensor value, std::span<const Var> parents, BackwardFn backward,
             std::string_view op);
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward,
             std::string_view op) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(backward), op);
  }

  const Tensor& value(const Var& v) const { return nodes_[v.id()].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  /// Gradient accumulated so far; empty when none reached the node.
  const Tensor& grad(const Var& v) const { return nodes_[v.id()].grad; }
  /// Zero-initialized gradient buffer of `v` for in-place accumulation.
  Tensor& grad_slot(const Var& v);
  void accumulate(const Var& v, const Tensor& g);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every node.
  void backward(const Var& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Drops every node recorded after the first `size`; Vars to them become
  /// invalid.
  void rewind(std::size_t size);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    std::string_view op;
    bool requires_grad = false;
    bool leaf = false;
  };

  std::deque<Node> nodes_;
  bool recording_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

/// Named parameter tensors with a trainable flag per entry.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    bool trainable = true;
  };
  using Map = std::map<std::string, Entry>;

  /// Throws ConfigError on a duplicate path.
  void add(const std::string& path, Tensor value, bool trainable = true);
  void set(const std::string& path, Tensor value);
  bool contains(const std::string& path) const { return entries_.count(path) != 0; }
  const Tensor& get(const std::string& path) const;
  Tensor& get_mut(const std::string& path);
  const Entry& entry(const std::string& path) const;
  void set_trainable(const std::string& path, bool trainable);
  void erase(const std::string& path) { entries_.erase(path); }

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t parameter_count() const noexcept;
  Map::const_iterator begin() const noexcept { return entries_.begin(); }
  Map::const_iterator end() const noexcept { return entries_.end(); }
  Map::iterator begin() noexcept { return entries_.begin(); }
  Map::iterator end() noexcept { return entries_.end(); }

  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  Map entries_;
};

bool operator==(const ParamStore::Entry& a, const ParamStore::Entry& b);

using VarMap = std::map<std::string, Var>;
using GradMap = std::map<std::string, Tensor>;

/// Creates one leaf per parameter; trainable entries require gradients.
VarMap bind(Tape& tape, const ParamStore& params);

/// Runs the backward pass from a scalar loss and returns the gradient of
/// every trainable parameter in `bound`. Parameters the loss does not
/// depend on get zero tensors.
GradMap backward(const Var& loss, const VarMap& bound);

/// Central differences (f(p + eps e) - f(p - eps e)) / (2 eps) for every
/// coordinate of every trainable parameter.
GradMap finite_diff_grad(const std::function<double(const ParamStore&)>& f,
                         const ParamStore& params, double eps);

/// |a - b| / max(|a|, |b|, floor); the comparison used by gradient checks.
double grad_relative_error(double analytic, double numeric, double floor = 1e-6);

}  // namespace hforge

#endif  // HFORGE_AUTOGRAD_HPP
