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

#include "hforge/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hforge/error.hpp"

namespace hforge {

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad && recording_;
  node.leaf = true;
  node.op = "leaf";
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn backward,
                 std::string_view op) {
  if (!value.all_finite()) {
    throw KernelError("non-finite value produced by '" + std::string(op) + "'");
  }
  Node node;
  node.value = std::move(value);
  node.op = op;
  if (recording_) {
    node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                     [](const Var& p) { return p.requires_grad(); });
    if (node.requires_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Tensor& Tape::grad_slot(const Var& v) {
  Node& n = nodes_[v.id()];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::accumulate(const Var& v, const Tensor& g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (g.numel() != n.value.numel()) {
    throw ShapeError("gradient " + shape_string(g.shape()) + " for value " +
                     shape_string(n.value.shape()));
  }
  Tensor& slot = grad_slot(v);
  for (std::size_t i = 0; i < g.numel(); ++i) slot[i] += g[i];
}

void Tape::backward(const Var& loss) {
  if (loss.tape_ != this) throw GraphError("backward: loss belongs to another tape");
  Node& root = nodes_[loss.id()];
  if (root.value.numel() != 1) {
    throw GraphError("backward: loss must be scalar, got " + shape_string(root.value.shape()));
  }
  if (!root.requires_grad) return;
  grad_slot(loss)[0] += 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.leaf || n.grad.empty()) continue;
    if (!n.backward) {
      throw GraphError("backward: primitive '" + std::string(n.op) + "' has no derivative");
    }
    // The closure may push to parents only; this node's grad is final.
    const Tensor grad_out = n.grad;
    n.backward(*this, grad_out);
  }
}

void Tape::rewind(std::size_t size) {
  if (size < nodes_.size()) nodes_.resize(size);
}

void ParamStore::add(const std::string& path, Tensor value, bool trainable) {
  auto [it, inserted] = entries_.try_emplace(path, Entry{std::move(value), trainable});
  if (!inserted) throw ConfigError("duplicate parameter path '" + path + "'");
}

void ParamStore::set(const std::string& path, Tensor value) {
  Tensor& slot = get_mut(path);
  if (slot.shape() != value.shape()) {
    throw ShapeError("parameter '" + path + "': " + shape_string(value.shape()) + " replaces " +
                     shape_string(slot.shape()));
  }
  slot = std::move(value);
}

const ParamStore::Entry& ParamStore::entry(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + path + "'");
  return it->second;
}

const Tensor& ParamStore::get(const std::string& path) const { return entry(path).value; }

Tensor& ParamStore::get_mut(const std::string& path) {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + path + "'");
  return it->second.value;
}

void ParamStore::set_trainable(const std::string& path, bool trainable) {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + path + "'");
  it->second.trainable = trainable;
}

std::size_t ParamStore::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.numel();
  return n;
}

bool operator==(const ParamStore::Entry& a, const ParamStore::Entry& b) {
  return a.trainable == b.trainable && bitwise_equal(a.value, b.value);
}

bool operator==(const ParamStore& a, const ParamStore& b) { return a.entries_ == b.entries_; }

VarMap bind(Tape& tape, const ParamStore& params) {
  VarMap out;
  for (const auto& [name, e] : params) out.emplace(name, tape.leaf(e.value, e.trainable));
  return out;
}

GradMap backward(const Var& loss, const VarMap& bound) {
  loss.tape().backward(loss);
  GradMap out;
  for (const auto& [name, var] : bound) {
    if (!var.requires_grad()) continue;
    const Tensor& g = var.tape().grad(var);
    out.emplace(name, g.empty() ? Tensor(var.shape()) : g);
  }
  return out;
}

GradMap finite_diff_grad(const std::function<double(const ParamStore&)>& f,
                         const ParamStore& params, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff_grad: eps must be positive");
  ParamStore probe = params;
  GradMap out;
  for (const auto& [name, e] : params) {
    if (!e.trainable) continue;
    Tensor g(e.value.shape());
    Tensor& p = probe.get_mut(name);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double saved = p[i];
      p[i] = saved + eps;
      const double up = f(probe);
      p[i] = saved - eps;
      const double down = f(probe);
      p[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw KernelError("finite_diff_grad: non-finite value probing '" + name + "'[" +
                          std::to_string(i) + "]");
      }
      g[i] = (up - down) / (2.0 * eps);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

double grad_relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace hforge
