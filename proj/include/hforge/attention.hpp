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

#ifndef HFORGE_ATTENTION_HPP
#define HFORGE_ATTENTION_HPP

#include <cstddef>
#include <span>

#include "hforge/autograd.hpp"
#include "hforge/cache.hpp"
#include "hforge/config.hpp"
#include "hforge/tensor.hpp"

namespace hforge {

/// Grouped-query attention projections.
///   w_q: d x (n_h d_h); w_k, w_v: d x (n_kv d_h); w_o: (n_h d_h) x d
template <class T>
struct AttentionParams {
  T w_q, w_k, w_v, w_o;

  template <class F>
  void visit(F&& f) {
    each(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    each(*this, f);
  }

 private:
  template <class Self, class F>
  static void each(Self& self, F& f) {
    f("w_q", self.w_q);
    f("w_k", self.w_k);
    f("w_v", self.w_v);
    f("w_o", self.w_o);
  }
};

/// Latent attention projections.
///   w_dq: d x r_q; w_uq: r_q x (n_h d_qk); w_qr: r_q x (n_h d_r)
///   w_dkv: d x r_kv; w_uk: r_kv x (n_kv d_qk); w_uv: r_kv x (n_kv d_v)
///   w_kr: d x d_r; w_o: (n_h d_v) x d
template <class T>
struct MLAParams {
  T w_dq, w_uq, w_qr, w_dkv, w_uk, w_uv, w_kr, w_o;

  template <class F>
  void visit(F&& f) {
    each(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    each(*this, f);
  }

 private:
  template <class Self, class F>
  static void each(Self& self, F& f) {
    f("w_dq", self.w_dq);
    f("w_uq", self.w_uq);
    f("w_qr", self.w_qr);
    f("w_dkv", self.w_dkv);
    f("w_uk", self.w_uk);
    f("w_uv", self.w_uv);
    f("w_kr", self.w_kr);
    f("w_o", self.w_o);
  }
};

using AttentionWeights = AttentionParams<Tensor>;
using AttentionVars = AttentionParams<Var>;
using MLAWeights = MLAParams<Tensor>;
using MLAVars = MLAParams<Var>;

/// Checks every projection shape against the configs.
void check_shapes(const AttentionWeights& w, const ModelConfig& cfg);
void check_shapes(const MLAWeights& w, const ModelConfig& cfg, const MLAConfig& mcfg);

/// Rotary embedding of x (t x heads*dim) at the given positions.
Tensor rope_apply(const Tensor& x, std::size_t heads, std::span<const std::size_t> positions,
                  double base);

/// Differentiable token mixers over `batch` sequences of `seq_len` rows of
/// h. With a cache (batch 1) positions continue from the cached token count
/// and the new rows are appended.
Var mha_mixer(const AttentionVars& w, const Var& h, const ModelConfig& cfg, std::size_t batch,
              std::size_t seq_len, FullKV* cache = nullptr);
Var mla_mixer(const MLAVars& w, const Var& h, const ModelConfig& cfg, const MLAConfig& mcfg,
              std::size_t batch, std::size_t seq_len, LatentKV* cache = nullptr);

/// Single-sequence inference entry points (h is t x d).
Tensor mha_forward(const Tensor& h, const AttentionWeights& w, const ModelConfig& cfg,
                   FullKV* cache = nullptr);
Tensor mla_forward(const Tensor& h, const MLAWeights& w, const ModelConfig& cfg,
                   const MLAConfig& mcfg, LatentKV* cache = nullptr);

/// Key/value cache bytes of one layer after t tokens. Throws ConfigError for
/// an MLA layer without an MLA config.
std::size_t kv_bytes(LayerKind kind, const ModelConfig& cfg, const MLAConfig* mcfg,
                     std::size_t t, std::size_t elem_bytes);

}  // namespace hforge

#endif  // HFORGE_ATTENTION_HPP
