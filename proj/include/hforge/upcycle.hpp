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

#ifndef HFORGE_UPCYCLE_HPP
#define HFORGE_UPCYCLE_HPP

#include <cstdint>
#include <variant>

#include "hforge/attention.hpp"
#include "hforge/config.hpp"
#include "hforge/linalg.hpp"
#include "hforge/ssm.hpp"

namespace hforge {

using MixerWeights = std::variant<AttentionWeights, MLAWeights, Mamba2Weights>;

LayerKind kind_of(const MixerWeights& w) noexcept;

/// Low-rank factors before the head-wise split:
///   W_Q ~ w_dq * w_uq_full        (w_uq_full: r_q x n_h d_h)
///   [W_K, W_V] ~ w_dkv * w_ukv_full  (w_ukv_full: r_kv x 2 n_kv d_h)
struct MLAFactors {
  Tensor w_dq;
  Tensor w_uq_full;
  Tensor w_dkv;
  Tensor w_ukv_full;
};

/// Truncated SVDs of W_Q and of the joint [W_K, W_V]. Throws ConfigError
/// when a rank exceeds the matrix dimensions.
MLAFactors mla_factors(const AttentionWeights& w, const ModelConfig& cfg, const MLAConfig& mcfg);

/// SVD-based MLA initialization: query and key/value factors split per
/// head into content and rotary parts, W_KR from the head-averaged W_K,
/// W_O copied.
MLAWeights init_mla_from_attention(const AttentionWeights& w, const ModelConfig& cfg,
                                   const MLAConfig& mcfg);

/// Interleaves W_UQ and W_QR back into the r_q x (n_h d_h) head layout.
Tensor merge_query_up(const MLAWeights& w, const ModelConfig& cfg, const MLAConfig& mcfg);

/// Projection copy: W_x <- W_V, W_B <- W_K, W_C <- W_Q, W_out <- W_O, with
/// identity convolutions and default recurrence parameters.
Mamba2Weights init_mamba2_from_attention(const AttentionWeights& w, const ModelConfig& cfg);

/// Gaussian init with std 1/sqrt(fan_in) for every projection and
/// convolution; Mamba2 recurrence parameters keep their defaults.
MixerWeights init_random(LayerKind kind, const ModelConfig& cfg, const MLAConfig* mcfg,
                         std::uint64_t seed);

}  // namespace hforge

#endif  // HFORGE_UPCYCLE_HPP
