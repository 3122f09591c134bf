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

#ifndef HFORGE_CACHE_HPP
#define HFORGE_CACHE_HPP

#include <cstddef>
#include <variant>

#include "hforge/tensor.hpp"

namespace hforge {

/// Post-rotary keys and values, one row per cached token:
/// k, v are t x (n_kv * d_h).
struct FullKV {
  Tensor k;
  Tensor v;

  std::size_t tokens() const noexcept { return k.rows(); }
};

/// Compressed latent rows (t x r_kv) and post-rotary shared rope keys
/// (t x d_r).
struct LatentKV {
  Tensor c_kv;
  Tensor k_r;

  std::size_t tokens() const noexcept { return c_kv.rows(); }
};

/// Recurrent state of one Mamba2 layer: per-head state matrices
/// (n_h x d_h x d_h) and the last width-1 pre-convolution inputs of the
/// x, B and C paths.
struct SsmState {
  Tensor h;
  Tensor conv_x;
  Tensor conv_b;
  Tensor conv_c;
  std::size_t tokens = 0;
};

using KVCache = std::variant<std::monostate, FullKV, LatentKV, SsmState>;

/// Bytes held by a cache entry at the given element width.
std::size_t byte_size(const FullKV& c, std::size_t elem_bytes) noexcept;
std::size_t byte_size(const LatentKV& c, std::size_t elem_bytes) noexcept;
std::size_t byte_size(const SsmState& s, std::size_t elem_bytes) noexcept;
std::size_t byte_size(const KVCache& c, std::size_t elem_bytes) noexcept;

/// Key/value bytes only: SSM state is not counted as KV cache.
std::size_t kv_byte_size(const KVCache& c, std::size_t elem_bytes) noexcept;

}  // namespace hforge

#endif  // HFORGE_CACHE_HPP
