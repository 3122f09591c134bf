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

#include "hforge/cache.hpp"

namespace hforge {

std::size_t byte_size(const FullKV& c, std::size_t elem_bytes) noexcept {
  return (c.k.numel() + c.v.numel()) * elem_bytes;
}

std::size_t byte_size(const LatentKV& c, std::size_t elem_bytes) noexcept {
  return (c.c_kv.numel() + c.k_r.numel()) * elem_bytes;
}

std::size_t byte_size(const SsmState& s, std::size_t elem_bytes) noexcept {
  return (s.h.numel() + s.conv_x.numel() + s.conv_b.numel() + s.conv_c.numel()) * elem_bytes;
}

std::size_t byte_size(const KVCache& c, std::size_t elem_bytes) noexcept {
  if (const auto* f = std::get_if<FullKV>(&c)) return byte_size(*f, elem_bytes);
  if (const auto* l = std::get_if<LatentKV>(&c)) return byte_size(*l, elem_bytes);
  if (const auto* s = std::get_if<SsmState>(&c)) return byte_size(*s, elem_bytes);
  return 0;
}

std::size_t kv_byte_size(const KVCache& c, std::size_t elem_bytes) noexcept {
  return std::holds_alternative<SsmState>(c) ? 0 : byte_size(c, elem_bytes);
}

}  // namespace hforge
