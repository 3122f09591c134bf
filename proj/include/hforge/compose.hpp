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

#ifndef HFORGE_COMPOSE_HPP
#define HFORGE_COMPOSE_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hforge/model.hpp"
#include "hforge/smart.hpp"

namespace hforge {

/// Hybrid model with MLA mixers at the layout indices (from `mla`) and
/// Mamba2 mixers elsewhere (from `mamba`). Embeddings, norms, MLPs and the
/// head come from `mla`; when a shared parameter differs between the
/// sources by more than `tolerance`, a warning naming it is appended.
HybridModel assemble(const HybridModel& mla, const HybridModel& mamba, const HybridLayout& layout,
                     double tolerance = 0.0, std::vector<std::string>* warnings = nullptr);

/// MLA indices of a model's layers.
HybridLayout layout_of(const HybridModel& model);

struct KvReport {
  struct Layer {
    std::size_t index = 0;
    LayerKind kind = LayerKind::kMha;
    std::size_t kv_bytes = 0;
    std::size_t state_bytes = 0;
  };

  std::size_t tokens = 0;
  std::size_t elem_bytes = 0;
  std::vector<Layer> layers;
  std::size_t kv_bytes = 0;        // cache that grows with tokens
  std::size_t state_bytes = 0;     // fixed Mamba2 state, not counted as KV
  std::size_t baseline_bytes = 0;  // every layer holding full keys and values
  double ratio = 0.0;              // kv_bytes / baseline_bytes
  double percent = 0.0;            // 100 * ratio rounded to two decimals
};

void to_json(nlohmann::json& j, const KvReport& r);

/// Cache accounting for the layer kinds of `cfg` after t tokens at the
/// config's storage width.
KvReport kv_report(const ModelConfig& cfg, const MLAConfig* mcfg, std::size_t t);
/// Same with MLA at the layout indices and Mamba2 elsewhere.
KvReport kv_report(const ModelConfig& cfg, const HybridLayout& layout, const MLAConfig& mcfg,
                   std::size_t t);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  struct Entry {
    std::string name;
    DType dtype = DType::kF64;
    Shape shape;
    bool trainable = true;
    std::uint64_t offset = 0;  // from the start of the payload
    std::uint64_t bytes = 0;
    std::uint32_t crc32 = 0;
  };

  std::uint32_t version = kCheckpointVersion;
  ModelConfig cfg;
  std::optional<MLAConfig> mla;
  HybridLayout layout;
  std::vector<Entry> tensors;
  std::uint64_t payload_offset = 0;  // from the start of the file
  std::uint64_t payload_bytes = 0;
};

/// Writes "HFRG", u32 version, u64 header length, the JSON header and a
/// 64-byte aligned little-endian payload with a CRC32 per tensor.
void save_checkpoint(const HybridModel& model, const std::filesystem::path& path);
/// Serialized bytes of save_checkpoint.
std::string checkpoint_bytes(const HybridModel& model);

/// Reads and checks the header only.
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);
/// Throws FormatError on a bad magic or version, a truncated payload,
/// out-of-bounds or overlapping tensors, or a checksum mismatch.
HybridModel load_checkpoint(const std::filesystem::path& path);
HybridModel parse_checkpoint(const std::string& bytes);

}  // namespace hforge

#endif  // HFORGE_COMPOSE_HPP
