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

#ifndef HFORGE_CONFIG_HPP
#define HFORGE_CONFIG_HPP

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "hforge/tensor.hpp"

namespace hforge {

enum class LayerKind { kMha, kMla, kMamba2 };

std::string_view layer_kind_name(LayerKind kind) noexcept;
LayerKind parse_layer_kind(std::string_view name);

/// Architecture hyperparameters. `dtype` is the storage precision of
/// parameters and cache entries; arithmetic is carried out in double.
struct ModelConfig {
  std::size_t L = 0;
  std::size_t d = 0;
  std::size_t n_h = 0;
  std::size_t n_kv = 0;
  std::size_t d_h = 0;
  std::size_t vocab = 0;
  double rope_base = 10000.0;
  std::vector<LayerKind> layer_kinds;
  std::size_t d_ff = 0;  // 0 selects 4 * d
  std::size_t conv_width = 4;
  double norm_eps = 1e-5;
  DType dtype = DType::kF32;

  std::size_t ff_dim() const noexcept { return d_ff == 0 ? 4 * d : d_ff; }
  std::size_t elem_bytes() const noexcept { return dtype_size(dtype); }
  std::size_t count(LayerKind kind) const noexcept;

  /// Throws ConfigError naming the first violated invariant.
  void validate() const;
  /// Same config with every layer set to `kind`.
  ModelConfig with_uniform_kind(LayerKind kind) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct MLAConfig {
  std::size_t r_q = 0;
  std::size_t r_kv = 0;
  std::size_t d_qk = 0;
  std::size_t d_v = 0;
  std::size_t d_r = 0;

  void validate(const ModelConfig& cfg) const;

  friend bool operator==(const MLAConfig&, const MLAConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);
void to_json(nlohmann::json& j, const MLAConfig& cfg);
void from_json(const nlohmann::json& j, MLAConfig& cfg);

/// Parses and validates; JSON type errors surface as ConfigError.
ModelConfig parse_model_config(const nlohmann::json& j);
MLAConfig parse_mla_config(const nlohmann::json& j, const ModelConfig& cfg);

}  // namespace hforge

#endif  // HFORGE_CONFIG_HPP
