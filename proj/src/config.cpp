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

#include "hforge/config.hpp"

#include <algorithm>
#include <string>

#include "hforge/error.hpp"

namespace hforge {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

template <class T>
void read_optional(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

std::string_view layer_kind_name(LayerKind kind) noexcept {
  switch (kind) {
    case LayerKind::kMha:
      return "MHA";
    case LayerKind::kMla:
      return "MLA";
    case LayerKind::kMamba2:
      return "MAMBA2";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view name) {
  if (name == "MHA") return LayerKind::kMha;
  if (name == "MLA") return LayerKind::kMla;
  if (name == "MAMBA2") return LayerKind::kMamba2;
  throw ConfigError("unknown layer kind '" + std::string(name) + "'");
}

std::size_t ModelConfig::count(LayerKind kind) const noexcept {
  return static_cast<std::size_t>(std::count(layer_kinds.begin(), layer_kinds.end(), kind));
}

void ModelConfig::validate() const {
  require(L >= 1, "L must be at least 1");
  require(layer_kinds.size() == L, "layer_kinds has " + std::to_string(layer_kinds.size()) +
                                       " entries for L = " + std::to_string(L));
  require(d >= 1 && n_h >= 1 && n_kv >= 1 && d_h >= 1 && vocab >= 2,
          "d, n_h, n_kv, d_h must be positive and vocab at least 2");
  require(n_h % n_kv == 0, "n_h = " + std::to_string(n_h) + " is not divisible by n_kv = " +
                               std::to_string(n_kv));
  require(d_h % 2 == 0, "d_h must be even for rotary embedding");
  require(rope_base > 1.0, "rope_base must exceed 1");
  require(conv_width >= 1, "conv_width must be positive");
  require(norm_eps > 0.0, "norm_eps must be positive");
}

ModelConfig ModelConfig::with_uniform_kind(LayerKind kind) const {
  ModelConfig out = *this;
  out.layer_kinds.assign(L, kind);
  return out;
}

void MLAConfig::validate(const ModelConfig& cfg) const {
  require(d_qk + d_r == cfg.d_h, "d_qk + d_r must equal d_h");
  require(d_v == cfg.d_h, "d_v must equal d_h");
  require(d_r % 2 == 0 && d_r >= 2, "d_r must be even and positive");
  require(r_kv >= 1 && r_kv <= 2 * cfg.n_kv * cfg.d_h,
          "r_kv must lie in [1, 2 * n_kv * d_h]");
  require(r_q >= 1 && r_q <= cfg.d, "r_q must lie in [1, d]");
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  std::vector<std::string> kinds;
  for (LayerKind k : cfg.layer_kinds) kinds.emplace_back(layer_kind_name(k));
  j = nlohmann::json{{"L", cfg.L},
                     {"d", cfg.d},
                     {"n_h", cfg.n_h},
                     {"n_kv", cfg.n_kv},
                     {"d_h", cfg.d_h},
                     {"vocab", cfg.vocab},
                     {"rope_base", cfg.rope_base},
                     {"layer_kinds", kinds},
                     {"d_ff", cfg.d_ff},
                     {"conv_width", cfg.conv_width},
                     {"norm_eps", cfg.norm_eps},
                     {"dtype", dtype_name(cfg.dtype)}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  cfg = ModelConfig{};
  cfg.L = j.at("L").get<std::size_t>();
  cfg.d = j.at("d").get<std::size_t>();
  cfg.n_h = j.at("n_h").get<std::size_t>();
  cfg.n_kv = j.at("n_kv").get<std::size_t>();
  cfg.d_h = j.at("d_h").get<std::size_t>();
  cfg.vocab = j.at("vocab").get<std::size_t>();
  read_optional(j, "rope_base", cfg.rope_base);
  read_optional(j, "d_ff", cfg.d_ff);
  read_optional(j, "conv_width", cfg.conv_width);
  read_optional(j, "norm_eps", cfg.norm_eps);
  if (j.contains("dtype")) cfg.dtype = parse_dtype(j.at("dtype").get<std::string>());
  if (j.contains("layer_kinds")) {
    for (const auto& k : j.at("layer_kinds")) {
      cfg.layer_kinds.push_back(parse_layer_kind(k.get<std::string>()));
    }
  } else {
    cfg.layer_kinds.assign(cfg.L, LayerKind::kMha);
  }
}

void to_json(nlohmann::json& j, const MLAConfig& cfg) {
  j = nlohmann::json{{"r_q", cfg.r_q},
                     {"r_kv", cfg.r_kv},
                     {"d_qk", cfg.d_qk},
                     {"d_v", cfg.d_v},
                     {"d_r", cfg.d_r}};
}

void from_json(const nlohmann::json& j, MLAConfig& cfg) {
  cfg.r_q = j.at("r_q").get<std::size_t>();
  cfg.r_kv = j.at("r_kv").get<std::size_t>();
  cfg.d_qk = j.at("d_qk").get<std::size_t>();
  cfg.d_v = j.at("d_v").get<std::size_t>();
  cfg.d_r = j.at("d_r").get<std::size_t>();
}

ModelConfig parse_model_config(const nlohmann::json& j) {
  ModelConfig cfg;
  try {
    cfg = j.get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

MLAConfig parse_mla_config(const nlohmann::json& j, const ModelConfig& cfg) {
  MLAConfig m;
  try {
    m = j.get<MLAConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("mla config: ") + e.what());
  }
  m.validate(cfg);
  return m;
}

}  // namespace hforge
