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

#ifndef HFORGE_SMART_HPP
#define HFORGE_SMART_HPP

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hforge/distill.hpp"
#include "hforge/model.hpp"

namespace hforge {

struct SensitivityProfile {
  struct Provenance {
    std::string dataset;
    std::size_t samples = 0;       // sequences evaluated
    std::size_t decode_steps = 0;  // positions per sequence
    bool operator==(const Provenance&) const = default;
  };

  std::vector<double> scores;
  Provenance provenance;

  void validate() const;
  bool operator==(const SensitivityProfile&) const = default;
};

void to_json(nlohmann::json& j, const SensitivityProfile& p);
void from_json(const nlohmann::json& j, SensitivityProfile& p);
SensitivityProfile parse_profile(const nlohmann::json& j);

/// Layers that hold MLA; every other layer is Mamba2.
struct HybridLayout {
  std::size_t L = 0;
  std::vector<std::size_t> mla_indices;

  std::size_t n() const noexcept { return mla_indices.size(); }
  /// Range, ordering and (for three or more layers) gap checks.
  void validate() const;
  std::vector<LayerKind> layer_kinds() const;
  bool operator==(const HybridLayout&) const = default;
};

void to_json(nlohmann::json& j, const HybridLayout& layout);
void from_json(const nlohmann::json& j, HybridLayout& layout);
HybridLayout parse_layout(const nlohmann::json& j);

struct GapBounds {
  long t = 0;  // non-MLA layers strictly between the endpoints
  long g_min = 0;
  long g_max = 0;
};

/// Gap bounds for N selected layers with endpoints first < last. The gap
/// between consecutive selected layers a < b is b - a - 1.
GapBounds gap_bounds(std::size_t first, std::size_t last, std::size_t n);

/// Intermediate index sets (n - 2 layers strictly between the endpoints)
/// whose gaps all lie in the gap bounds, in lexicographic order. Empty when
/// the endpoints leave too little room. Throws ConfigError past 1e6 sets.
std::vector<std::vector<std::size_t>> enumerate_valid_configs(std::size_t first, std::size_t last,
                                                              std::size_t n);

/// Number of sets enumerate_valid_configs would return.
double count_valid_configs(std::size_t first, std::size_t last, std::size_t n);

/// Maximum-sum valid intermediate set by dynamic programming over gap
/// choices; ties go to the lexicographically smallest set. Used when the
/// candidate count is too large to enumerate.
std::vector<std::size_t> best_valid_config(std::span<const double> scores, std::size_t first,
                                           std::size_t last, std::size_t n);

/// Terminal layers: argmax over the first and last floor(L / n) layers.
std::pair<std::size_t, std::size_t> terminal_layers(std::span<const double> scores, std::size_t n);

/// Sensitivity-driven placement of n MLA layers. Ties go to the lowest
/// index and to the lexicographically smallest set. n = 0 gives no MLA
/// layer, n = 1 the global argmax. Throws InfeasibleError when the
/// terminal layers are too close for n layers.
HybridLayout smart_select(const SensitivityProfile& profile, std::size_t n);

/// Copy of `mamba` whose layer-i token mixer is taken from `mla`.
HybridModel substitute_mixer(const HybridModel& mamba, const HybridModel& mla, std::size_t i);

/// Sum over sequences and positions of KL(teacher || model), teacher-forced.
double total_kl(const HybridModel& teacher, const HybridModel& model,
                std::span<const Batch> data);

/// s_i = KL(teacher || mamba) - KL(teacher || mamba with layer i from mla),
/// each summed over the data. Variants run on up to `jobs` threads.
SensitivityProfile score_sensitivity(const HybridModel& teacher, const HybridModel& full_mamba,
                                     const HybridModel& full_mla, std::span<const Batch> data,
                                     std::size_t jobs = 1);

}  // namespace hforge

#endif  // HFORGE_SMART_HPP
