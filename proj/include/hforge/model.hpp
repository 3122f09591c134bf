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

#ifndef HFORGE_MODEL_HPP
#define HFORGE_MODEL_HPP

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hforge/autograd.hpp"
#include "hforge/cache.hpp"
#include "hforge/config.hpp"
#include "hforge/upcycle.hpp"

namespace hforge {

/// Decoder-only language model whose layers each hold one token mixer kind.
/// Blocks are pre-norm: x += mixer(norm(x)); x += mlp(norm(x)), with a
/// SiLU-gated MLP. Parameter paths:
///   embed, final_norm, lm_head
///   layers.{i}.norm_mixer, layers.{i}.norm_mlp
///   layers.{i}.mixer.{w_q, w_dkv, w_x, ...}
///   layers.{i}.mlp.{w_gate, w_up, w_down}
struct HybridModel {
  ModelConfig cfg;
  std::optional<MLAConfig> mla;
  ParamStore params;

  static std::string layer_prefix(std::size_t i);
  static std::string mixer_prefix(std::size_t i);

  LayerKind kind(std::size_t i) const { return cfg.layer_kinds.at(i); }
  const MLAConfig& mla_config() const;

  AttentionWeights attention(std::size_t i) const;
  MLAWeights latent_attention(std::size_t i) const;
  Mamba2Weights mamba2(std::size_t i) const;
  MixerWeights mixer(std::size_t i) const;

  /// Replaces the mixer of layer i, updating its kind.
  void set_mixer(std::size_t i, const MixerWeights& w);

  /// Throws unless every layer's parameters match its kind and shapes.
  void validate() const;
  std::size_t parameter_count() const noexcept { return params.parameter_count(); }
};

/// True when `path` belongs to a token mixer.
bool is_mixer_param(const std::string& path);

/// Randomly initialized model: embeddings N(0, 1), projections with std
/// 1/sqrt(fan_in), output head std 0.5/sqrt(d), unit norm gains.
HybridModel make_model(const ModelConfig& cfg, const std::optional<MLAConfig>& mla,
                       std::uint64_t seed);

/// Copy of an all-MHA `teacher` with every mixer rebuilt as `kind` from the
/// layer's attention weights (SVD factors for MLA, weight mapping for Mamba2).
HybridModel upcycle_model(const HybridModel& teacher, LayerKind kind,
                          const std::optional<MLAConfig>& mla);

/// Same, but the new mixers are randomly initialized. Embeddings, norms,
/// MLPs and the output head are still copied from the teacher.
HybridModel random_mixer_model(const HybridModel& teacher, LayerKind kind,
                               const std::optional<MLAConfig>& mla, std::uint64_t seed);

/// Rounds every parameter to the config's storage precision.
void apply_storage_precision(HybridModel& model);

struct ForwardTrace {
  std::vector<Var> mixer_outputs;  // per layer, before the residual add
};

/// Logits (batch*seq_len x vocab) for row-major token ids, recorded on the
/// tape `vars` are bound to. `caches`
/// (batch 1, one entry per layer) continues decoding from earlier calls.
Var forward(const VarMap& vars, const HybridModel& model,
            std::span<const std::int32_t> tokens, std::size_t batch, std::size_t seq_len,
            ForwardTrace* trace = nullptr, std::vector<KVCache>* caches = nullptr);

/// Inference-only logits.
Tensor forward_logits(const HybridModel& model, std::span<const std::int32_t> tokens,
                      std::size_t batch, std::size_t seq_len);

/// Empty per-layer caches matching the layer kinds.
std::vector<KVCache> make_caches(const HybridModel& model);

/// Incremental inference over one sequence with per-layer caches.
class Decoder {
 public:
  explicit Decoder(const HybridModel& model);

  /// Feeds the next tokens (prefill or single-step decode) and returns
  /// their logits, one row per token.
  Tensor feed(std::span<const std::int32_t> tokens);

  std::size_t tokens() const noexcept { return tokens_; }
  /// Key/value cache bytes at the model's storage width.
  std::size_t kv_cache_bytes() const;
  /// Recurrent-state bytes of the Mamba2 layers.
  std::size_t ssm_state_bytes() const;
  const std::vector<KVCache>& caches() const noexcept { return caches_; }

 private:
  const HybridModel& model_;
  Tape tape_;
  VarMap vars_;
  std::size_t mark_ = 0;
  std::size_t tokens_ = 0;
  std::vector<KVCache> caches_;
};

}  // namespace hforge

#endif  // HFORGE_MODEL_HPP
