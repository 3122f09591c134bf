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

#include "hforge/model.hpp"

#include <cmath>
#include <functional>
#include <set>
#include <string>

#include "hforge/error.hpp"
#include "hforge/ops.hpp"
#include "hforge/rng.hpp"
#include "hforge/ssm.hpp"

namespace hforge {
namespace {

template <class W>
W read_mixer(const ParamStore& params, const std::string& prefix) {
  W w;
  w.visit([&](const char* name, Tensor& t) { t = params.get(prefix + name); });
  return w;
}

template <class V>
V bind_mixer(const VarMap& vars, const std::string& prefix) {
  V v;
  v.visit([&](const char* name, Var& slot) {
    auto it = vars.find(prefix + name);
    if (it == vars.end()) throw ConfigError("missing parameter '" + prefix + name + "'");
    slot = it->second;
  });
  return v;
}

template <class W>
std::set<std::string> mixer_names() {
  std::set<std::string> names;
  W w;
  w.visit([&](const char* name, const Tensor&) { names.insert(name); });
  return names;
}

const Var& lookup(const VarMap& vars, const std::string& path) {
  auto it = vars.find(path);
  if (it == vars.end()) throw ConfigError("missing parameter '" + path + "'");
  return it->second;
}

}  // namespace

std::string HybridModel::layer_prefix(std::size_t i) {
  return "layers." + std::to_string(i) + ".";
}

std::string HybridModel::mixer_prefix(std::size_t i) { return layer_prefix(i) + "mixer."; }

bool is_mixer_param(const std::string& path) {
  return path.rfind("layers.", 0) == 0 && path.find(".mixer.") != std::string::npos;
}

const MLAConfig& HybridModel::mla_config() const {
  if (!mla) throw ConfigError("model has MLA layers but no MLA config");
  return *mla;
}

AttentionWeights HybridModel::attention(std::size_t i) const {
  if (kind(i) != LayerKind::kMha) throw ConfigError("layer " + std::to_string(i) + " is not MHA");
  return read_mixer<AttentionWeights>(params, mixer_prefix(i));
}

MLAWeights HybridModel::latent_attention(std::size_t i) const {
  if (kind(i) != LayerKind::kMla) throw ConfigError("layer " + std::to_string(i) + " is not MLA");
  return read_mixer<MLAWeights>(params, mixer_prefix(i));
}

Mamba2Weights HybridModel::mamba2(std::size_t i) const {
  if (kind(i) != LayerKind::kMamba2) {
    throw ConfigError("layer " + std::to_string(i) + " is not MAMBA2");
  }
  return read_mixer<Mamba2Weights>(params, mixer_prefix(i));
}

MixerWeights HybridModel::mixer(std::size_t i) const {
  switch (kind(i)) {
    case LayerKind::kMha:
      return attention(i);
    case LayerKind::kMla:
      return latent_attention(i);
    case LayerKind::kMamba2:
      return mamba2(i);
  }
  throw ConfigError("unknown layer kind");
}

void HybridModel::set_mixer(std::size_t i, const MixerWeights& w) {
  if (i >= cfg.L) throw ConfigError("layer index " + std::to_string(i) + " out of range");
  const std::string prefix = mixer_prefix(i);
  std::vector<std::string> stale;
  for (const auto& [name, _] : params) {
    if (name.rfind(prefix, 0) == 0) stale.push_back(name);
  }
  for (const std::string& name : stale) params.erase(name);
  std::visit(
      [&](const auto& weights) {
        weights.visit([&](const char* name, const Tensor& t) { params.add(prefix + name, t); });
      },
      w);
  cfg.layer_kinds[i] = kind_of(w);
}

void HybridModel::validate() const {
  cfg.validate();
  if (cfg.count(LayerKind::kMla) > 0) mla_config().validate(cfg);
  for (std::size_t i = 0; i < cfg.L; ++i) {
    const std::string prefix = mixer_prefix(i);
    std::set<std::string> present;
    for (const auto& [name, _] : params) {
      if (name.rfind(prefix, 0) == 0) present.insert(name.substr(prefix.size()));
    }
    std::set<std::string> expected;
    switch (kind(i)) {
      case LayerKind::kMha:
        expected = mixer_names<AttentionWeights>();
        break;
      case LayerKind::kMla:
        expected = mixer_names<MLAWeights>();
        break;
      case LayerKind::kMamba2:
        expected = mixer_names<Mamba2Weights>();
        break;
    }
    if (present != expected) {
      throw ConfigError("layer " + std::to_string(i) + " parameters do not match kind " +
                        std::string(layer_kind_name(kind(i))));
    }
    std::visit(
        [&](const auto& w) {
          using W = std::decay_t<decltype(w)>;
          if constexpr (std::is_same_v<W, MLAWeights>) {
            check_shapes(w, cfg, *mla);
          } else {
            check_shapes(w, cfg);
          }
        },
        mixer(i));
  }
}

HybridModel make_model(const ModelConfig& cfg, const std::optional<MLAConfig>& mla,
                       std::uint64_t seed) {
  cfg.validate();
  if (mla) mla->validate(cfg);
  HybridModel model;
  model.cfg = cfg;
  model.mla = mla;
  const std::size_t d = cfg.d;
  const std::size_t ff = cfg.ff_dim();
  Rng rng(mix_seed({seed, 0x656d626564ULL}));
  model.params.add("embed", rng.normal_tensor({cfg.vocab, d}, 1.0));
  model.params.add("final_norm", Tensor::full({d}, 1.0));
  model.params.add("lm_head", rng.normal_tensor({d, cfg.vocab}, 0.5 / std::sqrt(double(d))));
  for (std::size_t i = 0; i < cfg.L; ++i) {
    const std::string p = HybridModel::layer_prefix(i);
    Rng layer(mix_seed({seed, 0x6c61796572ULL, i}));
    model.params.add(p + "norm_mixer", Tensor::full({d}, 1.0));
    model.params.add(p + "norm_mlp", Tensor::full({d}, 1.0));
    model.params.add(p + "mlp.w_gate", layer.normal_tensor({d, ff}, 1.0 / std::sqrt(double(d))));
    model.params.add(p + "mlp.w_up", layer.normal_tensor({d, ff}, 1.0 / std::sqrt(double(d))));
    model.params.add(p + "mlp.w_down", layer.normal_tensor({ff, d}, 1.0 / std::sqrt(double(ff))));
    const MLAConfig* m = mla ? &*mla : nullptr;
    model.set_mixer(i, init_random(cfg.layer_kinds[i], cfg, m, mix_seed({seed, 0x6d6978ULL, i})));
  }
  apply_storage_precision(model);
  return model;
}

namespace {

HybridModel rebuild_mixers(const HybridModel& teacher, LayerKind kind,
                           const std::optional<MLAConfig>& mla,
                           const std::function<MixerWeights(std::size_t)>& make) {
  if (kind == LayerKind::kMla) {
    if (!mla) throw ConfigError("MLA layers need an MLA config");
    mla->validate(teacher.cfg);
  }
  HybridModel out = teacher;
  if (kind == LayerKind::kMla) out.mla = mla;
  for (std::size_t i = 0; i < teacher.cfg.L; ++i) {
    if (teacher.kind(i) != LayerKind::kMha) {
      throw ConfigError("layer " + std::to_string(i) + " of the source model is not MHA");
    }
    out.set_mixer(i, make(i));
  }
  apply_storage_precision(out);
  return out;
}

}  // namespace

HybridModel upcycle_model(const HybridModel& teacher, LayerKind kind,
                          const std::optional<MLAConfig>& mla) {
  return rebuild_mixers(teacher, kind, mla, [&](std::size_t i) -> MixerWeights {
    switch (kind) {
      case LayerKind::kMla:
        return init_mla_from_attention(teacher.attention(i), teacher.cfg, *mla);
      case LayerKind::kMamba2:
        return init_mamba2_from_attention(teacher.attention(i), teacher.cfg);
      case LayerKind::kMha:
        break;
    }
    return teacher.attention(i);
  });
}

HybridModel random_mixer_model(const HybridModel& teacher, LayerKind kind,
                               const std::optional<MLAConfig>& mla, std::uint64_t seed) {
  return rebuild_mixers(teacher, kind, mla, [&](std::size_t i) {
    return init_random(kind, teacher.cfg, mla ? &*mla : nullptr, mix_seed({seed, 0x6d6978ULL, i}));
  });
}

void apply_storage_precision(HybridModel& model) {
  for (auto& [_, e] : model.params) e.value.cast(model.cfg.dtype);
}

Var forward(const VarMap& vars, const HybridModel& model,
            std::span<const std::int32_t> tokens, std::size_t batch, std::size_t seq_len,
            ForwardTrace* trace, std::vector<KVCache>* caches) {
  const ModelConfig& cfg = model.cfg;
  if (tokens.size() != batch * seq_len || seq_len == 0) {
    throw ShapeError("forward: " + std::to_string(tokens.size()) + " tokens for batch " +
                     std::to_string(batch) + " x " + std::to_string(seq_len));
  }
  if (caches != nullptr && (batch != 1 || caches->size() != cfg.L)) {
    throw ShapeError("forward: cached decoding needs batch 1 and one cache per layer");
  }
  Var x = ops::embedding(lookup(vars, "embed"), tokens);
  for (std::size_t i = 0; i < cfg.L; ++i) {
    const std::string p = HybridModel::layer_prefix(i);
    const std::string mp = HybridModel::mixer_prefix(i);
    Var h = ops::rms_norm(x, lookup(vars, p + "norm_mixer"), cfg.norm_eps);
    KVCache* cache = caches != nullptr ? &(*caches)[i] : nullptr;
    Var m;
    switch (cfg.layer_kinds[i]) {
      case LayerKind::kMha: {
        FullKV* c = cache ? std::get_if<FullKV>(cache) : nullptr;
        if (cache && !c) throw ShapeError("layer " + std::to_string(i) + ": cache is not FullKV");
        m = mha_mixer(bind_mixer<AttentionVars>(vars, mp), h, cfg, batch, seq_len, c);
        break;
      }
      case LayerKind::kMla: {
        LatentKV* c = cache ? std::get_if<LatentKV>(cache) : nullptr;
        if (cache && !c) throw ShapeError("layer " + std::to_string(i) + ": cache is not LatentKV");
        m = mla_mixer(bind_mixer<MLAVars>(vars, mp), h, cfg, model.mla_config(), batch, seq_len,
                      c);
        break;
      }
      case LayerKind::kMamba2: {
        SsmState* c = cache ? std::get_if<SsmState>(cache) : nullptr;
        if (cache && !c) throw ShapeError("layer " + std::to_string(i) + ": cache is not SsmState");
        m = mamba2_mixer(bind_mixer<Mamba2Vars>(vars, mp), h, cfg, batch, seq_len, c);
        break;
      }
    }
    if (trace != nullptr) trace->mixer_outputs.push_back(m);
    x = ops::add(x, m);
    Var g = ops::rms_norm(x, lookup(vars, p + "norm_mlp"), cfg.norm_eps);
    Var gate = ops::silu(ops::matmul(g, lookup(vars, p + "mlp.w_gate")));
    Var up = ops::matmul(g, lookup(vars, p + "mlp.w_up"));
    x = ops::add(x, ops::matmul(ops::mul(gate, up), lookup(vars, p + "mlp.w_down")));
  }
  x = ops::rms_norm(x, lookup(vars, "final_norm"), cfg.norm_eps);
  return ops::matmul(x, lookup(vars, "lm_head"));
}

Tensor forward_logits(const HybridModel& model, std::span<const std::int32_t> tokens,
                      std::size_t batch, std::size_t seq_len) {
  Tape tape(false);
  VarMap vars = bind(tape, model.params);
  return forward(vars, model, tokens, batch, seq_len).value();
}

std::vector<KVCache> make_caches(const HybridModel& model) {
  std::vector<KVCache> caches;
  caches.reserve(model.cfg.L);
  for (LayerKind k : model.cfg.layer_kinds) {
    switch (k) {
      case LayerKind::kMha:
        caches.emplace_back(FullKV{});
        break;
      case LayerKind::kMla:
        caches.emplace_back(LatentKV{});
        break;
      case LayerKind::kMamba2:
        caches.emplace_back(make_ssm_state(model.cfg));
        break;
    }
  }
  return caches;
}

Decoder::Decoder(const HybridModel& model)
    : model_(model), tape_(false), caches_(make_caches(model)) {
  vars_ = bind(tape_, model_.params);
  mark_ = tape_.size();
}

Tensor Decoder::feed(std::span<const std::int32_t> tokens) {
  Tensor out = forward(vars_, model_, tokens, 1, tokens.size(), nullptr, &caches_).value();
  tape_.rewind(mark_);
  tokens_ += tokens.size();
  return out;
}

std::size_t Decoder::kv_cache_bytes() const {
  std::size_t total = 0;
  for (const KVCache& c : caches_) total += kv_byte_size(c, model_.cfg.elem_bytes());
  return total;
}

std::size_t Decoder::ssm_state_bytes() const {
  std::size_t total = 0;
  for (const KVCache& c : caches_) {
    if (const auto* s = std::get_if<SsmState>(&c)) total += byte_size(*s, model_.cfg.elem_bytes());
  }
  return total;
}

}  // namespace hforge
