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

#include "hforge/upcycle.hpp"

#include <cmath>
#include <string>

#include "hforge/error.hpp"
#include "hforge/rng.hpp"

namespace hforge {
namespace {

void check_rank(std::size_t r, std::size_t m, std::size_t n, const char* what) {
  if (r < 1 || r > std::min(m, n)) {
    throw ConfigError(std::string(what) + " = " + std::to_string(r) + " exceeds the " +
                      std::to_string(m) + " x " + std::to_string(n) + " matrix it factors");
  }
}

// Columns [head * stride + begin, + count) of every head, concatenated.
Tensor head_columns(const Tensor& a, std::size_t heads, std::size_t stride, std::size_t begin,
                    std::size_t count) {
  Tensor out = Tensor::matrix(a.rows(), heads * count);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t j = 0; j < count; ++j) {
        out(r, h * count + j) = a(r, h * stride + begin + j);
      }
    }
  }
  return out;
}

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols) {
  return rng.normal_tensor({rows, cols}, 1.0 / std::sqrt(static_cast<double>(rows)));
}

}  // namespace

LayerKind kind_of(const MixerWeights& w) noexcept {
  switch (w.index()) {
    case 0:
      return LayerKind::kMha;
    case 1:
      return LayerKind::kMla;
    default:
      return LayerKind::kMamba2;
  }
}

MLAFactors mla_factors(const AttentionWeights& w, const ModelConfig& cfg, const MLAConfig& m) {
  check_shapes(w, cfg);
  check_rank(m.r_q, w.w_q.rows(), w.w_q.cols(), "r_q");
  const Tensor kv = hconcat(w.w_k, w.w_v);
  check_rank(m.r_kv, kv.rows(), kv.cols(), "r_kv");
  SvdFactors q = svd_truncated(w.w_q, m.r_q);
  SvdFactors j = svd_truncated(kv, m.r_kv);
  return MLAFactors{q.u, q.scaled_vt(), j.u, j.scaled_vt()};
}

MLAWeights init_mla_from_attention(const AttentionWeights& w, const ModelConfig& cfg,
                                   const MLAConfig& m) {
  m.validate(cfg);
  MLAFactors f = mla_factors(w, cfg, m);
  const std::size_t kv_cols = cfg.n_kv * cfg.d_h;
  MLAWeights out;
  out.w_dq = f.w_dq;
  out.w_uq = head_columns(f.w_uq_full, cfg.n_h, cfg.d_h, 0, m.d_qk);
  out.w_qr = head_columns(f.w_uq_full, cfg.n_h, cfg.d_h, m.d_qk, m.d_r);
  out.w_dkv = f.w_dkv;
  out.w_uk = head_columns(columns(f.w_ukv_full, 0, kv_cols), cfg.n_kv, cfg.d_h, 0, m.d_qk);
  out.w_uv = columns(f.w_ukv_full, kv_cols, kv_cols);

  Tensor avg = Tensor::matrix(cfg.d, cfg.d_h);
  for (std::size_t r = 0; r < cfg.d; ++r) {
    for (std::size_t h = 0; h < cfg.n_kv; ++h) {
      for (std::size_t j = 0; j < cfg.d_h; ++j) avg(r, j) += w.w_k(r, h * cfg.d_h + j);
    }
    for (std::size_t j = 0; j < cfg.d_h; ++j) avg(r, j) /= static_cast<double>(cfg.n_kv);
  }
  out.w_kr = columns(avg, cfg.d_h - m.d_r, m.d_r);
  out.w_o = w.w_o;
  return out;
}

Tensor merge_query_up(const MLAWeights& w, const ModelConfig& cfg, const MLAConfig& m) {
  Tensor out = Tensor::matrix(w.w_uq.rows(), cfg.n_h * cfg.d_h);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t h = 0; h < cfg.n_h; ++h) {
      for (std::size_t j = 0; j < m.d_qk; ++j) out(r, h * cfg.d_h + j) = w.w_uq(r, h * m.d_qk + j);
      for (std::size_t j = 0; j < m.d_r; ++j) {
        out(r, h * cfg.d_h + m.d_qk + j) = w.w_qr(r, h * m.d_r + j);
      }
    }
  }
  return out;
}

Mamba2Weights init_mamba2_from_attention(const AttentionWeights& w, const ModelConfig& cfg) {
  check_shapes(w, cfg);
  Mamba2Weights out;
  out.w_x = w.w_v;
  out.w_b = w.w_k;
  out.w_c = w.w_q;
  out.w_out = w.w_o;
  init_mamba2_dynamics(out, cfg);
  return out;
}

MixerWeights init_random(LayerKind kind, const ModelConfig& cfg, const MLAConfig* mcfg,
                         std::uint64_t seed) {
  Rng rng(mix_seed({seed, static_cast<std::uint64_t>(kind)}));
  const std::size_t q = cfg.n_h * cfg.d_h;
  const std::size_t kv = cfg.n_kv * cfg.d_h;
  switch (kind) {
    case LayerKind::kMha:
      return AttentionWeights{gaussian(rng, cfg.d, q), gaussian(rng, cfg.d, kv),
                              gaussian(rng, cfg.d, kv), gaussian(rng, q, cfg.d)};
    case LayerKind::kMla: {
      if (mcfg == nullptr) throw ConfigError("init_random: MLA layer without an MLA config");
      const MLAConfig& m = *mcfg;
      MLAWeights w;
      w.w_dq = gaussian(rng, cfg.d, m.r_q);
      w.w_uq = gaussian(rng, m.r_q, cfg.n_h * m.d_qk);
      w.w_qr = gaussian(rng, m.r_q, cfg.n_h * m.d_r);
      w.w_dkv = gaussian(rng, cfg.d, m.r_kv);
      w.w_uk = gaussian(rng, m.r_kv, cfg.n_kv * m.d_qk);
      w.w_uv = gaussian(rng, m.r_kv, cfg.n_kv * m.d_v);
      w.w_kr = gaussian(rng, cfg.d, m.d_r);
      w.w_o = gaussian(rng, cfg.n_h * m.d_v, cfg.d);
      return w;
    }
    case LayerKind::kMamba2: {
      Mamba2Weights w;
      init_mamba2_dynamics(w, cfg);
      w.w_x = gaussian(rng, cfg.d, kv);
      w.w_b = gaussian(rng, cfg.d, kv);
      w.w_c = gaussian(rng, cfg.d, q);
      w.conv_x = gaussian(rng, cfg.conv_width, kv);
      w.conv_b = gaussian(rng, cfg.conv_width, kv);
      w.conv_c = gaussian(rng, cfg.conv_width, q);
      w.w_dt = gaussian(rng, cfg.d, cfg.n_h);
      w.w_out = gaussian(rng, q, cfg.d);
      return w;
    }
  }
  throw ConfigError("init_random: unknown layer kind");
}

}  // namespace hforge
