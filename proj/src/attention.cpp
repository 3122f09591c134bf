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

#include "hforge/attention.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "hforge/error.hpp"
#include "hforge/ops.hpp"

namespace hforge {
namespace {

void expect_shape(const Tensor& t, std::size_t rows, std::size_t cols, const char* name) {
  if (t.rank() != 2 || t.rows() != rows || t.cols() != cols) {
    throw ShapeError(std::string(name) + " is " + shape_string(t.shape()) + ", expected [" +
                     std::to_string(rows) + ", " + std::to_string(cols) + "]");
  }
}

void check_input(const Var& h, const ModelConfig& cfg, std::size_t batch, std::size_t seq_len,
                 bool cached) {
  if (h.rows() != batch * seq_len || h.cols() != cfg.d) {
    throw ShapeError("mixer input " + shape_string(h.shape()) + " for batch " +
                     std::to_string(batch) + " x " + std::to_string(seq_len) + " tokens of width " +
                     std::to_string(cfg.d));
  }
  if (cached && batch != 1) throw ShapeError("cached decoding requires batch 1");
}

std::vector<std::size_t> positions(std::size_t batch, std::size_t seq_len, std::size_t offset) {
  std::vector<std::size_t> pos(batch * seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq_len; ++t) pos[b * seq_len + t] = offset + t;
  }
  return pos;
}

// Appends new rows to a cached tensor and returns the full history as a
// constant on the tape.
Var extend(Tensor& cached, const Var& fresh) {
  Tape& tape = fresh.tape();
  if (cached.empty()) {
    cached = fresh.value();
    return fresh;
  }
  Var history = tape.constant(cached);
  cached.append_rows(fresh.value());
  return ops::concat_rows(history, fresh);
}

}  // namespace

void check_shapes(const AttentionWeights& w, const ModelConfig& cfg) {
  expect_shape(w.w_q, cfg.d, cfg.n_h * cfg.d_h, "w_q");
  expect_shape(w.w_k, cfg.d, cfg.n_kv * cfg.d_h, "w_k");
  expect_shape(w.w_v, cfg.d, cfg.n_kv * cfg.d_h, "w_v");
  expect_shape(w.w_o, cfg.n_h * cfg.d_h, cfg.d, "w_o");
}

void check_shapes(const MLAWeights& w, const ModelConfig& cfg, const MLAConfig& m) {
  expect_shape(w.w_dq, cfg.d, m.r_q, "w_dq");
  expect_shape(w.w_uq, m.r_q, cfg.n_h * m.d_qk, "w_uq");
  expect_shape(w.w_qr, m.r_q, cfg.n_h * m.d_r, "w_qr");
  expect_shape(w.w_dkv, cfg.d, m.r_kv, "w_dkv");
  expect_shape(w.w_uk, m.r_kv, cfg.n_kv * m.d_qk, "w_uk");
  expect_shape(w.w_uv, m.r_kv, cfg.n_kv * m.d_v, "w_uv");
  expect_shape(w.w_kr, cfg.d, m.d_r, "w_kr");
  expect_shape(w.w_o, cfg.n_h * m.d_v, cfg.d, "w_o");
}

Tensor rope_apply(const Tensor& x, std::size_t heads, std::span<const std::size_t> positions,
                  double base) {
  if (heads == 0 || x.cols() % heads != 0) {
    throw ShapeError("rope_apply: " + std::to_string(x.cols()) + " columns over " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t dim = x.cols() / heads;
  if (dim % 2 != 0) throw ShapeError("rope_apply: odd rotary dimension " + std::to_string(dim));
  Tape tape(false);
  return ops::rope(tape.constant(x), heads, dim, positions, base).value();
}

Var mha_mixer(const AttentionVars& w, const Var& h, const ModelConfig& cfg, std::size_t batch,
              std::size_t seq_len, FullKV* cache) {
  check_input(h, cfg, batch, seq_len, cache != nullptr);
  const std::size_t offset = cache != nullptr ? cache->tokens() : 0;
  const std::vector<std::size_t> pos = positions(batch, seq_len, offset);
  Var q = ops::rope(ops::matmul(h, w.w_q), cfg.n_h, cfg.d_h, pos, cfg.rope_base);
  Var k = ops::rope(ops::matmul(h, w.w_k), cfg.n_kv, cfg.d_h, pos, cfg.rope_base);
  Var v = ops::matmul(h, w.w_v);
  if (cache != nullptr) {
    k = extend(cache->k, k);
    v = extend(cache->v, v);
  }
  ops::AttentionSpec spec{.batch = batch,
                          .q_len = seq_len,
                          .kv_len = offset + seq_len,
                          .n_heads = cfg.n_h,
                          .n_kv_heads = cfg.n_kv,
                          .d_k = cfg.d_h,
                          .d_v = cfg.d_h,
                          .scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_h))};
  return ops::matmul(ops::causal_attention(q, k, v, spec), w.w_o);
}

Var mla_mixer(const MLAVars& w, const Var& h, const ModelConfig& cfg, const MLAConfig& m,
              std::size_t batch, std::size_t seq_len, LatentKV* cache) {
  check_input(h, cfg, batch, seq_len, cache != nullptr);
  const std::size_t offset = cache != nullptr ? cache->tokens() : 0;
  const std::vector<std::size_t> pos = positions(batch, seq_len, offset);
  Var c_q = ops::matmul(h, w.w_dq);
  Var q_c = ops::matmul(c_q, w.w_uq);
  Var q_r = ops::rope(ops::matmul(c_q, w.w_qr), cfg.n_h, m.d_r, pos, cfg.rope_base);
  Var c_kv = ops::matmul(h, w.w_dkv);
  Var k_r = ops::rope(ops::matmul(h, w.w_kr), 1, m.d_r, pos, cfg.rope_base);
  if (cache != nullptr) {
    c_kv = extend(cache->c_kv, c_kv);
    k_r = extend(cache->k_r, k_r);
  }
  Var k_c = ops::matmul(c_kv, w.w_uk);
  Var v = ops::matmul(c_kv, w.w_uv);

  // Per head: [content part | rotary part]; the rotary key is shared.
  const std::size_t d_k = m.d_qk + m.d_r;
  std::vector<std::size_t> q_index;
  q_index.reserve(cfg.n_h * d_k);
  for (std::size_t head = 0; head < cfg.n_h; ++head) {
    for (std::size_t j = 0; j < m.d_qk; ++j) q_index.push_back(head * m.d_qk + j);
    for (std::size_t j = 0; j < m.d_r; ++j) q_index.push_back(cfg.n_h * m.d_qk + head * m.d_r + j);
  }
  std::vector<std::size_t> k_index;
  k_index.reserve(cfg.n_kv * d_k);
  for (std::size_t head = 0; head < cfg.n_kv; ++head) {
    for (std::size_t j = 0; j < m.d_qk; ++j) k_index.push_back(head * m.d_qk + j);
    for (std::size_t j = 0; j < m.d_r; ++j) k_index.push_back(cfg.n_kv * m.d_qk + j);
  }
  const Var q_parts[2] = {q_c, q_r};
  const Var k_parts[2] = {k_c, k_r};
  Var q = ops::gather_cols(ops::concat_cols(q_parts), std::move(q_index));
  Var k = ops::gather_cols(ops::concat_cols(k_parts), std::move(k_index));

  ops::AttentionSpec spec{.batch = batch,
                          .q_len = seq_len,
                          .kv_len = offset + seq_len,
                          .n_heads = cfg.n_h,
                          .n_kv_heads = cfg.n_kv,
                          .d_k = d_k,
                          .d_v = m.d_v,
                          .scale = 1.0 / std::sqrt(static_cast<double>(d_k))};
  return ops::matmul(ops::causal_attention(q, k, v, spec), w.w_o);
}

Tensor mha_forward(const Tensor& h, const AttentionWeights& w, const ModelConfig& cfg,
                   FullKV* cache) {
  check_shapes(w, cfg);
  Tape tape(false);
  AttentionVars vars{tape.constant(w.w_q), tape.constant(w.w_k), tape.constant(w.w_v),
                     tape.constant(w.w_o)};
  return mha_mixer(vars, tape.constant(h), cfg, 1, h.rows(), cache).value();
}

Tensor mla_forward(const Tensor& h, const MLAWeights& w, const ModelConfig& cfg,
                   const MLAConfig& mcfg, LatentKV* cache) {
  check_shapes(w, cfg, mcfg);
  Tape tape(false);
  MLAVars vars{tape.constant(w.w_dq),  tape.constant(w.w_uq), tape.constant(w.w_qr),
               tape.constant(w.w_dkv), tape.constant(w.w_uk), tape.constant(w.w_uv),
               tape.constant(w.w_kr),  tape.constant(w.w_o)};
  return mla_mixer(vars, tape.constant(h), cfg, mcfg, 1, h.rows(), cache).value();
}

std::size_t kv_bytes(LayerKind kind, const ModelConfig& cfg, const MLAConfig* mcfg,
                     std::size_t t, std::size_t elem_bytes) {
  switch (kind) {
    case LayerKind::kMha:
      return 2 * cfg.n_kv * cfg.d_h * t * elem_bytes;
    case LayerKind::kMla:
      if (mcfg == nullptr) throw ConfigError("kv_bytes: MLA layer without an MLA config");
      return (mcfg->r_kv + mcfg->d_r) * t * elem_bytes;
    case LayerKind::kMamba2:
      return 0;
  }
  return 0;
}

}  // namespace hforge
