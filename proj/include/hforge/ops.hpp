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

#ifndef HFORGE_OPS_HPP
#define HFORGE_OPS_HPP

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hforge/autograd.hpp"

// Differentiable primitives. Every op checks shapes, computes its value
// eagerly and records a backward closure when any input requires grad.
namespace hforge::ops {

Var matmul(const Var& a, const Var& b);
/// a * b^T.
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// Adds a length-cols vector to every row.
Var add_row(const Var& a, const Var& bias);
Var scale(const Var& a, double factor);
Var neg(const Var& a);

Var exp(const Var& a);
Var log(const Var& a);
Var softplus(const Var& a);
Var silu(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
/// -sum_r logp(r, target[r]) over rows whose target is non-negative.
Var nll_rows(const Var& log_probs, std::span<const std::int32_t> targets);

/// Row-wise x / sqrt(mean(x^2) + eps) * gain.
Var rms_norm(const Var& x, const Var& gain, double eps);

/// Depthwise causal convolution along the sequence axis. x holds `batch`
/// sequences of `seq_len` rows; w is [width x channels] and its last row
/// multiplies the current step. `history`, when given (batch == 1), supplies
/// the width-1 inputs that precede the first row.
Var causal_conv1d(const Var& x, const Var& w, std::size_t batch, std::size_t seq_len,
                  const Tensor* history = nullptr);

Var slice_cols(const Var& x, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(const Var& a, const Var& b);
/// y[:, j] = x[:, index[j]]; indices may repeat.
Var gather_cols(const Var& x, std::vector<std::size_t> index);
Var reshape(const Var& x, Shape shape);
/// Rows of `table` selected by token id.
Var embedding(const Var& table, std::span<const std::int32_t> ids);

/// Rotary embedding applied to `heads` consecutive blocks of `dim` columns;
/// pairs (2i, 2i+1) rotate by position * base^(-2i/dim).
Var rope(const Var& x, std::size_t heads, std::size_t dim, std::span<const std::size_t> positions,
         double base);

struct AttentionSpec {
  std::size_t batch = 1;
  std::size_t q_len = 0;   // query rows per sequence
  std::size_t kv_len = 0;  // key rows per sequence, >= q_len
  std::size_t n_heads = 0;
  std::size_t n_kv_heads = 0;
  std::size_t d_k = 0;
  std::size_t d_v = 0;
  double scale = 1.0;
};

/// Causal grouped-query attention. Query i of a sequence sits at absolute
/// position kv_len - q_len + i and sees keys 0..that position. Query head h
/// reads key/value head h / (n_heads / n_kv_heads). When `probs` is given
/// it receives the [batch * n_heads * q_len x kv_len] attention weights.
Var causal_attention(const Var& q, const Var& k, const Var& v, const AttentionSpec& spec,
                     Tensor* probs = nullptr);

struct ScanSpec {
  std::size_t batch = 1;
  std::size_t seq_len = 0;
  std::size_t n_heads = 0;
  std::size_t state_dim = 0;  // N, width of B and C per head
  std::size_t head_dim = 0;   // P, width of x and y per head
};

/// Selective state-space recurrence, per head:
///   S_t = exp(dt_t a) S_{t-1} + dt_t b_t x_t^T     (N x P)
///   y_t = S_t^T c_t + d x_t
/// x: [rows x H*P], b, c: [rows x H*N], dt: [rows x H], a, d: [H].
/// `init_state`/`final_state` ([H x N x P], batch == 1) carry the recurrent
/// state across calls; the initial state is treated as a constant.
Var ssm_scan(const Var& x, const Var& b, const Var& c, const Var& dt, const Var& a, const Var& d,
             const ScanSpec& spec, const Tensor* init_state = nullptr,
             Tensor* final_state = nullptr);

}  // namespace hforge::ops

#endif  // HFORGE_OPS_HPP
