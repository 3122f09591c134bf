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

#include "hforge/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hforge/error.hpp"
#include "hforge/linalg.hpp"
#include "hforge/ops.hpp"

namespace hforge {
namespace {

void expect_shape(const Tensor& t, const Shape& shape, const char* name) {
  if (t.shape() != shape) {
    throw ShapeError(std::string(name) + " is " + shape_string(t.shape()) + ", expected " +
                     shape_string(shape));
  }
}

// Log-spaced value i of n in [lo, hi].
double log_space(double lo, double hi, std::size_t i, std::size_t n) {
  const double f = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
  return std::exp(std::log(lo) + f * (std::log(hi) - std::log(lo)));
}

struct ScanInputs {
  Var x, b, c, dt, a, d;
};

// Convolution of the new rows of one path, continuing `tail` and replacing
// it with the last width-1 pre-convolution rows.
Var conv_path(const Var& pre, const Var& kernel, std::size_t batch, std::size_t seq_len,
              Tensor* tail) {
  if (tail == nullptr) return ops::causal_conv1d(pre, kernel, batch, seq_len);
  Var out = ops::causal_conv1d(pre, kernel, 1, seq_len, tail);
  const std::size_t keep = tail->rows();
  if (keep > 0) {
    Tensor joined = *tail;
    joined.append_rows(pre.value());
    std::copy_n(joined.data() + (joined.rows() - keep) * joined.cols(), keep * joined.cols(),
                tail->data());
  }
  return out;
}

ScanInputs scan_inputs(const Mamba2Vars& w, const Var& h, const ModelConfig& cfg,
                       std::size_t batch, std::size_t seq_len, SsmState* state) {
  if (h.rows() != batch * seq_len || h.cols() != cfg.d) {
    throw ShapeError("mamba2 input " + shape_string(h.shape()) + " for batch " +
                     std::to_string(batch) + " x " + std::to_string(seq_len) +
                     " tokens of width " + std::to_string(cfg.d));
  }
  if (state != nullptr) {
    if (batch != 1) throw ShapeError("stateful decoding requires batch 1");
    if (state->h.empty()) *state = make_ssm_state(cfg);
    const SsmState ref = make_ssm_state(cfg);
    if (state->h.shape() != ref.h.shape() || state->conv_x.shape() != ref.conv_x.shape() ||
        state->conv_b.shape() != ref.conv_b.shape() ||
        state->conv_c.shape() != ref.conv_c.shape()) {
      throw ShapeError("ssm state does not match the model config");
    }
  }
  ScanInputs in;
  in.x = conv_path(ops::matmul(h, w.w_x), w.conv_x, batch, seq_len,
                   state ? &state->conv_x : nullptr);
  in.b = conv_path(ops::matmul(h, w.w_b), w.conv_b, batch, seq_len,
                   state ? &state->conv_b : nullptr);
  in.c = conv_path(ops::matmul(h, w.w_c), w.conv_c, batch, seq_len,
                   state ? &state->conv_c : nullptr);
  if (cfg.n_kv != cfg.n_h) {
    // Key/value groups are shared across query heads after the convolution.
    const std::size_t group = cfg.n_h / cfg.n_kv;
    std::vector<std::size_t> rep;
    rep.reserve(cfg.n_h * cfg.d_h);
    for (std::size_t head = 0; head < cfg.n_h; ++head) {
      for (std::size_t j = 0; j < cfg.d_h; ++j) rep.push_back((head / group) * cfg.d_h + j);
    }
    in.x = ops::gather_cols(in.x, rep);
    in.b = ops::gather_cols(in.b, std::move(rep));
  }
  in.dt = ops::softplus(ops::add_row(ops::matmul(h, w.w_dt), w.dt_bias));
  in.a = ops::neg(ops::exp(w.a_log));
  in.d = w.d_skip;
  return in;
}

Mamba2Vars constants(Tape& tape, const Mamba2Weights& w) {
  return Mamba2Vars{tape.constant(w.w_x),    tape.constant(w.w_b),     tape.constant(w.w_c),
                    tape.constant(w.conv_x), tape.constant(w.conv_b),  tape.constant(w.conv_c),
                    tape.constant(w.a_log),  tape.constant(w.w_dt),    tape.constant(w.dt_bias),
                    tape.constant(w.d_skip), tape.constant(w.w_out)};
}

// Chunked evaluation of the scan for one sequence (batch 1):
// within a chunk starting at s with cumulative log decay l_i,
//   y_i = e^{l_i} S^T c_i + sum_{j<=i} e^{l_i - l_j} dt_j (c_i . b_j) x_j + D x_i
//   S'  = e^{l_n} S + sum_j e^{l_n - l_j} dt_j b_j x_j^T
Tensor chunked_scan(const ScanInputs& in, const ModelConfig& cfg, std::size_t chunk) {
  const Tensor& x = in.x.value();
  const Tensor& b = in.b.value();
  const Tensor& c = in.c.value();
  const Tensor& dt = in.dt.value();
  const Tensor& a = in.a.value();
  const Tensor& dsk = in.d.value();
  const std::size_t T = x.rows();
  const std::size_t H = cfg.n_h;
  const std::size_t N = cfg.d_h;
  const std::size_t P = cfg.d_h;
  Tensor y = Tensor::matrix(T, H * P);
  std::vector<double> S(N * P);
  std::vector<double> l(chunk);
  for (std::size_t head = 0; head < H; ++head) {
    std::fill(S.begin(), S.end(), 0.0);
    for (std::size_t s = 0; s < T; s += chunk) {
      const std::size_t n = std::min(chunk, T - s);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += dt[(s + i) * H + head] * a[head];
        l[i] = acc;
      }
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t r = s + i;
        const double* ci = c.data() + r * H * N + head * N;
        double* yi = y.data() + r * H * P + head * P;
        const double carry = std::exp(l[i]);
        for (std::size_t nn = 0; nn < N; ++nn) {
          const double w = carry * ci[nn];
          const double* Sn = S.data() + nn * P;
          for (std::size_t p = 0; p < P; ++p) yi[p] += w * Sn[p];
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const std::size_t rj = s + j;
          const double* bj = b.data() + rj * H * N + head * N;
          double cb = 0.0;
          for (std::size_t nn = 0; nn < N; ++nn) cb += ci[nn] * bj[nn];
          const double w = std::exp(l[i] - l[j]) * dt[rj * H + head] * cb;
          const double* xj = x.data() + rj * H * P + head * P;
          for (std::size_t p = 0; p < P; ++p) yi[p] += w * xj[p];
        }
        const double* xi = x.data() + r * H * P + head * P;
        for (std::size_t p = 0; p < P; ++p) yi[p] += dsk[head] * xi[p];
      }
      const double total = std::exp(l[n - 1]);
      for (double& v : S) v *= total;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t rj = s + j;
        const double w = std::exp(l[n - 1] - l[j]) * dt[rj * H + head];
        const double* bj = b.data() + rj * H * N + head * N;
        const double* xj = x.data() + rj * H * P + head * P;
        for (std::size_t nn = 0; nn < N; ++nn) {
          double* Sn = S.data() + nn * P;
          const double u = w * bj[nn];
          for (std::size_t p = 0; p < P; ++p) Sn[p] += u * xj[p];
        }
      }
    }
  }
  return y;
}

}  // namespace

void check_shapes(const Mamba2Weights& w, const ModelConfig& cfg) {
  const std::size_t kv = cfg.n_kv * cfg.d_h;
  const std::size_t q = cfg.n_h * cfg.d_h;
  const std::size_t k = cfg.conv_width;
  expect_shape(w.w_x, {cfg.d, kv}, "w_x");
  expect_shape(w.w_b, {cfg.d, kv}, "w_b");
  expect_shape(w.w_c, {cfg.d, q}, "w_c");
  expect_shape(w.conv_x, {k, kv}, "conv_x");
  expect_shape(w.conv_b, {k, kv}, "conv_b");
  expect_shape(w.conv_c, {k, q}, "conv_c");
  expect_shape(w.a_log, {cfg.n_h}, "a_log");
  expect_shape(w.w_dt, {cfg.d, cfg.n_h}, "w_dt");
  expect_shape(w.dt_bias, {cfg.n_h}, "dt_bias");
  expect_shape(w.d_skip, {cfg.n_h}, "d_skip");
  expect_shape(w.w_out, {q, cfg.d}, "w_out");
}

void init_mamba2_dynamics(Mamba2Weights& w, const ModelConfig& cfg) {
  const std::size_t H = cfg.n_h;
  w.a_log = Tensor::vector(H);
  w.dt_bias = Tensor::vector(H);
  w.d_skip = Tensor::full({H}, 1.0);
  w.w_dt = Tensor::matrix(cfg.d, H);
  for (std::size_t i = 0; i < H; ++i) {
    const double decay = log_space(0.5, 0.999, i, H);
    w.a_log[i] = std::log(-std::log(decay));
    const double dt = log_space(0.001, 0.1, i, H);
    w.dt_bias[i] = dt + std::log(-std::expm1(-dt));
  }
  const std::size_t k = cfg.conv_width;
  for (Tensor* conv : {&w.conv_x, &w.conv_b, &w.conv_c}) {
    const std::size_t channels = conv == &w.conv_c ? cfg.n_h * cfg.d_h : cfg.n_kv * cfg.d_h;
    *conv = Tensor::matrix(k, channels);
    for (std::size_t ch = 0; ch < channels; ++ch) (*conv)(k - 1, ch) = 1.0;
  }
}

SsmState make_ssm_state(const ModelConfig& cfg) {
  const std::size_t tail = cfg.conv_width - 1;
  SsmState s;
  s.h = Tensor(Shape{cfg.n_h, cfg.d_h, cfg.d_h});
  s.conv_x = Tensor(Shape{tail, cfg.n_kv * cfg.d_h});
  s.conv_b = Tensor(Shape{tail, cfg.n_kv * cfg.d_h});
  s.conv_c = Tensor(Shape{tail, cfg.n_h * cfg.d_h});
  return s;
}

std::size_t ssm_state_bytes(const ModelConfig& cfg, std::size_t elem_bytes) {
  const std::size_t tail = cfg.conv_width - 1;
  return (cfg.n_h * cfg.d_h * cfg.d_h + tail * (2 * cfg.n_kv * cfg.d_h + cfg.n_h * cfg.d_h)) *
         elem_bytes;
}

Var mamba2_mixer(const Mamba2Vars& w, const Var& h, const ModelConfig& cfg, std::size_t batch,
                 std::size_t seq_len, SsmState* state) {
  ScanInputs in = scan_inputs(w, h, cfg, batch, seq_len, state);
  ops::ScanSpec spec{.batch = batch,
                     .seq_len = seq_len,
                     .n_heads = cfg.n_h,
                     .state_dim = cfg.d_h,
                     .head_dim = cfg.d_h};
  Var y;
  if (state != nullptr) {
    Tensor next;
    y = ops::ssm_scan(in.x, in.b, in.c, in.dt, in.a, in.d, spec, &state->h, &next);
    state->h = std::move(next);
    state->tokens += seq_len;
  } else {
    y = ops::ssm_scan(in.x, in.b, in.c, in.dt, in.a, in.d, spec);
  }
  return ops::matmul(y, w.w_out);
}

Tensor mamba2_forward_seq(const Tensor& h, const Mamba2Weights& w, const ModelConfig& cfg,
                          SsmState* state) {
  check_shapes(w, cfg);
  Tape tape(false);
  return mamba2_mixer(constants(tape, w), tape.constant(h), cfg, 1, h.rows(), state).value();
}

Tensor mamba2_forward_chunked(const Tensor& h, const Mamba2Weights& w, const ModelConfig& cfg,
                              std::size_t chunk) {
  if (chunk == 0) throw ConfigError("chunk size must be at least 1");
  if (chunk == 1 || chunk >= h.rows()) return mamba2_forward_seq(h, w, cfg);
  check_shapes(w, cfg);
  Tape tape(false);
  ScanInputs in = scan_inputs(constants(tape, w), tape.constant(h), cfg, 1, h.rows(), nullptr);
  return matmul(chunked_scan(in, cfg, chunk), w.w_out);
}

}  // namespace hforge
