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

#ifndef HFORGE_SSM_HPP
#define HFORGE_SSM_HPP

#include <cstddef>

#include "hforge/autograd.hpp"
#include "hforge/cache.hpp"
#include "hforge/config.hpp"
#include "hforge/tensor.hpp"

namespace hforge {

/// Mamba2 mixer parameters, k = conv width.
///   w_x, w_b: d x (n_kv d_h); w_c: d x (n_h d_h)
///   conv_x, conv_b: k x (n_kv d_h); conv_c: k x (n_h d_h)
///   a_log, dt_bias, d_skip: n_h; w_dt: d x n_h; w_out: (n_h d_h) x d
/// The per-head decay is a = -exp(a_log).
template <class T>
struct Mamba2Params {
  T w_x, w_b, w_c, conv_x, conv_b, conv_c, a_log, w_dt, dt_bias, d_skip, w_out;

  template <class F>
  void visit(F&& f) {
    each(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    each(*this, f);
  }

 private:
  template <class Self, class F>
  static void each(Self& self, F& f) {
    f("w_x", self.w_x);
    f("w_b", self.w_b);
    f("w_c", self.w_c);
    f("conv_x", self.conv_x);
    f("conv_b", self.conv_b);
    f("conv_c", self.conv_c);
    f("a_log", self.a_log);
    f("w_dt", self.w_dt);
    f("dt_bias", self.dt_bias);
    f("d_skip", self.d_skip);
    f("w_out", self.w_out);
  }
};

using Mamba2Weights = Mamba2Params<Tensor>;
using Mamba2Vars = Mamba2Params<Var>;

void check_shapes(const Mamba2Weights& w, const ModelConfig& cfg);

/// Sets the recurrence parameters to their defaults: exp(a) log-spaced over
/// heads in [0.5, 0.999], softplus(dt_bias) log-spaced in [0.001, 0.1],
/// w_dt = 0, D = 1, and identity convolutions (current-step tap 1).
void init_mamba2_dynamics(Mamba2Weights& w, const ModelConfig& cfg);

/// Zero state with every buffer allocated.
SsmState make_ssm_state(const ModelConfig& cfg);
/// Bytes of one layer's state; independent of the number of tokens seen.
std::size_t ssm_state_bytes(const ModelConfig& cfg, std::size_t elem_bytes);

/// Differentiable Mamba2 mixer over `batch` sequences. With a state
/// (batch 1) the recurrence and convolutions continue from it and it is
/// updated in place.
Var mamba2_mixer(const Mamba2Vars& w, const Var& h, const ModelConfig& cfg, std::size_t batch,
                 std::size_t seq_len, SsmState* state = nullptr);

/// Step-by-step recurrence over one sequence (h is t x d).
Tensor mamba2_forward_seq(const Tensor& h, const Mamba2Weights& w, const ModelConfig& cfg,
                          SsmState* state = nullptr);

/// Same output computed chunk by chunk with cumulative decay products.
/// chunk == 1 and chunk >= t run the sequential recurrence.
Tensor mamba2_forward_chunked(const Tensor& h, const Mamba2Weights& w, const ModelConfig& cfg,
                              std::size_t chunk);

}  // namespace hforge

#endif  // HFORGE_SSM_HPP
