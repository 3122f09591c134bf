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

#ifndef HFORGE_LINALG_HPP
#define HFORGE_LINALG_HPP

#include <cstddef>

#include "hforge/tensor.hpp"

namespace hforge {

/// C = op(A) * op(B) where op is an optional transpose. Rank-2 operands.
Tensor gemm(const Tensor& a, bool transpose_a, const Tensor& b, bool transpose_b);
/// C += op(A) * op(B).
void gemm_accumulate(Tensor& c, const Tensor& a, bool transpose_a, const Tensor& b,
                     bool transpose_b);
inline Tensor matmul(const Tensor& a, const Tensor& b) { return gemm(a, false, b, false); }
Tensor transpose(const Tensor& a);

/// Columns [begin, begin + count) of a rank-2 tensor.
Tensor columns(const Tensor& a, std::size_t begin, std::size_t count);
/// Horizontal concatenation of two rank-2 tensors with equal row counts.
Tensor hconcat(const Tensor& a, const Tensor& b);

/// Truncated singular value decomposition A ~ U diag(S) V^T.
struct SvdFactors {
  Tensor u;  // m x r, orthonormal columns
  Tensor s;  // r, non-negative, non-increasing
  Tensor v;  // n x r, orthonormal columns

  std::size_t rank() const noexcept { return s.numel(); }
  /// U diag(S) V^T.
  Tensor reconstruct() const;
  /// diag(S) V^T, the r x n "up" factor.
  Tensor scaled_vt() const;
};

/// Best rank-r approximation in Frobenius norm via one-sided Jacobi.
///
/// Signs are fixed so that the first non-negligible entry of every U column
/// is non-negative, making the result a deterministic function of A. Throws
/// ConfigError when r is outside [1, min(m, n)] and ConvergenceError when
/// 100 * min(m, n) sweeps do not reduce the off-diagonal mass below 1e-12.
SvdFactors svd_truncated(const Tensor& a, std::size_t r);

/// All min(m, n) singular values, descending.
Tensor singular_values(const Tensor& a);

}  // namespace hforge

#endif  // HFORGE_LINALG_HPP
