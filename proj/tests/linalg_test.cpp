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

#include "hforge/linalg.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "hforge/error.hpp"
#include "hforge/rng.hpp"

namespace hforge {
namespace {

Tensor random_matrix(std::size_t m, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_tensor({m, n}, 1.0);
}

double orthonormality_error(const Tensor& q) {
  Tensor g = gemm(q, true, q, false);
  return max_abs_diff(g, Tensor::identity(q.cols()));
}

// Best rank-r Frobenius error by alternating least squares over factors
// X (m x r), Y (n x r), restarted from many random seeds.
double als_best_error(const Tensor& a, std::size_t r, int restarts, int iters) {
  const auto m = static_cast<Eigen::Index>(a.rows());
  const auto n = static_cast<Eigen::Index>(a.cols());
  Eigen::MatrixXd A(m, n);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) A(i, j) = a(i, j);
  }
  double best = std::numeric_limits<double>::infinity();
  for (int s = 0; s < restarts; ++s) {
    Rng rng(1000 + s);
    Eigen::MatrixXd Y(n, static_cast<Eigen::Index>(r));
    for (Eigen::Index i = 0; i < Y.size(); ++i) Y.data()[i] = rng.normal();
    Eigen::MatrixXd X;
    for (int it = 0; it < iters; ++it) {
      X = (Y.transpose() * Y).ldlt().solve(Y.transpose() * A.transpose()).transpose();
      Y = (X.transpose() * X).ldlt().solve(X.transpose() * A).transpose();
    }
    best = std::min(best, (A - X * Y.transpose()).norm());
  }
  return best;
}

TEST(SvdTest, IdentityHasUnitSingularValues) {
  SvdFactors f = svd_truncated(Tensor::identity(3), 3);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(f.s[i], 1.0, 1e-14);
  EXPECT_LT(max_abs_diff(f.reconstruct(), Tensor::identity(3)), 1e-14);
}

TEST(SvdTest, RankOneIsExact) {
  Tensor u(Shape{4, 1}, {2.0, 0.0, 0.0, 0.0});
  Tensor v(Shape{3, 1}, {0.0, 3.0, 0.0});
  Rng rng(3);
  // Rotate u and v to generic directions of the same norms.
  Tensor uu = rng.normal_tensor({4, 1}, 1.0);
  Tensor vv = rng.normal_tensor({3, 1}, 1.0);
  const double nu = frobenius_norm(uu);
  const double nv = frobenius_norm(vv);
  for (double& x : uu.values()) x *= 2.0 / nu;
  for (double& x : vv.values()) x *= 3.0 / nv;
  for (const auto& [p, q] : {std::pair{u, v}, std::pair{uu, vv}}) {
    Tensor a = gemm(p, false, q, true);
    SvdFactors f = svd_truncated(a, 1);
    EXPECT_NEAR(f.s[0], 6.0, 1e-12);
    EXPECT_LT(max_abs_diff(f.reconstruct(), a), 1e-13);
  }
}

TEST(SvdTest, MatchesAlternatingLeastSquaresOptimum) {
  Tensor a = random_matrix(8, 6, 42);
  SvdFactors f = svd_truncated(a, 3);
  Tensor diff = f.reconstruct();
  for (std::size_t i = 0; i < diff.numel(); ++i) diff[i] -= a[i];
  const double ours = frobenius_norm(diff);
  const double oracle = als_best_error(a, 3, 20, 3000);
  EXPECT_NEAR(ours, oracle, 1e-8);
}

TEST(SvdTest, FactorsAreOrthonormalAndSorted) {
  for (auto [m, n] : {std::pair<std::size_t, std::size_t>{9, 5}, {5, 9}, {7, 7}}) {
    Tensor a = random_matrix(m, n, 7 + m);
    const std::size_t r = std::min(m, n);
    SvdFactors f = svd_truncated(a, r);
    EXPECT_LT(orthonormality_error(f.u), 1e-6);
    EXPECT_LT(orthonormality_error(f.v), 1e-6);
    for (std::size_t i = 0; i + 1 < r; ++i) EXPECT_GE(f.s[i], f.s[i + 1]);
    EXPECT_GE(f.s[r - 1], 0.0);
  }
}

TEST(SvdTest, FullRankReconstructs) {
  for (auto [m, n] : {std::pair<std::size_t, std::size_t>{10, 4}, {4, 10}, {6, 6}}) {
    Tensor a = random_matrix(m, n, 11 * m + n);
    SvdFactors f = svd_truncated(a, std::min(m, n));
    EXPECT_LE(max_abs_diff(f.reconstruct(), a) / frobenius_norm(a), 1e-10);
    Tensor diff = f.reconstruct();
    for (std::size_t i = 0; i < diff.numel(); ++i) diff[i] -= a[i];
    EXPECT_LE(frobenius_norm(diff) / frobenius_norm(a), 1e-10);
  }
}

TEST(SvdTest, ErrorNonIncreasingInRank) {
  Tensor a = random_matrix(12, 8, 5);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t r = 1; r <= 8; ++r) {
    Tensor diff = svd_truncated(a, r).reconstruct();
    for (std::size_t i = 0; i < diff.numel(); ++i) diff[i] -= a[i];
    const double e = frobenius_norm(diff);
    EXPECT_LE(e, prev + 1e-12);
    prev = e;
  }
}

TEST(SvdTest, DeterministicWithSignConvention) {
  Tensor a = random_matrix(7, 5, 9);
  SvdFactors f1 = svd_truncated(a, 4);
  SvdFactors f2 = svd_truncated(a, 4);
  EXPECT_TRUE(bitwise_equal(f1.u, f2.u));
  EXPECT_TRUE(bitwise_equal(f1.s, f2.s));
  EXPECT_TRUE(bitwise_equal(f1.v, f2.v));
  for (std::size_t j = 0; j < f1.u.cols(); ++j) {
    for (std::size_t i = 0; i < f1.u.rows(); ++i) {
      if (std::abs(f1.u(i, j)) > 1e-12) {
        EXPECT_GT(f1.u(i, j), 0.0);
        break;
      }
    }
  }
}

TEST(SvdTest, RankDeficientInputCompletesBasis) {
  Tensor a = Tensor::matrix(6, 4);
  a(0, 0) = 1.0;
  a(1, 1) = 2.0;
  SvdFactors f = svd_truncated(a, 4);
  EXPECT_NEAR(f.s[0], 2.0, 1e-14);
  EXPECT_NEAR(f.s[1], 1.0, 1e-14);
  EXPECT_EQ(f.s[2], 0.0);
  EXPECT_LT(orthonormality_error(f.u), 1e-12);
  EXPECT_LT(orthonormality_error(f.v), 1e-12);
  EXPECT_LT(max_abs_diff(f.reconstruct(), a), 1e-14);
}

TEST(SvdTest, RejectsBadRank) {
  Tensor a = random_matrix(4, 3, 1);
  EXPECT_THROW(svd_truncated(a, 0), ConfigError);
  EXPECT_THROW(svd_truncated(a, 4), ConfigError);
}

TEST(SvdTest, SingularValuesMatchFactors) {
  Tensor a = random_matrix(5, 8, 2);
  Tensor s = singular_values(a);
  SvdFactors f = svd_truncated(a, 5);
  EXPECT_LT(max_abs_diff(s, f.s), 1e-12);
}

TEST(GemmTest, TransposeCombinations) {
  Tensor a = random_matrix(3, 4, 1);
  Tensor b = random_matrix(4, 2, 2);
  Tensor c = gemm(a, false, b, false);
  EXPECT_LT(max_abs_diff(gemm(transpose(a), true, b, false), c), 1e-15);
  EXPECT_LT(max_abs_diff(gemm(a, false, transpose(b), true), c), 1e-15);
  EXPECT_LT(max_abs_diff(transpose(gemm(b, true, a, true)), c), 1e-15);
  double ref = 0.0;
  for (std::size_t k = 0; k < 4; ++k) ref += a(1, k) * b(k, 1);
  EXPECT_NEAR(c(1, 1), ref, 1e-15);
  EXPECT_THROW(gemm(a, false, a, false), ShapeError);
}

TEST(GemmTest, ColumnsAndConcat) {
  Tensor a = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  Tensor c = columns(a, 1, 2);
  EXPECT_EQ(c, Tensor::from_rows({{2, 3}, {5, 6}}));
  EXPECT_EQ(hconcat(columns(a, 0, 1), c), a);
}

}  // namespace
}  // namespace hforge
