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

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "hforge/error.hpp"

namespace hforge {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_map(const Tensor& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

void check_gemm(const Tensor& a, bool ta, const Tensor& b, bool tb, std::size_t& m,
                std::size_t& n) {
  const std::size_t ar = ta ? a.cols() : a.rows();
  const std::size_t ac = ta ? a.rows() : a.cols();
  const std::size_t br = tb ? b.cols() : b.rows();
  const std::size_t bc = tb ? b.rows() : b.cols();
  if (ac != br) {
    throw ShapeError("gemm: inner dimensions differ, " + shape_string(a.shape()) +
                     (ta ? "^T" : "") + " * " + shape_string(b.shape()) + (tb ? "^T" : ""));
  }
  m = ar;
  n = bc;
}

// Columns of a column-major working matrix.
struct ColumnMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  double* col(std::size_t j) { return data.data() + j * rows; }
  const double* col(std::size_t j) const { return data.data() + j * rows; }
};

double dot(const double* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

void rotate(double* x, double* y, std::size_t n, double c, double s) {
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = x[i];
    const double yi = y[i];
    x[i] = c * xi - s * yi;
    y[i] = s * xi + c * yi;
  }
}

struct JacobiResult {
  ColumnMatrix w;  // orthogonalized columns, norms are the singular values
  ColumnMatrix v;  // accumulated rotations
};

// One-sided (Hestenes) Jacobi on the columns of a tall-or-square matrix.
JacobiResult hestenes(ColumnMatrix w) {
  const std::size_t m = w.rows;
  const std::size_t n = w.cols;
  constexpr double kTol = 1e-12;
  const std::size_t max_sweeps = 100 * std::min(m, n);

  ColumnMatrix v{n, n, std::vector<double>(n * n, 0.0)};
  for (std::size_t j = 0; j < n; ++j) v.col(j)[j] = 1.0;

  std::vector<double> norms(n);
  for (std::size_t sweep = 0;; ++sweep) {
    if (sweep >= max_sweeps) {
      throw ConvergenceError("svd: no convergence after " + std::to_string(max_sweeps) +
                             " Jacobi sweeps");
    }
    for (std::size_t j = 0; j < n; ++j) norms[j] = dot(w.col(j), w.col(j), m);
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      if (norms[p] == 0.0) continue;
      for (std::size_t q = p + 1; q < n; ++q) {
        if (norms[q] == 0.0) continue;
        double* wp = w.col(p);
        double* wq = w.col(q);
        const double gamma = dot(wp, wq, m);
        const double alpha = dot(wp, wp, m);
        const double beta = dot(wq, wq, m);
        if (std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(wp, wq, m, c, s);
        rotate(v.col(p), v.col(q), n, c, s);
      }
    }
    if (!rotated) break;
  }
  return {std::move(w), std::move(v)};
}

// Extends the orthonormal columns u[0, have) to u[0, want) with unit vectors
// orthogonalized against the existing ones.
void complete_basis(ColumnMatrix& u, std::size_t have, std::size_t want) {
  const std::size_t m = u.rows;
  std::size_t candidate = 0;
  std::vector<double> v(m);
  std::vector<std::size_t> touched;
  for (std::size_t j = have; j < want; ++j) {
    for (;; ++candidate) {
      if (candidate >= m) throw ConvergenceError("svd: cannot complete orthonormal basis");
      std::fill(v.begin(), v.end(), 0.0);
      v[candidate] = 1.0;
      touched.clear();
      for (std::size_t k = 0; k < j; ++k) {
        const double coeff = u.col(k)[candidate];
        if (coeff == 0.0) continue;
        touched.push_back(k);
        const double* uk = u.col(k);
        for (std::size_t i = 0; i < m; ++i) v[i] -= coeff * uk[i];
      }
      for (std::size_t k : touched) {
        const double* uk = u.col(k);
        const double coeff = dot(uk, v.data(), m);
        for (std::size_t i = 0; i < m; ++i) v[i] -= coeff * uk[i];
      }
      const double norm = std::sqrt(dot(v.data(), v.data(), m));
      if (norm > 0.5) {
        double* uj = u.col(j);
        for (std::size_t i = 0; i < m; ++i) uj[i] = v[i] / norm;
        ++candidate;
        break;
      }
    }
  }
}

struct FullSvd {
  ColumnMatrix u;  // m x k
  std::vector<double> s;
  ColumnMatrix v;  // n x k
};

// Thin SVD truncated to the leading `keep` triplets.
FullSvd thin_svd(const Tensor& a, std::size_t keep) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  const bool flipped = m < n;
  const std::size_t wm = flipped ? n : m;
  const std::size_t wn = flipped ? m : n;

  ColumnMatrix w{wm, wn, std::vector<double>(wm * wn)};
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (flipped) {
        w.col(i)[j] = a(i, j);
      } else {
        w.col(j)[i] = a(i, j);
      }
    }
  }
  JacobiResult jr = hestenes(std::move(w));

  std::vector<double> sigma(wn);
  for (std::size_t j = 0; j < wn; ++j) sigma[j] = std::sqrt(dot(jr.w.col(j), jr.w.col(j), wm));
  std::vector<std::size_t> order(wn);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  // Left vectors of the working matrix come from normalized columns; right
  // vectors are the accumulated rotations.
  ColumnMatrix left{wm, keep, std::vector<double>(wm * keep, 0.0)};
  ColumnMatrix right{wn, keep, std::vector<double>(wn * keep, 0.0)};
  std::vector<double> s(keep);
  const double smax = wn ? sigma[order[0]] : 0.0;
  const double negligible = smax * static_cast<double>(std::max(m, n)) * 1e-15;
  std::size_t resolved = 0;
  for (std::size_t k = 0; k < keep; ++k) {
    const std::size_t j = order[k];
    s[k] = sigma[j];
    std::copy_n(jr.v.col(j), wn, right.col(k));
    if (sigma[j] > negligible && sigma[j] > 0.0) {
      const double* wj = jr.w.col(j);
      double* lk = left.col(k);
      for (std::size_t i = 0; i < wm; ++i) lk[i] = wj[i] / sigma[j];
      ++resolved;
    }
  }
  if (resolved < keep) complete_basis(left, resolved, keep);

  FullSvd out;
  out.s = std::move(s);
  if (flipped) {
    out.u = std::move(right);
    out.v = std::move(left);
  } else {
    out.u = std::move(left);
    out.v = std::move(right);
  }
  // Sign convention: first non-negligible entry of each U column is >= 0.
  for (std::size_t k = 0; k < keep; ++k) {
    double* uk = out.u.col(k);
    for (std::size_t i = 0; i < out.u.rows; ++i) {
      if (std::abs(uk[i]) > 1e-12) {
        if (uk[i] < 0.0) {
          for (std::size_t r = 0; r < out.u.rows; ++r) uk[r] = -uk[r];
          double* vk = out.v.col(k);
          for (std::size_t r = 0; r < out.v.rows; ++r) vk[r] = -vk[r];
        }
        break;
      }
    }
  }
  return out;
}

Tensor to_tensor(const ColumnMatrix& c) {
  Tensor t = Tensor::matrix(c.rows, c.cols);
  for (std::size_t j = 0; j < c.cols; ++j) {
    for (std::size_t i = 0; i < c.rows; ++i) t(i, j) = c.col(j)[i];
  }
  return t;
}

void check_finite(const Tensor& a, const char* what) {
  if (!a.all_finite()) throw KernelError(std::string(what) + ": non-finite input");
}

}  // namespace

Tensor gemm(const Tensor& a, bool transpose_a, const Tensor& b, bool transpose_b) {
  std::size_t m = 0;
  std::size_t n = 0;
  check_gemm(a, transpose_a, b, transpose_b, m, n);
  Tensor c = Tensor::matrix(m, n);
  gemm_accumulate(c, a, transpose_a, b, transpose_b);
  return c;
}

void gemm_accumulate(Tensor& c, const Tensor& a, bool transpose_a, const Tensor& b,
                     bool transpose_b) {
  std::size_t m = 0;
  std::size_t n = 0;
  check_gemm(a, transpose_a, b, transpose_b, m, n);
  if (c.rows() != m || c.cols() != n) {
    throw ShapeError("gemm_accumulate: output " + shape_string(c.shape()) + " expected [" +
                     std::to_string(m) + "x" + std::to_string(n) + "]");
  }
  if (m == 0 || n == 0) return;
  MutMap cm(c.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  const ConstMap am = as_map(a);
  const ConstMap bm = as_map(b);
  if (!transpose_a && !transpose_b) {
    cm.noalias() += am * bm;
  } else if (transpose_a && !transpose_b) {
    cm.noalias() += am.transpose() * bm;
  } else if (!transpose_a && transpose_b) {
    cm.noalias() += am * bm.transpose();
  } else {
    cm.noalias() += am.transpose() * bm.transpose();
  }
}

Tensor transpose(const Tensor& a) {
  Tensor t = Tensor::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  return t;
}

Tensor columns(const Tensor& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) {
    throw ShapeError("columns: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + shape_string(a.shape()));
  }
  Tensor t = Tensor::matrix(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < count; ++j) t(i, j) = a(i, begin + j);
  }
  return t;
}

Tensor hconcat(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("hconcat: " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  Tensor t = Tensor::matrix(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::copy_n(a.row(i).data(), a.cols(), t.row(i).data());
    std::copy_n(b.row(i).data(), b.cols(), t.row(i).data() + a.cols());
  }
  return t;
}

Tensor SvdFactors::reconstruct() const { return matmul(u, scaled_vt()); }

Tensor SvdFactors::scaled_vt() const {
  Tensor t = Tensor::matrix(rank(), v.rows());
  for (std::size_t k = 0; k < rank(); ++k) {
    for (std::size_t j = 0; j < v.rows(); ++j) t(k, j) = s[k] * v(j, k);
  }
  return t;
}

SvdFactors svd_truncated(const Tensor& a, std::size_t r) {
  const std::size_t limit = std::min(a.rows(), a.cols());
  if (r < 1 || r > limit) {
    throw ConfigError("svd_truncated: rank " + std::to_string(r) + " outside [1, " +
                      std::to_string(limit) + "] for " + shape_string(a.shape()));
  }
  check_finite(a, "svd_truncated");
  FullSvd f = thin_svd(a, r);
  SvdFactors out;
  out.u = to_tensor(f.u);
  out.v = to_tensor(f.v);
  out.s = Tensor(Shape{r}, std::move(f.s));
  return out;
}

Tensor singular_values(const Tensor& a) {
  const std::size_t k = std::min(a.rows(), a.cols());
  check_finite(a, "singular_values");
  FullSvd f = thin_svd(a, k);
  return Tensor(Shape{k}, std::move(f.s));
}

}  // namespace hforge
