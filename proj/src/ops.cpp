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

#include "hforge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>

#include "hforge/error.hpp"
#include "hforge/linalg.hpp"

namespace hforge::ops {
namespace {

using BackwardFn = Tape::BackwardFn;

Tape& tape_of(std::initializer_list<Var> parents) {
  Tape* tape = nullptr;
  for (const Var& p : parents) {
    if (!p.valid()) throw GraphError("op input is an unbound Var");
    if (tape == nullptr) {
      tape = &p.tape();
    } else if (tape != &p.tape()) {
      throw GraphError("op inputs live on different tapes");
    }
  }
  return *tape;
}

bool grad_needed(std::initializer_list<Var> parents) {
  Tape& tape = tape_of(parents);
  if (!tape.recording()) return false;
  return std::any_of(parents.begin(), parents.end(),
                     [](const Var& p) { return p.requires_grad(); });
}

// Builds the backward closure only when a gradient can flow.
template <class MakeBackward>
Var emit(Tensor out, std::initializer_list<Var> parents, std::string_view op,
         MakeBackward&& make_backward) {
  BackwardFn fn;
  if (grad_needed(parents)) fn = make_backward();
  return tape_of(parents).record(std::move(out), parents, std::move(fn), op);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Elementwise op whose derivative depends on the input only.
template <class F, class DF>
Var pointwise(const Var& a, std::string_view op, F f, DF df) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  return emit(std::move(out), {a}, op, [a, df] {
    return [a, df](Tape& t, const Tensor& g) {
      const Tensor& x = a.value();
      Tensor& ga = t.grad_slot(a);
      for (std::size_t i = 0; i < x.numel(); ++i) ga[i] += g[i] * df(x[i]);
    };
  });
}

void softmax_row(const double* x, double* p, std::size_t n) {
  double m = x[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, x[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = std::exp(x[j] - m);
    s += p[j];
  }
  const double inv = 1.0 / s;
  for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tensor out = gemm(a.value(), false, b.value(), false);
  return emit(std::move(out), {a, b}, "matmul", [a, b] {
    return [a, b](Tape& t, const Tensor& g) {
      if (a.requires_grad()) gemm_accumulate(t.grad_slot(a), g, false, b.value(), true);
      if (b.requires_grad()) gemm_accumulate(t.grad_slot(b), a.value(), true, g, false);
    };
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tensor out = gemm(a.value(), false, b.value(), true);
  return emit(std::move(out), {a, b}, "matmul_nt", [a, b] {
    return [a, b](Tape& t, const Tensor& g) {
      if (a.requires_grad()) gemm_accumulate(t.grad_slot(a), g, false, b.value(), false);
      if (b.requires_grad()) gemm_accumulate(t.grad_slot(b), g, true, a.value(), false);
    };
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  const Tensor& y = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += y[i];
  return emit(std::move(out), {a, b}, "add", [a, b] {
    return [a, b](Tape& t, const Tensor& g) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    };
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const Tensor& y = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= y[i];
  return emit(std::move(out), {a, b}, "sub", [a, b] {
    return [a, b](Tape& t, const Tensor& g) {
      t.accumulate(a, g);
      if (b.requires_grad()) {
        Tensor& gb = t.grad_slot(b);
        for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
      }
    };
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& y = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= y[i];
  return emit(std::move(out), {a, b}, "mul", [a, b] {
    return [a, b](Tape& t, const Tensor& g) {
      if (a.requires_grad()) {
        Tensor& ga = t.grad_slot(a);
        const Tensor& y = b.value();
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        Tensor& gb = t.grad_slot(b);
        const Tensor& x = a.value();
        for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * x[i];
      }
    };
  });
}

Var add_row(const Var& a, const Var& bias) {
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  if (bias.value().numel() != cols) {
    throw ShapeError("add_row: bias " + shape_string(bias.shape()) + " for " +
                     shape_string(a.shape()));
  }
  Tensor out = a.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  }
  return emit(std::move(out), {a, bias}, "add_row", [a, bias, rows, cols] {
    return [a, bias, rows, cols](Tape& t, const Tensor& g) {
      t.accumulate(a, g);
      if (bias.requires_grad()) {
        Tensor& gb = t.grad_slot(bias);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
        }
      }
    };
  });
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  return emit(std::move(out), {a}, "scale", [a, factor] {
    return [a, factor](Tape& t, const Tensor& g) {
      Tensor& ga = t.grad_slot(a);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += factor * g[i];
    };
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var exp(const Var& a) {
  return pointwise(
      a, "exp", [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(const Var& a) {
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (!(x[i] > 0.0)) throw KernelError("log of non-positive value");
  }
  return pointwise(
      a, "log", [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var softplus(const Var& a) { return pointwise(a, "softplus", softplus_value, sigmoid); }

Var silu(const Var& a) {
  return pointwise(
      a, "silu", [](double x) { return x * sigmoid(x); },
      [](double x) {
        const double s = sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return emit(Tensor::scalar(s), {a}, "sum", [a] {
    return [a](Tape& t, const Tensor& g) {
      Tensor& ga = t.grad_slot(a);
      for (double& v : ga.values()) v += g[0];
    };
  });
}

Var mean(const Var& a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var softmax_rows(const Var& a) {
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  Tensor out(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    softmax_row(a.value().data() + r * cols, out.data() + r * cols, cols);
  }
  auto saved = std::make_shared<Tensor>(out);
  return emit(std::move(out), {a}, "softmax_rows", [a, saved, rows, cols] {
    return [a, saved, rows, cols](Tape& t, const Tensor& g) {
      Tensor& ga = t.grad_slot(a);
      const Tensor& p = *saved;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t o = r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[o + c] * p[o + c];
        for (std::size_t c = 0; c < cols; ++c) ga[o + c] += p[o + c] * (g[o + c] - dot);
      }
    };
  });
}

Var log_softmax_rows(const Var& a) {
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  const Tensor& x = a.value();
  Tensor out(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double m = xr[0];
    for (std::size_t c = 1; c < cols; ++c) m = std::max(m, xr[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(xr[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xr[c] - lse;
  }
  auto saved = std::make_shared<Tensor>(out);
  return emit(std::move(out), {a}, "log_softmax_rows", [a, saved, rows, cols] {
    return [a, saved, rows, cols](Tape& t, const Tensor& g) {
      Tensor& ga = t.grad_slot(a);
      const Tensor& lp = *saved;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t o = r * cols;
        double gs = 0.0;
        for (std::size_t c = 0; c < cols; ++c) gs += g[o + c];
        for (std::size_t c = 0; c < cols; ++c) ga[o + c] += g[o + c] - std::exp(lp[o + c]) * gs;
      }
    };
  });
}

Var nll_rows(const Var& log_probs, std::span<const std::int32_t> targets) {
  const std::size_t rows = log_probs.rows();
  const std::size_t cols = log_probs.cols();
  if (targets.size() != rows) {
    throw ShapeError("nll_rows: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  double s = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] < 0) continue;
    if (static_cast<std::size_t>(tgt[r]) >= cols) {
      throw ShapeError("nll_rows: target " + std::to_string(tgt[r]) + " outside vocabulary");
    }
    s -= log_probs.value()[r * cols + static_cast<std::size_t>(tgt[r])];
  }
  return emit(Tensor::scalar(s), {log_probs}, "nll_rows", [log_probs, tgt, cols] {
    return [log_probs, tgt, cols](Tape& t, const Tensor& g) {
      Tensor& ga = t.grad_slot(log_probs);
      for (std::size_t r = 0; r < tgt.size(); ++r) {
        if (tgt[r] >= 0) ga[r * cols + static_cast<std::size_t>(tgt[r])] -= g[0];
      }
    };
  });
}

Var rms_norm(const Var& x, const Var& gain, double eps) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  if (gain.value().numel() != cols) {
    throw ShapeError("rms_norm: gain " + shape_string(gain.shape()) + " for " +
                     shape_string(x.shape()));
  }
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  Tensor out(x.shape());
  auto inv = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double ms = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ms += xr[c] * xr[c];
    ms /= static_cast<double>(cols);
    const double k = 1.0 / std::sqrt(ms + eps);
    (*inv)[r] = k;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xr[c] * k * gv[c];
  }
  return emit(std::move(out), {x, gain}, "rms_norm", [x, gain, inv, rows, cols] {
    return [x, gain, inv, rows, cols](Tape& t, const Tensor& g) {
      const Tensor& xv = x.value();
      const Tensor& gv = gain.value();
      if (gain.requires_grad()) {
        Tensor& gg = t.grad_slot(gain);
        for (std::size_t r = 0; r < rows; ++r) {
          const double k = (*inv)[r];
          for (std::size_t c = 0; c < cols; ++c) {
            gg[c] += g[r * cols + c] * xv[r * cols + c] * k;
          }
        }
      }
      if (x.requires_grad()) {
        Tensor& gx = t.grad_slot(x);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t o = r * cols;
          const double k = (*inv)[r];
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += g[o + c] * gv[c] * xv[o + c];
          const double corr = k * k * k * dot / static_cast<double>(cols);
          for (std::size_t c = 0; c < cols; ++c) {
            gx[o + c] += k * g[o + c] * gv[c] - corr * xv[o + c];
          }
        }
      }
    };
  });
}

Var causal_conv1d(const Var& x, const Var& w, std::size_t batch, std::size_t seq_len,
                  const Tensor* history) {
  const std::size_t channels = x.cols();
  const std::size_t width = w.rows();
  if (x.rows() != batch * seq_len) {
    throw ShapeError("causal_conv1d: " + std::to_string(x.rows()) + " rows for batch " +
                     std::to_string(batch) + " x length " + std::to_string(seq_len));
  }
  if (w.cols() != channels || width == 0) {
    throw ShapeError("causal_conv1d: kernel " + shape_string(w.shape()) + " for " +
                     std::to_string(channels) + " channels");
  }
  std::shared_ptr<Tensor> hist;
  if (history != nullptr && !history->empty()) {
    if (batch != 1 || history->rows() != width - 1 || history->cols() != channels) {
      throw ShapeError("causal_conv1d: history " + shape_string(history->shape()) +
                       " does not match kernel " + shape_string(w.shape()));
    }
    hist = std::make_shared<Tensor>(*history);
  }
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  Tensor out(x.shape());
  // Input row at time s (possibly negative) of sequence b, or null for zero.
  auto input_row = [&, channels](const Tensor& src, std::size_t b, long s) -> const double* {
    if (s >= 0) return src.data() + (b * seq_len + static_cast<std::size_t>(s)) * channels;
    if (!hist) return nullptr;
    const long h = static_cast<long>(width) - 1 + s;
    return h >= 0 ? hist->data() + static_cast<std::size_t>(h) * channels : nullptr;
  };
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq_len; ++t) {
      double* yr = out.data() + (b * seq_len + t) * channels;
      for (std::size_t k = 0; k < width; ++k) {
        const long s = static_cast<long>(t) - static_cast<long>(width - 1 - k);
        const double* xr = input_row(xv, b, s);
        if (xr == nullptr) continue;
        const double* wr = wv.data() + k * channels;
        for (std::size_t c = 0; c < channels; ++c) yr[c] += wr[c] * xr[c];
      }
    }
  }
  return emit(std::move(out), {x, w}, "causal_conv1d",
              [x, w, batch, seq_len, hist, channels, width] {
    return [x, w, batch, seq_len, hist, channels, width](Tape& t, const Tensor& g) {
      const Tensor& xv = x.value();
      const Tensor& wv = w.value();
      Tensor* gx = x.requires_grad() ? &t.grad_slot(x) : nullptr;
      Tensor* gw = w.requires_grad() ? &t.grad_slot(w) : nullptr;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t tt = 0; tt < seq_len; ++tt) {
          const double* gr = g.data() + (b * seq_len + tt) * channels;
          for (std::size_t k = 0; k < width; ++k) {
            const long s = static_cast<long>(tt) - static_cast<long>(width - 1 - k);
            const double* xr = nullptr;
            if (s >= 0) {
              const std::size_t row = b * seq_len + static_cast<std::size_t>(s);
              xr = xv.data() + row * channels;
              if (gx != nullptr) {
                double* gxr = gx->data() + row * channels;
                const double* wr = wv.data() + k * channels;
                for (std::size_t c = 0; c < channels; ++c) gxr[c] += gr[c] * wr[c];
              }
            } else if (hist) {
              const long h = static_cast<long>(width) - 1 + s;
              if (h >= 0) xr = hist->data() + static_cast<std::size_t>(h) * channels;
            }
            if (gw != nullptr && xr != nullptr) {
              double* gwr = gw->data() + k * channels;
              for (std::size_t c = 0; c < channels; ++c) gwr[c] += gr[c] * xr[c];
            }
          }
        }
      }
    };
  });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  if (begin + count > cols) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") of " + std::to_string(cols));
  }
  Tensor out = columns(x.value().reshape({rows, cols}), begin, count);
  return emit(std::move(out), {x}, "slice_cols", [x, begin, count, rows, cols] {
    return [x, begin, count, rows, cols](Tape& t, const Tensor& g) {
      Tensor& gx = t.grad_slot(x);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < count; ++c) gx[r * cols + begin + c] += g[r * count + c];
      }
    };
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    total += p.cols();
  }
  Tensor out = Tensor::matrix(rows, total);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const std::size_t pc = p.cols();
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.data() + r * pc, pc, out.data() + r * total + offset);
    }
    offset += pc;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  Tape& tape = inputs[0].tape();
  bool any = false;
  for (const Var& p : inputs) {
    if (&p.tape() != &tape) throw GraphError("op inputs live on different tapes");
    any = any || p.requires_grad();
  }
  BackwardFn fn;
  if (tape.recording() && any) {
    fn = [inputs, rows, total](Tape& t, const Tensor& g) {
      std::size_t offset = 0;
      for (const Var& p : inputs) {
        const std::size_t pc = p.cols();
        if (p.requires_grad()) {
          Tensor& gp = t.grad_slot(p);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * total + offset + c];
          }
        }
        offset += pc;
      }
    };
  }
  return tape.record(std::move(out), inputs, std::move(fn), "concat_cols");
}

Var concat_rows(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeError("concat_rows: column counts differ");
  const std::size_t cols = a.cols();
  const std::size_t ra = a.rows();
  Tensor out = Tensor::matrix(ra + b.rows(), cols);
  std::copy_n(a.value().data(), a.value().numel(), out.data());
  std::copy_n(b.value().data(), b.value().numel(), out.data() + ra * cols);
  return emit(std::move(out), {a, b}, "concat_rows", [a, b, ra, cols] {
    return [a, b, ra, cols](Tape& t, const Tensor& g) {
      if (a.requires_grad()) {
        Tensor& ga = t.grad_slot(a);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        Tensor& gb = t.grad_slot(b);
        for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g[ra * cols + i];
      }
    };
  });
}

Var gather_cols(const Var& x, std::vector<std::size_t> index) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  for (std::size_t j : index) {
    if (j >= cols) throw ShapeError("gather_cols: index " + std::to_string(j) + " out of range");
  }
  const std::size_t n = index.size();
  Tensor out = Tensor::matrix(rows, n);
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xv[r * cols + index[j]];
  }
  return emit(std::move(out), {x}, "gather_cols", [x, index = std::move(index), rows, cols] {
    return [x, index, rows, cols](Tape& t, const Tensor& g) {
      Tensor& gx = t.grad_slot(x);
      const std::size_t n = index.size();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) gx[r * cols + index[j]] += g[r * n + j];
      }
    };
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshape(std::move(shape));
  return emit(std::move(out), {x}, "reshape", [x] {
    return [x](Tape& t, const Tensor& g) {
      Tensor& gx = t.grad_slot(x);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    };
  });
}

Var embedding(const Var& table, std::span<const std::int32_t> ids) {
  const std::size_t vocab = table.rows();
  const std::size_t d = table.cols();
  std::vector<std::int32_t> tok(ids.begin(), ids.end());
  Tensor out = Tensor::matrix(tok.size(), d);
  const Tensor& tv = table.value();
  for (std::size_t i = 0; i < tok.size(); ++i) {
    if (tok[i] < 0 || static_cast<std::size_t>(tok[i]) >= vocab) {
      throw ShapeError("embedding: token " + std::to_string(tok[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(tok[i]) * d, d, out.data() + i * d);
  }
  return emit(std::move(out), {table}, "embedding", [table, tok, d] {
    return [table, tok, d](Tape& t, const Tensor& g) {
      Tensor& gt = t.grad_slot(table);
      for (std::size_t i = 0; i < tok.size(); ++i) {
        double* row = gt.data() + static_cast<std::size_t>(tok[i]) * d;
        for (std::size_t c = 0; c < d; ++c) row[c] += g[i * d + c];
      }
    };
  });
}

Var rope(const Var& x, std::size_t heads, std::size_t dim, std::span<const std::size_t> positions,
         double base) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  if (dim % 2 != 0 || heads * dim != cols) {
    throw ShapeError("rope: " + std::to_string(heads) + " heads of width " + std::to_string(dim) +
                     " over " + std::to_string(cols) + " columns");
  }
  if (positions.size() != rows) throw ShapeError("rope: one position per row required");
  const std::size_t half = dim / 2;
  // cos/sin per (row, pair), shared by every head.
  auto table = std::make_shared<std::vector<double>>(rows * half * 2);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq =
          std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      const double theta = static_cast<double>(positions[r]) * freq;
      (*table)[(r * half + i) * 2] = std::cos(theta);
      (*table)[(r * half + i) * 2 + 1] = std::sin(theta);
    }
  }
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t o = r * cols + h * dim;
      for (std::size_t i = 0; i < half; ++i) {
        const double c = (*table)[(r * half + i) * 2];
        const double s = (*table)[(r * half + i) * 2 + 1];
        const double x0 = xv[o + 2 * i];
        const double x1 = xv[o + 2 * i + 1];
        out[o + 2 * i] = x0 * c - x1 * s;
        out[o + 2 * i + 1] = x0 * s + x1 * c;
      }
    }
  }
  return emit(std::move(out), {x}, "rope", [x, table, rows, cols, heads, dim, half] {
    return [x, table, rows, cols, heads, dim, half](Tape& t, const Tensor& g) {
      Tensor& gx = t.grad_slot(x);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t o = r * cols + h * dim;
          for (std::size_t i = 0; i < half; ++i) {
            const double c = (*table)[(r * half + i) * 2];
            const double s = (*table)[(r * half + i) * 2 + 1];
            const double g0 = g[o + 2 * i];
            const double g1 = g[o + 2 * i + 1];
            gx[o + 2 * i] += g0 * c + g1 * s;
            gx[o + 2 * i + 1] += -g0 * s + g1 * c;
          }
        }
      }
    };
  });
}

Var causal_attention(const Var& q, const Var& k, const Var& v, const AttentionSpec& spec,
                     Tensor* probs) {
  const std::size_t B = spec.batch;
  const std::size_t Tq = spec.q_len;
  const std::size_t Tk = spec.kv_len;
  const std::size_t H = spec.n_heads;
  const std::size_t Hk = spec.n_kv_heads;
  const std::size_t dk = spec.d_k;
  const std::size_t dv = spec.d_v;
  if (Hk == 0 || H % Hk != 0) {
    throw ShapeError("attention: " + std::to_string(H) + " query heads over " +
                     std::to_string(Hk) + " key/value heads");
  }
  if (Tq > Tk) throw ShapeError("attention: more queries than keys");
  if (q.rows() != B * Tq || q.cols() != H * dk || k.rows() != B * Tk || k.cols() != Hk * dk ||
      v.rows() != B * Tk || v.cols() != Hk * dv) {
    throw ShapeError("attention: q " + shape_string(q.shape()) + ", k " +
                     shape_string(k.shape()) + ", v " + shape_string(v.shape()) +
                     " do not match the spec");
  }
  const std::size_t group = H / Hk;
  const std::size_t offset = Tk - Tq;
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const bool keep = grad_needed({q, k, v});
  auto p_all = std::make_shared<Tensor>();
  if (keep || probs != nullptr) *p_all = Tensor::matrix(B * H * Tq, Tk);
  std::vector<double> p(Tk);
  Tensor out = Tensor::matrix(B * Tq, H * dv);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t hk = h / group;
      for (std::size_t i = 0; i < Tq; ++i) {
        const std::size_t n = offset + i + 1;
        const double* qi = qv.data() + (b * Tq + i) * H * dk + h * dk;
        double m = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          const double* kj = kv.data() + (b * Tk + j) * Hk * dk + hk * dk;
          double s = 0.0;
          for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
          p[j] = s * spec.scale;
          m = std::max(m, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          p[j] = std::exp(p[j] - m);
          z += p[j];
        }
        const double inv = 1.0 / z;
        double* oi = out.data() + (b * Tq + i) * H * dv + h * dv;
        for (std::size_t j = 0; j < n; ++j) {
          p[j] *= inv;
          const double* vj = vv.data() + (b * Tk + j) * Hk * dv + hk * dv;
          for (std::size_t c = 0; c < dv; ++c) oi[c] += p[j] * vj[c];
        }
        if (!p_all->empty()) {
          std::copy_n(p.data(), n, p_all->data() + ((b * H + h) * Tq + i) * Tk);
        }
      }
    }
  }
  if (probs != nullptr) *probs = *p_all;
  return emit(std::move(out), {q, k, v}, "causal_attention", [q, k, v, spec, p_all] {
    return [q, k, v, spec, p_all](Tape& t, const Tensor& g) {
      const std::size_t B = spec.batch, Tq = spec.q_len, Tk = spec.kv_len;
      const std::size_t H = spec.n_heads, Hk = spec.n_kv_heads, dk = spec.d_k, dv = spec.d_v;
      const std::size_t group = H / Hk;
      const std::size_t offset = Tk - Tq;
      const Tensor& qv = q.value();
      const Tensor& kv = k.value();
      const Tensor& vv = v.value();
      Tensor* gq = q.requires_grad() ? &t.grad_slot(q) : nullptr;
      Tensor* gk = k.requires_grad() ? &t.grad_slot(k) : nullptr;
      Tensor* gvv = v.requires_grad() ? &t.grad_slot(v) : nullptr;
      std::vector<double> dp(Tk);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t hk = h / group;
          for (std::size_t i = 0; i < Tq; ++i) {
            const std::size_t n = offset + i + 1;
            const double* pi = p_all->data() + ((b * H + h) * Tq + i) * Tk;
            const double* gi = g.data() + (b * Tq + i) * H * dv + h * dv;
            const std::size_t qo = (b * Tq + i) * H * dk + h * dk;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t vo = (b * Tk + j) * Hk * dv + hk * dv;
              double s = 0.0;
              for (std::size_t c = 0; c < dv; ++c) s += gi[c] * vv[vo + c];
              dp[j] = s;
              dot += pi[j] * s;
              if (gvv != nullptr) {
                for (std::size_t c = 0; c < dv; ++c) (*gvv)[vo + c] += pi[j] * gi[c];
              }
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double ds = pi[j] * (dp[j] - dot) * spec.scale;
              if (ds == 0.0) continue;
              const std::size_t ko = (b * Tk + j) * Hk * dk + hk * dk;
              if (gq != nullptr) {
                for (std::size_t c = 0; c < dk; ++c) (*gq)[qo + c] += ds * kv[ko + c];
              }
              if (gk != nullptr) {
                for (std::size_t c = 0; c < dk; ++c) (*gk)[ko + c] += ds * qv[qo + c];
              }
            }
          }
        }
      }
    };
  });
}

Var ssm_scan(const Var& x, const Var& b, const Var& c, const Var& dt, const Var& a, const Var& d,
             const ScanSpec& spec, const Tensor* init_state, Tensor* final_state) {
  const std::size_t B = spec.batch;
  const std::size_t T = spec.seq_len;
  const std::size_t H = spec.n_heads;
  const std::size_t N = spec.state_dim;
  const std::size_t P = spec.head_dim;
  const std::size_t R = B * T;
  if (x.rows() != R || x.cols() != H * P || b.rows() != R || b.cols() != H * N ||
      c.rows() != R || c.cols() != H * N || dt.rows() != R || dt.cols() != H ||
      a.value().numel() != H || d.value().numel() != H) {
    throw ShapeError("ssm_scan: x " + shape_string(x.shape()) + ", b " + shape_string(b.shape()) +
                     ", c " + shape_string(c.shape()) + ", dt " + shape_string(dt.shape()) +
                     " do not match the spec");
  }
  const std::size_t state_size = H * N * P;
  if ((init_state != nullptr && !init_state->empty()) || final_state != nullptr) {
    if (B != 1) throw ShapeError("ssm_scan: carried state requires batch 1");
  }
  if (init_state != nullptr && !init_state->empty() && init_state->numel() != state_size) {
    throw ShapeError("ssm_scan: initial state " + shape_string(init_state->shape()));
  }
  const bool keep = grad_needed({x, b, c, dt, a, d});
  // states[(bi * (T + 1) + t) * H + h] holds S before step t (t = 0) or after step t - 1.
  auto states = std::make_shared<std::vector<double>>();
  if (keep) states->assign(B * (T + 1) * state_size, 0.0);
  std::vector<double> S(state_size);
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  const Tensor& cv = c.value();
  const Tensor& dtv = dt.value();
  const Tensor& av = a.value();
  const Tensor& dv = d.value();
  Tensor out = Tensor::matrix(R, H * P);
  for (std::size_t bi = 0; bi < B; ++bi) {
    if (init_state != nullptr && !init_state->empty()) {
      std::copy_n(init_state->data(), state_size, S.data());
    } else {
      std::fill(S.begin(), S.end(), 0.0);
    }
    if (keep) std::copy(S.begin(), S.end(), states->begin() + bi * (T + 1) * state_size);
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t r = bi * T + t;
      for (std::size_t h = 0; h < H; ++h) {
        const double step = dtv[r * H + h];
        const double alpha = std::exp(step * av[h]);
        const double* xr = xv.data() + r * H * P + h * P;
        const double* br = bv.data() + r * H * N + h * N;
        const double* cr = cv.data() + r * H * N + h * N;
        double* Sh = S.data() + h * N * P;
        double* yr = out.data() + r * H * P + h * P;
        for (std::size_t n = 0; n < N; ++n) {
          const double u = step * br[n];
          double* Sn = Sh + n * P;
          for (std::size_t p = 0; p < P; ++p) Sn[p] = alpha * Sn[p] + u * xr[p];
        }
        for (std::size_t p = 0; p < P; ++p) yr[p] = dv[h] * xr[p];
        for (std::size_t n = 0; n < N; ++n) {
          const double* Sn = Sh + n * P;
          for (std::size_t p = 0; p < P; ++p) yr[p] += Sn[p] * cr[n];
        }
      }
      if (keep) {
        std::copy(S.begin(), S.end(), states->begin() + (bi * (T + 1) + t + 1) * state_size);
      }
    }
  }
  if (final_state != nullptr) *final_state = Tensor(Shape{H, N, P}, S);
  return emit(std::move(out), {x, b, c, dt, a, d}, "ssm_scan", [x, b, c, dt, a, d, spec, states] {
    return [x, b, c, dt, a, d, spec, states](Tape& t, const Tensor& g) {
      const std::size_t B = spec.batch, T = spec.seq_len, H = spec.n_heads;
      const std::size_t N = spec.state_dim, P = spec.head_dim;
      const std::size_t state_size = H * N * P;
      const Tensor& xv = x.value();
      const Tensor& bv = b.value();
      const Tensor& cv = c.value();
      const Tensor& dtv = dt.value();
      const Tensor& av = a.value();
      const Tensor& dv = d.value();
      Tensor gx(x.shape()), gb(b.shape()), gc(c.shape()), gdt(dt.shape());
      Tensor ga(a.shape()), gd(d.shape());
      std::vector<double> G(N * P);
      for (std::size_t bi = 0; bi < B; ++bi) {
        for (std::size_t h = 0; h < H; ++h) {
          std::fill(G.begin(), G.end(), 0.0);
          for (std::size_t tt = T; tt-- > 0;) {
            const std::size_t r = bi * T + tt;
            const double* S_now =
                states->data() + (bi * (T + 1) + tt + 1) * state_size + h * N * P;
            const double* S_prev = states->data() + (bi * (T + 1) + tt) * state_size + h * N * P;
            const double step = dtv[r * H + h];
            const double alpha = std::exp(step * av[h]);
            const double* xr = xv.data() + r * H * P + h * P;
            const double* br = bv.data() + r * H * N + h * N;
            const double* cr = cv.data() + r * H * N + h * N;
            const double* gy = g.data() + r * H * P + h * P;
            double* gxr = gx.data() + r * H * P + h * P;
            double* gbr = gb.data() + r * H * N + h * N;
            double* gcr = gc.data() + r * H * N + h * N;
            double gd_acc = 0.0;
            for (std::size_t p = 0; p < P; ++p) {
              gd_acc += gy[p] * xr[p];
              gxr[p] += dv[h] * gy[p];
            }
            gd[h] += gd_acc;
            for (std::size_t n = 0; n < N; ++n) {
              double* Gn = G.data() + n * P;
              const double* Sn = S_now + n * P;
              double s = 0.0;
              for (std::size_t p = 0; p < P; ++p) {
                s += Sn[p] * gy[p];
                Gn[p] += cr[n] * gy[p];
              }
              gcr[n] += s;
            }
            double q = 0.0;
            double bgx = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
              const double* Gn = G.data() + n * P;
              const double* Pn = S_prev + n * P;
              double gx_dot = 0.0;
              for (std::size_t p = 0; p < P; ++p) {
                gx_dot += Gn[p] * xr[p];
                gxr[p] += step * Gn[p] * br[n];
                q += Gn[p] * Pn[p];
              }
              gbr[n] += step * gx_dot;
              bgx += br[n] * gx_dot;
            }
            gdt[r * H + h] += bgx + av[h] * alpha * q;
            ga[h] += step * alpha * q;
            for (double& v : G) v *= alpha;
          }
        }
      }
      t.accumulate(x, gx);
      t.accumulate(b, gb);
      t.accumulate(c, gc);
      t.accumulate(dt, gdt);
      t.accumulate(a, ga);
      t.accumulate(d, gd);
    };
  });
}

}  // namespace hforge::ops
