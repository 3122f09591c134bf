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

#include "hforge/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <ostream>

#include "hforge/error.hpp"
#include "hforge/ops.hpp"

namespace hforge {

std::size_t TrainConfig::effective_steps() const noexcept {
  if (token_budget == 0 || batch_size * seq_len == 0) return steps;
  return std::min(steps, token_budget / (batch_size * seq_len));
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (seq_len < 2) throw ConfigError("train: seq_len must be at least 2");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
  if (!(warmup >= 0.0 && warmup < 1.0)) throw ConfigError("train: warmup must lie in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
  if (weight_decay < 0.0 || clip_norm < 0.0) {
    throw ConfigError("train: weight_decay and clip_norm must be non-negative");
  }
  if (log_every == 0) throw ConfigError("train: log_every must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& tc) {
  j = nlohmann::json{{"steps", tc.steps},
                     {"batch_size", tc.batch_size},
                     {"seq_len", tc.seq_len},
                     {"lr", tc.lr},
                     {"warmup", tc.warmup},
                     {"seed", tc.seed},
                     {"precision", dtype_name(tc.precision)},
                     {"token_budget", tc.token_budget},
                     {"beta1", tc.beta1},
                     {"beta2", tc.beta2},
                     {"adam_eps", tc.adam_eps},
                     {"weight_decay", tc.weight_decay},
                     {"clip_norm", tc.clip_norm},
                     {"log_every", tc.log_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& tc) {
  tc = TrainConfig{};
  auto opt = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  opt("steps", tc.steps);
  opt("batch_size", tc.batch_size);
  opt("seq_len", tc.seq_len);
  opt("lr", tc.lr);
  opt("warmup", tc.warmup);
  opt("seed", tc.seed);
  opt("token_budget", tc.token_budget);
  opt("beta1", tc.beta1);
  opt("beta2", tc.beta2);
  opt("adam_eps", tc.adam_eps);
  opt("weight_decay", tc.weight_decay);
  opt("clip_norm", tc.clip_norm);
  opt("log_every", tc.log_every);
  if (j.contains("precision")) tc.precision = parse_dtype(j.at("precision").get<std::string>());
}

TrainConfig parse_train_config(const nlohmann::json& j) {
  TrainConfig tc;
  try {
    tc = j.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  if (tc.steps == 0) throw ConfigError("train: steps must be at least 1");
  tc.validate();
  return tc;
}

std::vector<std::int32_t> Batch::targets() const {
  std::vector<std::int32_t> out(tokens.size(), -1);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t + 1 < seq; ++t) out[b * seq + t] = tokens[b * seq + t + 1];
  }
  return out;
}

void Batch::validate(std::size_t vocab) const {
  if (seq < 2) throw ShapeError("batch: seq must be at least 2");
  if (tokens.size() != batch * seq) throw ShapeError("batch: token count does not match shape");
  for (std::int32_t t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw ConfigError("batch: token id " + std::to_string(t) + " outside vocab");
    }
  }
}

BatchSampler::BatchSampler(std::span<const std::int32_t> corpus, std::size_t batch,
                           std::size_t seq, std::uint64_t seed)
    : corpus_(corpus), batch_(batch), seq_(seq), rng_(mix_seed({seed, 0x62617463})) {
  if (batch == 0 || seq < 2) throw ConfigError("sampler: need batch >= 1 and seq >= 2");
  if (corpus.size() < seq) {
    throw ConfigError("sampler: corpus of " + std::to_string(corpus.size()) +
                      " tokens is shorter than seq " + std::to_string(seq));
  }
}

Batch BatchSampler::next() {
  Batch out{{}, batch_, seq_};
  out.tokens.reserve(batch_ * seq_);
  for (std::size_t b = 0; b < batch_; ++b) {
    const std::size_t start = rng_.below(corpus_.size() - seq_ + 1);
    out.tokens.insert(out.tokens.end(), corpus_.begin() + start, corpus_.begin() + start + seq_);
  }
  return out;
}

std::pair<std::span<const std::int32_t>, std::span<const std::int32_t>> split_corpus(
    std::span<const std::int32_t> corpus, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("split fraction outside [0, 1]");
  const auto cut = static_cast<std::size_t>(std::llround(fraction * double(corpus.size())));
  return {corpus.first(cut), corpus.subspan(cut)};
}

namespace {

void check_layer_lists(std::size_t a, std::size_t b) {
  if (a != b) {
    throw ShapeError("ild_loss: " + std::to_string(a) + " teacher layers vs " + std::to_string(b) +
                     " student layers");
  }
}

void check_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": " + shape_string(a) + " vs " + shape_string(b));
}

}  // namespace

Var ild_loss(std::span<const Tensor> teacher, std::span<const Var> student) {
  check_layer_lists(teacher.size(), student.size());
  if (student.empty()) throw ShapeError("ild_loss: no layers");
  Tape& tape = student.front().tape();
  Var total;
  for (std::size_t l = 0; l < student.size(); ++l) {
    check_same_shape(teacher[l].shape(), student[l].shape(), "ild_loss");
    Var diff = ops::sub(student[l], tape.constant(teacher[l]));
    Var term = ops::scale(ops::sum(ops::mul(diff, diff)), 1.0 / double(student[l].rows()));
    total = total.valid() ? ops::add(total, term) : term;
  }
  return total;
}

double ild_loss(std::span<const Tensor> teacher, std::span<const Tensor> student) {
  check_layer_lists(teacher.size(), student.size());
  double total = 0.0;
  for (std::size_t l = 0; l < student.size(); ++l) {
    check_same_shape(teacher[l].shape(), student[l].shape(), "ild_loss");
    double s = 0.0;
    for (std::size_t i = 0; i < student[l].numel(); ++i) {
      const double d = student[l][i] - teacher[l][i];
      s += d * d;
    }
    total += s / double(student[l].rows());
  }
  return total;
}

namespace {

// Row-wise log-softmax in double.
Tensor log_softmax(const Tensor& logits) {
  Tensor out = logits;
  const std::size_t cols = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    double* row = out.data() + r * cols;
    const double m = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(row[j] - m);
    const double lse = m + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) row[j] -= lse;
  }
  return out;
}

void check_batch_divides(std::size_t rows, std::size_t batch) {
  if (batch == 0 || rows % batch != 0) {
    throw ShapeError("kd_loss: " + std::to_string(rows) + " rows do not split into batch " +
                     std::to_string(batch));
  }
}

}  // namespace

Var kd_loss(const Tensor& teacher_logits, const Var& student_logits, std::size_t batch) {
  check_same_shape(teacher_logits.shape(), student_logits.shape(), "kd_loss");
  check_batch_divides(teacher_logits.rows(), batch);
  Tensor log_p = log_softmax(teacher_logits);
  Tensor log_q = log_softmax(student_logits.value());
  double total = 0.0;
  for (std::size_t i = 0; i < log_p.numel(); ++i) total += std::exp(log_p[i]) * (log_p[i] - log_q[i]);
  const double inv_batch = 1.0 / double(batch);
  Tensor value({1}, {total * inv_batch});
  // d/dz KL(p || softmax(z)) = softmax(z) - p, with both softmaxes from the
  // same routine so equal logits give an exactly zero gradient.
  Tape::BackwardFn fn = [s = student_logits, log_p = std::move(log_p), log_q = std::move(log_q),
                         inv_batch](Tape& tape, const Tensor& g) {
    Tensor& gs = tape.grad_slot(s);
    const double k = g[0] * inv_batch;
    for (std::size_t i = 0; i < gs.numel(); ++i) gs[i] += k * (std::exp(log_q[i]) - std::exp(log_p[i]));
  };
  return student_logits.tape().record(std::move(value), {student_logits}, std::move(fn), "kd_loss");
}

double kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, std::size_t batch) {
  check_same_shape(teacher_logits.shape(), student_logits.shape(), "kd_loss");
  check_batch_divides(teacher_logits.rows(), batch);
  const Tensor lp = log_softmax(teacher_logits);
  const Tensor lq = log_softmax(student_logits);
  double total = 0.0;
  for (std::size_t i = 0; i < lp.numel(); ++i) total += std::exp(lp[i]) * (lp[i] - lq[i]);
  return total / double(batch);
}

Var lm_loss(const Var& logits, std::span<const std::int32_t> targets) {
  const auto n = std::count_if(targets.begin(), targets.end(), [](std::int32_t t) { return t >= 0; });
  if (n == 0) throw ShapeError("lm_loss: no targets");
  return ops::scale(ops::nll_rows(ops::log_softmax_rows(logits), targets), 1.0 / double(n));
}

double learning_rate(const TrainConfig& tc, std::size_t step, std::size_t total) {
  const auto warm = static_cast<std::size_t>(std::ceil(tc.warmup * double(total)));
  if (step < warm) return tc.lr * double(step + 1) / double(warm);
  const double span = double(std::max<std::size_t>(1, total - warm));
  const double progress = double(step - warm) / span;
  return tc.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

void AdamW::step(ParamStore& params, const GradMap& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  for (auto& [name, entry] : params) {
    if (!entry.trainable) continue;
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    Tensor& p = entry.value;
    check_same_shape(p.shape(), g.shape(), "adamw");
    Tensor& m = m_.try_emplace(name, Tensor(p.shape())).first->second;
    Tensor& v = v_.try_emplace(name, Tensor(p.shape())).first->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + wd_ * p[i];
      p[i] -= lr * update;
    }
  }
}

double clip_grad_norm(GradMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g.values()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, g] : grads) {
      for (double& v : g.values()) v *= s;
    }
  }
  return norm;
}

double TrainReport::smoothed_final(std::size_t window) const {
  if (losses.empty()) return 0.0;
  const std::size_t n = std::min(window, losses.size());
  double s = 0.0;
  for (std::size_t i = losses.size() - n; i < losses.size(); ++i) s += losses[i];
  return s / double(n);
}

TrainReport train(HybridModel& model, BatchSampler& data, const TrainConfig& tc,
                  const StepLoss& loss, std::ostream* log) {
  tc.validate();
  TrainReport report;
  const std::size_t total = tc.effective_steps();
  if (total == 0) return report;
  const auto start = std::chrono::steady_clock::now();
  AdamW opt(tc);
  report.losses.reserve(total);
  for (std::size_t step = 0; step < total; ++step) {
    const Batch batch = data.next();
    batch.validate(model.cfg.vocab);
    Tape tape;
    VarMap vars = bind(tape, model.params);
    GradMap grads;
    double value = 0.0;
    try {
      Var l = loss(vars, batch);
      value = l.value().item();
      if (!std::isfinite(value)) throw KernelError("non-finite loss");
      grads = backward(l, vars);
    } catch (const KernelError& e) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    clip_grad_norm(grads, tc.clip_norm);
    const double lr = learning_rate(tc, step, total);
    opt.step(model.params, grads, lr);
    for (auto& [name, e] : model.params) e.value.cast(tc.precision);
    report.losses.push_back(value);
    if (log != nullptr && (step % tc.log_every == 0 || step + 1 == total)) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      *log << "step " << step << " loss " << value << " lr " << lr << " seconds " << secs << '\n';
    }
  }
  report.steps = total;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::vector<Tensor> mixer_outputs(const HybridModel& model, const Batch& batch) {
  Tape tape(false);
  VarMap vars = bind(tape, model.params);
  ForwardTrace trace;
  forward(vars, model, batch.tokens, batch.batch, batch.seq, &trace);
  std::vector<Tensor> out;
  out.reserve(trace.mixer_outputs.size());
  for (const Var& v : trace.mixer_outputs) out.push_back(v.value());
  return out;
}

double evaluate_ild(const HybridModel& teacher, const HybridModel& student, const Batch& batch) {
  const std::vector<Tensor> t = mixer_outputs(teacher, batch);
  const std::vector<Tensor> s = mixer_outputs(student, batch);
  return ild_loss(t, s);
}

double evaluate_kd(const HybridModel& teacher, const HybridModel& student, const Batch& batch) {
  return kd_loss(forward_logits(teacher, batch.tokens, batch.batch, batch.seq),
                 forward_logits(student, batch.tokens, batch.batch, batch.seq), batch.batch);
}

namespace {

void check_pair(const HybridModel& teacher, const HybridModel& student, bool same_depth) {
  const ModelConfig& t = teacher.cfg;
  const ModelConfig& s = student.cfg;
  if (t.vocab != s.vocab) throw ConfigError("teacher and student vocabularies differ");
  if (same_depth && (t.L != s.L || t.d != s.d)) {
    throw ConfigError("teacher and student differ in depth or width");
  }
}

}  // namespace

TrainReport run_ild(const HybridModel& teacher, HybridModel& student, BatchSampler& data,
                    const TrainConfig& tc, std::ostream* log) {
  check_pair(teacher, student, true);
  const auto& kinds = student.cfg.layer_kinds;
  const bool uniform = std::all_of(kinds.begin(), kinds.end(), [&](LayerKind k) { return k == kinds[0]; });
  if (!uniform || kinds[0] == LayerKind::kMha) {
    throw ConfigError("ILD student must be all-MLA or all-Mamba2");
  }
  return train(
      student, data, tc,
      [&](const VarMap& vars, const Batch& b) {
        const std::vector<Tensor> target = mixer_outputs(teacher, b);
        ForwardTrace trace;
        forward(vars, student, b.tokens, b.batch, b.seq, &trace);
        return ild_loss(target, trace.mixer_outputs);
      },
      log);
}

TrainReport run_kd(const HybridModel& teacher, HybridModel& student, BatchSampler& data,
                   const TrainConfig& tc, std::ostream* log) {
  check_pair(teacher, student, false);
  return train(
      student, data, tc,
      [&](const VarMap& vars, const Batch& b) {
        const Tensor target = forward_logits(teacher, b.tokens, b.batch, b.seq);
        return kd_loss(target, forward(vars, student, b.tokens, b.batch, b.seq), b.batch);
      },
      log);
}

TrainReport run_lm(HybridModel& model, BatchSampler& data, const TrainConfig& tc,
                   std::ostream* log) {
  return train(
      model, data, tc,
      [&](const VarMap& vars, const Batch& b) {
        const std::vector<std::int32_t> targets = b.targets();
        return lm_loss(forward(vars, model, b.tokens, b.batch, b.seq), targets);
      },
      log);
}

}  // namespace hforge
