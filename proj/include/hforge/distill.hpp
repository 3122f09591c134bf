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

#ifndef HFORGE_DISTILL_HPP
#define HFORGE_DISTILL_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include <json.hpp>

#include "hforge/autograd.hpp"
#include "hforge/model.hpp"
#include "hforge/rng.hpp"

namespace hforge {

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  std::size_t seq_len = 32;
  double lr = 3e-3;
  double warmup = 0.01;  // fraction of steps
  std::uint64_t seed = 0;
  DType precision = DType::kF32;
  std::size_t token_budget = 0;  // 0: unlimited
  double beta1 = 0.9;
  double beta2 = 0.8;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // 0 disables
  std::size_t log_every = 10;

  /// Steps actually run once the token budget is applied.
  std::size_t effective_steps() const noexcept;
  /// Checks ranges; steps == 0 is accepted and means "no update".
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& tc);
void from_json(const nlohmann::json& j, TrainConfig& tc);
/// Parses and validates; rejects steps == 0.
TrainConfig parse_train_config(const nlohmann::json& j);

/// Row-major token ids, batch x seq. Targets are the ids shifted by one.
struct Batch {
  std::vector<std::int32_t> tokens;
  std::size_t batch = 0;
  std::size_t seq = 0;

  /// Next-token targets with -1 in the last column of every row.
  std::vector<std::int32_t> targets() const;
  void validate(std::size_t vocab) const;
};

/// Deterministic random windows over a token corpus.
class BatchSampler {
 public:
  BatchSampler(std::span<const std::int32_t> corpus, std::size_t batch, std::size_t seq,
               std::uint64_t seed);
  Batch next();

 private:
  std::span<const std::int32_t> corpus_;
  std::size_t batch_;
  std::size_t seq_;
  Rng rng_;
};

/// Splits a corpus into a leading `fraction` and the rest.
std::pair<std::span<const std::int32_t>, std::span<const std::int32_t>> split_corpus(
    std::span<const std::int32_t> corpus, double fraction);

/// Sum over layers of the per-token mean squared error, where the squared
/// error of a token is summed over features.
Var ild_loss(std::span<const Tensor> teacher, std::span<const Var> student);
double ild_loss(std::span<const Tensor> teacher, std::span<const Tensor> student);

/// Forward KL(teacher || student) of the row softmaxes, summed over rows and
/// divided by `batch`.
Var kd_loss(const Tensor& teacher_logits, const Var& student_logits, std::size_t batch);
double kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, std::size_t batch);

/// Mean next-token cross entropy over rows with a target.
Var lm_loss(const Var& logits, std::span<const std::int32_t> targets);

/// Linear warmup over ceil(warmup * total) steps, then cosine decay to zero.
double learning_rate(const TrainConfig& tc, std::size_t step, std::size_t total);

/// AdamW over the trainable entries of a parameter store.
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay);
  explicit AdamW(const TrainConfig& tc)
      : AdamW(tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay) {}

  void step(ParamStore& params, const GradMap& grads, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

/// Scales the gradients so their global L2 norm is at most `max_norm` and
/// returns the norm before scaling.
double clip_grad_norm(GradMap& grads, double max_norm);

struct TrainReport {
  std::vector<double> losses;  // one per step
  std::size_t steps = 0;
  double seconds = 0.0;
  /// Mean of the last `window` losses (all when fewer).
  double smoothed_final(std::size_t window = 10) const;
};

/// One optimization problem: the loss of the student on a batch.
using StepLoss = std::function<Var(const VarMap& vars, const Batch& batch)>;

/// Shared loop: samples batches, applies the schedule, clips, steps AdamW,
/// rounds to the storage precision and logs "step loss lr seconds" lines.
/// Throws DivergenceError on a non-finite loss.
TrainReport train(HybridModel& model, BatchSampler& data, const TrainConfig& tc,
                  const StepLoss& loss, std::ostream* log = nullptr);

/// Teacher mixer outputs for a batch, one tensor per layer.
std::vector<Tensor> mixer_outputs(const HybridModel& model, const Batch& batch);

/// ILD loss of `student` against `teacher` on one batch, without gradients.
double evaluate_ild(const HybridModel& teacher, const HybridModel& student, const Batch& batch);
/// KD loss on one batch, without gradients.
double evaluate_kd(const HybridModel& teacher, const HybridModel& student, const Batch& batch);

/// Aligns every student mixer output to the teacher's while the student
/// runs its own forward pass; all student parameters train. The student
/// must share L, d and vocab with the teacher and hold only MLA or only
/// Mamba2 layers.
TrainReport run_ild(const HybridModel& teacher, HybridModel& student, BatchSampler& data,
                    const TrainConfig& tc, std::ostream* log = nullptr);

/// End-to-end distillation of the teacher's next-token distributions.
TrainReport run_kd(const HybridModel& teacher, HybridModel& student, BatchSampler& data,
                   const TrainConfig& tc, std::ostream* log = nullptr);

/// Next-token cross-entropy training, used for the teacher.
TrainReport run_lm(HybridModel& model, BatchSampler& data, const TrainConfig& tc,
                   std::ostream* log = nullptr);

}  // namespace hforge

#endif  // HFORGE_DISTILL_HPP
