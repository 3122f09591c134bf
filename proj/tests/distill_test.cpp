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

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "hforge/error.hpp"
#include "hforge/ops.hpp"
#include "reference_model.hpp"
#include "test_support.hpp"

namespace hforge {
namespace {

using testing::tiny_config;
using testing::tiny_mla;

std::vector<std::int32_t> markov_corpus(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int32_t> out(n);
  out[0] = 0;
  for (std::size_t i = 1; i < n; ++i) {
    out[i] = rng.uniform() < 0.8 ? static_cast<std::int32_t>((out[i - 1] * 7 + 3) % vocab)
                                 : static_cast<std::int32_t>(rng.below(vocab));
  }
  return out;
}

TrainConfig small_train(std::size_t steps) {
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = 2;
  tc.seq_len = 8;
  tc.lr = 3e-3;
  tc.precision = DType::kF64;
  return tc;
}

TEST(IldLossTest, ClosedForms) {
  Tensor zero = Tensor::matrix(1, 5);
  Tensor ones = Tensor::full({1, 5}, 1.0);
  std::vector<Tensor> t{zero}, s{ones};
  // One token of five features: the sum of squares.
  EXPECT_DOUBLE_EQ(ild_loss(t, s), 5.0);
  // Five tokens of one feature: mean over tokens.
  std::vector<Tensor> t2{Tensor::matrix(5, 1)}, s2{Tensor::full({5, 1}, 1.0)};
  EXPECT_DOUBLE_EQ(ild_loss(t2, s2), 1.0);
  EXPECT_EQ(ild_loss(s, s), 0.0);
  std::vector<Tensor> wrong{Tensor::matrix(2, 5)};
  EXPECT_THROW(ild_loss(t, wrong), ShapeError);
  EXPECT_THROW(ild_loss(t, std::vector<Tensor>{}), ShapeError);
}

TEST(IldLossTest, SymmetricUnderLayerRelabeling) {
  Rng rng(1);
  std::vector<Tensor> t, s;
  for (int l = 0; l < 4; ++l) {
    t.push_back(rng.normal_tensor({3, 4}, 1.0));
    s.push_back(rng.normal_tensor({3, 4}, 1.0));
  }
  const double base = ild_loss(t, s);
  std::vector<Tensor> tp{t[2], t[0], t[3], t[1]}, sp{s[2], s[0], s[3], s[1]};
  EXPECT_NEAR(ild_loss(tp, sp), base, 1e-12);
  EXPECT_GT(base, 0.0);
  s[1] = t[1];
  std::vector<Tensor> same = t;
  EXPECT_EQ(ild_loss(t, same), 0.0);
}

TEST(IldLossTest, VarMatchesValue) {
  Rng rng(2);
  std::vector<Tensor> t{rng.normal_tensor({3, 4}, 1.0), rng.normal_tensor({3, 4}, 1.0)};
  std::vector<Tensor> s{rng.normal_tensor({3, 4}, 1.0), rng.normal_tensor({3, 4}, 1.0)};
  Tape tape;
  std::vector<Var> vs{tape.leaf(s[0], true), tape.leaf(s[1], true)};
  EXPECT_NEAR(ild_loss(t, vs).value().item(), ild_loss(t, s), 1e-12);
}

TEST(IldLossTest, GradientMatchesFiniteDifferences) {
  ModelConfig tcfg = tiny_config(LayerKind::kMha, 2);
  HybridModel teacher = make_model(tcfg, std::nullopt, 3);
  HybridModel student = upcycle_model(teacher, LayerKind::kMla, tiny_mla());
  Batch b{markov_corpus(10, tcfg.vocab, 4), 2, 5};
  const std::vector<Tensor> target = mixer_outputs(teacher, b);
  testing::LossBuilder build = [&](Tape&, const VarMap& vars) {
    ForwardTrace trace;
    forward(vars, student, b.tokens, b.batch, b.seq, &trace);
    return ild_loss(target, trace.mixer_outputs);
  };
  auto check = testing::check_gradients(build, student.params);
  EXPECT_LT(check.max_rel_error, 1e-4) << check.worst;
}

double kl_oracle(const std::vector<double>& p_logits, const std::vector<double>& q_logits) {
  auto norm = [](const std::vector<double>& z) {
    double s = 0.0;
    for (double v : z) s += std::exp(v);
    std::vector<double> p;
    for (double v : z) p.push_back(std::exp(v) / s);
    return p;
  };
  auto p = norm(p_logits), q = norm(q_logits);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
  return kl;
}

TEST(KdLossTest, ClosedFormPeakedTeacher) {
  Tensor t = Tensor::from_rows({{10.0, 0.0, 0.0}});
  Tensor s = Tensor::from_rows({{0.0, 0.0, 0.0}});
  const double z = std::exp(10.0) + 2.0;
  const double p0 = std::exp(10.0) / z, p1 = 1.0 / z;
  const double expected = p0 * (std::log(p0) + std::log(3.0)) + 2.0 * p1 * (std::log(p1) + std::log(3.0));
  EXPECT_NEAR(kd_loss(t, s, 1), expected, 1e-12);
  Tape tape;
  EXPECT_NEAR(kd_loss(t, tape.leaf(s, true), 1).value().item(), expected, 1e-12);
}

TEST(KdLossTest, IdentityAndGibbs) {
  Rng rng(5);
  Tensor a = rng.normal_tensor({4, 6}, 3.0);
  EXPECT_NEAR(kd_loss(a, a, 2), 0.0, 1e-15);
  for (int i = 0; i < 1000; ++i) {
    Tensor p = rng.normal_tensor({1, 5}, 4.0);
    Tensor q = rng.normal_tensor({1, 5}, 4.0);
    const double kl = kd_loss(p, q, 1);
    ASSERT_GE(kl, -1e-15);
    std::vector<double> pv(p.values().begin(), p.values().end());
    std::vector<double> qv(q.values().begin(), q.values().end());
    ASSERT_NEAR(kl, kl_oracle(pv, qv), 1e-10);
  }
}

TEST(KdLossTest, SumsPositionsAndAveragesBatch) {
  Rng rng(6);
  Tensor p = rng.normal_tensor({6, 4}, 1.0);
  Tensor q = rng.normal_tensor({6, 4}, 1.0);
  double total = 0.0;
  for (std::size_t r = 0; r < 6; ++r) {
    std::vector<double> pv, qv;
    for (std::size_t j = 0; j < 4; ++j) {
      pv.push_back(p(r, j));
      qv.push_back(q(r, j));
    }
    total += kl_oracle(pv, qv);
  }
  EXPECT_NEAR(kd_loss(p, q, 2), total / 2.0, 1e-12);
  EXPECT_NEAR(kd_loss(p, q, 3), total / 3.0, 1e-12);
  EXPECT_THROW(kd_loss(p, q, 4), ShapeError);
  EXPECT_THROW(kd_loss(p, Tensor::matrix(6, 5), 1), ShapeError);
}

TEST(KdLossTest, GradientMatchesFiniteDifferences) {
  ModelConfig cfg = tiny_config(LayerKind::kMha, 2);
  HybridModel teacher = make_model(cfg, std::nullopt, 7);
  HybridModel student = upcycle_model(teacher, LayerKind::kMamba2, std::nullopt);
  Batch b{markov_corpus(10, cfg.vocab, 8), 2, 5};
  const Tensor target = forward_logits(teacher, b.tokens, 2, 5);
  testing::LossBuilder build = [&](Tape&, const VarMap& vars) {
    return kd_loss(target, forward(vars, student, b.tokens, 2, 5), 2);
  };
  auto check = testing::check_gradients(build, student.params);
  EXPECT_LT(check.max_rel_error, 1e-4) << check.worst;
}

TEST(ScheduleTest, WarmupThenCosine) {
  TrainConfig tc;
  tc.lr = 1.0;
  tc.warmup = 0.1;
  const std::size_t total = 100;
  for (std::size_t s = 0; s < 10; ++s) EXPECT_NEAR(learning_rate(tc, s, total), double(s + 1) / 10.0, 1e-15);
  EXPECT_NEAR(learning_rate(tc, 10, total), 1.0, 1e-15);
  for (std::size_t s = 11; s < total; ++s) {
    EXPECT_LT(learning_rate(tc, s, total), learning_rate(tc, s - 1, total));
    EXPECT_GT(learning_rate(tc, s, total), 0.0);
  }
  EXPECT_NEAR(learning_rate(tc, 55, total), 0.5, 1e-12);
  tc.warmup = 0.0;
  EXPECT_EQ(learning_rate(tc, 0, total), 1.0);
}

TEST(AdamWTest, ZeroGradientLeavesParametersUnchanged) {
  ParamStore p;
  p.add("w", Tensor::from_rows({{1.0, -2.0}}));
  const ParamStore before = p;
  AdamW opt(0.9, 0.8, 1e-8, 0.0);
  GradMap g{{"w", Tensor::matrix(1, 2)}};
  opt.step(p, g, 0.1);
  EXPECT_TRUE(p == before);
}

TEST(AdamWTest, FirstStepsMatchHandComputation) {
  ParamStore p;
  p.add("w", Tensor::from_rows({{1.0}}));
  p.add("frozen", Tensor::from_rows({{1.0}}), false);
  AdamW opt(0.9, 0.8, 1e-8, 0.0);
  opt.step(p, {{"w", Tensor::from_rows({{0.5}})}, {"frozen", Tensor::from_rows({{3.0}})}}, 0.1);
  EXPECT_NEAR(p.get("w")[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_EQ(p.get("frozen")[0], 1.0);
  const double w1 = p.get("w")[0];
  opt.step(p, {{"w", Tensor::from_rows({{-1.0}})}}, 0.1);
  const double m = 0.9 * 0.05 + 0.1 * -1.0, v = 0.8 * 0.05 + 0.2 * 1.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.64);
  EXPECT_NEAR(p.get("w")[0], w1 - 0.1 * mh / (std::sqrt(vh) + 1e-8), 1e-15);
}

TEST(AdamWTest, ClipGradNorm) {
  GradMap g{{"a", Tensor::from_rows({{3.0}})}, {"b", Tensor::from_rows({{4.0}})}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g["a"][0], 0.6, 1e-15);
  EXPECT_NEAR(g["b"][0], 0.8, 1e-15);
  EXPECT_NEAR(clip_grad_norm(g, 0.0), 1.0, 1e-15);
}

TEST(TrainConfigTest, JsonRoundTripAndValidation) {
  TrainConfig tc = small_train(17);
  tc.seed = 99;
  tc.token_budget = 64;
  nlohmann::json j = tc;
  TrainConfig back = parse_train_config(j);
  EXPECT_EQ(back.steps, 17u);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.precision, DType::kF64);
  EXPECT_EQ(back.effective_steps(), 4u);
  j["steps"] = 0;
  EXPECT_THROW(parse_train_config(j), ConfigError);
  j["steps"] = 3;
  j["warmup"] = 1.0;
  EXPECT_THROW(parse_train_config(j), ConfigError);
  j["warmup"] = "x";
  EXPECT_THROW(parse_train_config(j), ConfigError);
}

TEST(BatchTest, TargetsAndSampling) {
  Batch b{{1, 2, 3, 4, 5, 6}, 2, 3};
  EXPECT_EQ(b.targets(), (std::vector<std::int32_t>{2, 3, -1, 5, 6, -1}));
  EXPECT_NO_THROW(b.validate(7));
  EXPECT_THROW(b.validate(6), ConfigError);
  EXPECT_THROW((Batch{{1, 2}, 2, 1}.validate(7)), ShapeError);
  auto corpus = markov_corpus(200, 24, 9);
  BatchSampler s1(corpus, 3, 10, 4), s2(corpus, 3, 10, 4), s3(corpus, 3, 10, 5);
  Batch a = s1.next();
  EXPECT_EQ(a.tokens, s2.next().tokens);
  EXPECT_NE(a.tokens, s3.next().tokens);
  EXPECT_THROW(BatchSampler(std::span(corpus).first(5), 1, 10, 0), ConfigError);
  auto [head, tail] = split_corpus(corpus, 0.2);
  EXPECT_EQ(head.size(), 40u);
  EXPECT_EQ(tail.size(), 160u);
}

class TrainFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg_ = tiny_config(LayerKind::kMha, 2);
    teacher_ = make_model(cfg_, std::nullopt, 11);
    corpus_ = markov_corpus(2000, cfg_.vocab, 12);
  }
  ModelConfig cfg_;
  HybridModel teacher_;
  std::vector<std::int32_t> corpus_;
};

TEST_F(TrainFixture, ZeroStepsLeaveStudentUnchanged) {
  HybridModel student = upcycle_model(teacher_, LayerKind::kMla, tiny_mla());
  const ParamStore before = student.params;
  BatchSampler data(corpus_, 2, 8, 0);
  TrainConfig tc = small_train(0);
  EXPECT_EQ(run_ild(teacher_, student, data, tc).steps, 0u);
  EXPECT_EQ(run_kd(teacher_, student, data, tc).steps, 0u);
  EXPECT_TRUE(student.params == before);
}

TEST_F(TrainFixture, SelfDistillationStaysAtZero) {
  HybridModel student = teacher_;
  BatchSampler data(corpus_, 2, 8, 1);
  TrainReport r = run_kd(teacher_, student, data, small_train(20));
  ASSERT_EQ(r.losses.size(), 20u);
  for (double l : r.losses) EXPECT_LE(l, 1e-8);
}

TEST_F(TrainFixture, TrainingIsDeterministic) {
  auto run = [&] {
    HybridModel student = upcycle_model(teacher_, LayerKind::kMamba2, std::nullopt);
    BatchSampler data(corpus_, 2, 8, 3);
    run_kd(teacher_, student, data, small_train(5));
    return student.params;
  };
  const ParamStore a = run();
  const ParamStore b = run();
  for (const auto& [name, e] : a) EXPECT_TRUE(bitwise_equal(e.value, b.get(name))) << name;
}

TEST_F(TrainFixture, StructuredInitStartsCloserThanRandom) {
  for (LayerKind kind : {LayerKind::kMla, LayerKind::kMamba2}) {
    std::optional<MLAConfig> m;
    if (kind == LayerKind::kMla) m = tiny_mla();
    HybridModel structured = upcycle_model(teacher_, kind, m);
    HybridModel random = random_mixer_model(teacher_, kind, m, 13);
    Batch b = BatchSampler(corpus_, 4, 8, 14).next();
    EXPECT_LT(evaluate_ild(teacher_, structured, b), evaluate_ild(teacher_, random, b));
  }
}

TEST_F(TrainFixture, IldReducesLossAndTrainsEveryBlock) {
  HybridModel student = upcycle_model(teacher_, LayerKind::kMamba2, std::nullopt);
  const ParamStore before = student.params;
  BatchSampler data(corpus_, 2, 8, 15);
  std::ostringstream log;
  TrainConfig tc = small_train(200);
  tc.log_every = 50;
  TrainReport r = run_ild(teacher_, student, data, tc, &log);
  ASSERT_EQ(r.losses.size(), 200u);
  Batch probe = BatchSampler(corpus_, 4, 8, 16).next();
  HybridModel initial = upcycle_model(teacher_, LayerKind::kMamba2, std::nullopt);
  EXPECT_LT(evaluate_ild(teacher_, student, probe), evaluate_ild(teacher_, initial, probe));
  EXPECT_LT(r.smoothed_final(20), r.losses.front());
  EXPECT_FALSE(bitwise_equal(student.params.get("layers.0.mlp.w_up"), before.get("layers.0.mlp.w_up")));
  EXPECT_FALSE(bitwise_equal(student.params.get("embed"), before.get("embed")));
  // step 0, 50, 100, 150 and the last step.
  std::size_t lines = 0;
  for (char c : log.str()) lines += c == '\n';
  EXPECT_EQ(lines, 5u);
  EXPECT_EQ(log.str().rfind("step 0 loss ", 0), 0u);
}

TEST_F(TrainFixture, IldRejectsArchitectureMismatch) {
  BatchSampler data(corpus_, 2, 8, 0);
  HybridModel mha = teacher_;
  EXPECT_THROW(run_ild(teacher_, mha, data, small_train(1)), ConfigError);
  ModelConfig mixed = cfg_;
  mixed.layer_kinds = {LayerKind::kMla, LayerKind::kMamba2};
  HybridModel hybrid = make_model(mixed, tiny_mla(), 1);
  EXPECT_THROW(run_ild(teacher_, hybrid, data, small_train(1)), ConfigError);
  ModelConfig deeper = tiny_config(LayerKind::kMamba2, 3);
  HybridModel deep = make_model(deeper, std::nullopt, 1);
  EXPECT_THROW(run_ild(teacher_, deep, data, small_train(1)), ConfigError);
}

TEST_F(TrainFixture, DivergenceGuard) {
  HybridModel student = teacher_;
  BatchSampler data(corpus_, 2, 8, 0);
  StepLoss bad = [&](const VarMap& vars, const Batch& b) {
    Var logits = forward(vars, student, b.tokens, b.batch, b.seq);
    return ops::log(ops::neg(ops::sum(ops::exp(logits))));
  };
  EXPECT_THROW(train(student, data, small_train(3), bad), DivergenceError);
}

TEST_F(TrainFixture, TeacherTrainingLowersCrossEntropy) {
  HybridModel model = teacher_;
  BatchSampler data(corpus_, 4, 16, 17);
  TrainConfig tc = small_train(150);
  tc.batch_size = 4;
  tc.seq_len = 16;
  tc.lr = 1e-2;
  TrainReport r = run_lm(model, data, tc);
  EXPECT_LT(r.smoothed_final(20), 0.7 * r.losses.front());
}

}  // namespace
}  // namespace hforge
