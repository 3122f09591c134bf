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

#include "hforge/harness.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "hforge/compose.hpp"
#include "hforge/error.hpp"
#include "hforge/smart.hpp"
#include "test_support.hpp"

namespace hforge {
namespace {

using testing::tiny_config;
using testing::tiny_mla;

SynthSpec tiny_spec(std::uint64_t seed = 3) {
  SynthSpec s;
  s.vocab = 24;
  s.seq_len = 16;
  s.tokens = 20000;
  s.seed = seed;
  return s;
}

TrainConfig tiny_train(std::size_t steps) {
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = 4;
  tc.seq_len = 16;
  tc.lr = 1e-2;
  tc.precision = DType::kF64;
  return tc;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("hforge_harness_" + name);
}

TEST(SynthTest, DeterministicPerSeed) {
  const SynthData a = gen_data(tiny_spec(1)), b = gen_data(tiny_spec(1)), c = gen_data(tiny_spec(2));
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.copied, b.copied);
  EXPECT_NE(a.tokens, c.tokens);
  EXPECT_EQ(a.train_tokens, 18000u);
  EXPECT_EQ(a.heldout().size(), 2000u);
}

TEST(SynthTest, CoversVocabulary) {
  SynthSpec s;
  s.tokens = 100000;
  const SynthData d = gen_data(s);
  std::set<std::int32_t> seen(d.tokens.begin(), d.tokens.end());
  EXPECT_EQ(seen.size(), s.vocab);
  EXPECT_GE(*seen.begin(), 0);
  EXPECT_LT(*seen.rbegin(), std::int32_t(s.vocab));
}

TEST(SynthTest, PlantedCopiesRepeatTheSpan) {
  const SynthSpec s = tiny_spec();
  const SynthData d = gen_data(s);
  std::size_t marks = 0;
  for (std::size_t p = 0; p < d.tokens.size(); ++p) {
    if (!d.copied[p]) continue;
    ++marks;
    ASSERT_GE(p, s.copy_span);
    EXPECT_EQ(d.tokens[p], d.tokens[p - s.copy_span]);
  }
  const double rate = double(marks) / double(d.tokens.size());
  EXPECT_NEAR(rate, s.copy_prob, 0.01);
}

TEST(SynthTest, UnigramPerplexityBounds) {
  const SynthData d = gen_data(tiny_spec());
  const double ppl = unigram_perplexity(d.tokens, 24);
  EXPECT_GT(ppl, 1.0);
  EXPECT_LE(ppl, 24.0 + 1e-9);
  std::vector<std::int32_t> flat(2400);
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = std::int32_t(i % 24);
  EXPECT_NEAR(unigram_perplexity(flat, 24), 24.0, 1e-9);
  EXPECT_THROW(unigram_perplexity(flat, 12), ConfigError);
}

TEST(SynthTest, SpecValidationAndJson) {
  SynthSpec s = tiny_spec();
  nlohmann::json j = s;
  const SynthSpec back = parse_synth_spec(j);
  EXPECT_EQ(back.vocab, s.vocab);
  EXPECT_EQ(back.seed, s.seed);
  EXPECT_DOUBLE_EQ(back.copy_prob, s.copy_prob);
  j["heldout"] = 0.0;
  EXPECT_THROW(parse_synth_spec(j), ConfigError);
  j = s;
  j["vocab"] = 1;
  EXPECT_THROW(parse_synth_spec(j), ConfigError);
  j = s;
  j["copy_span"] = 4;
  EXPECT_THROW(parse_synth_spec(j), ConfigError);
  j = s;
  j["order"] = 3;
  EXPECT_THROW(parse_synth_spec(j), ConfigError);
  j = s;
  j["tokens"] = "many";
  EXPECT_THROW(parse_synth_spec(j), ConfigError);
}

TEST(TokenFileTest, RoundTripAndCorruption) {
  const SynthData d = gen_data(tiny_spec());
  const auto path = temp_path("tokens.bin");
  save_tokens(d, path);
  const SynthData back = load_tokens(path);
  EXPECT_EQ(back.tokens, d.tokens);
  EXPECT_EQ(back.copied, d.copied);
  EXPECT_EQ(back.train_tokens, d.train_tokens);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(load_tokens(path), FormatError);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "not tokens at all, just text";
  }
  EXPECT_THROW(load_tokens(path), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_tokens(path), FormatError);
}

TEST(BatchesTest, SequentialTiling) {
  std::vector<std::int32_t> t(100);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::int32_t(i);
  const auto bs = sequential_batches(t, 2, 10, 100);
  ASSERT_EQ(bs.size(), 5u);
  EXPECT_EQ(bs[1].tokens.front(), 20);
  EXPECT_EQ(bs[4].tokens.back(), 99);
  EXPECT_EQ(sequential_batches(t, 2, 10, 2).size(), 2u);
  EXPECT_THROW(sequential_batches(t, 20, 10, 1), ConfigError);
}

TEST(EvalTest, SelfKlIsZeroAndUniformHeadGivesVocabPerplexity) {
  const SynthData d = gen_data(tiny_spec());
  const auto batches = sequential_batches(d.heldout(), 2, 16, 4);
  HybridModel m = make_model(tiny_config(LayerKind::kMha), std::nullopt, 5);
  const EvalReport self = eval_model(m, batches, &m);
  EXPECT_EQ(self.kl_to_teacher, 0.0);
  EXPECT_EQ(self.tokens, 4u * 2u * 15u);
  m.params.set("lm_head", Tensor::matrix(m.params.get("lm_head").rows(),
                                         m.params.get("lm_head").cols()));
  EXPECT_NEAR(eval_model(m, batches).perplexity, 24.0, 1e-9);
  HybridModel other = make_model(tiny_config(LayerKind::kMha), std::nullopt, 6);
  EXPECT_GT(eval_model(m, batches, &other).kl_to_teacher, 0.0);
  ModelConfig wide = tiny_config(LayerKind::kMha);
  wide.vocab = 30;
  HybridModel mismatched = make_model(wide, std::nullopt, 1);
  EXPECT_THROW(eval_model(m, batches, &mismatched), ConfigError);
}

TEST(TeacherTest, TrainingBeatsUnigramBaseline) {
  const SynthData d = gen_data(tiny_spec());
  const auto held = sequential_batches(d.heldout(), 4, 16, 8);
  HybridModel fresh = train_teacher(tiny_config(LayerKind::kMha), d.train(), tiny_train(0));
  const double start = eval_model(fresh, held).perplexity;
  EXPECT_GT(start, 12.0);
  EXPECT_LT(start, 48.0);
  std::ostringstream log;
  HybridModel teacher = train_teacher(tiny_config(LayerKind::kMha), d.train(), tiny_train(300), &log);
  EXPECT_LT(eval_model(teacher, held).perplexity, unigram_perplexity(d.train(), 24));
  EXPECT_NE(log.str().find("step 299 loss"), std::string::npos);
  EXPECT_THROW(train_teacher(tiny_config(LayerKind::kMamba2), d.train(), tiny_train(1)),
               ConfigError);
}

TEST(TeacherTest, DistillationLowersHeldOutKl) {
  const SynthData d = gen_data(tiny_spec());
  const auto held = sequential_batches(d.heldout(), 4, 16, 8);
  const HybridModel teacher =
      train_teacher(tiny_config(LayerKind::kMha, 4), d.train(), tiny_train(150));
  HybridModel hybrid = assemble(upcycle_model(teacher, LayerKind::kMla, tiny_mla()),
                                upcycle_model(teacher, LayerKind::kMamba2, std::nullopt),
                                HybridLayout{4, {0, 3}});
  const double before = eval_model(hybrid, held, &teacher).kl_to_teacher;
  EXPECT_GT(before, 0.0);
  BatchSampler data(d.train(), 4, 16, 11);
  run_kd(teacher, hybrid, data, tiny_train(100));
  EXPECT_LT(eval_model(hybrid, held, &teacher).kl_to_teacher, before);
}

TEST(BenchTest, CacheBytesMatchPrediction) {
  ModelConfig mla_cfg = tiny_config(LayerKind::kMla, 4);
  ModelConfig mha_cfg = tiny_config(LayerKind::kMha, 4);
  ModelConfig mamba_cfg = tiny_config(LayerKind::kMamba2, 4);
  ModelConfig hybrid_cfg = mha_cfg;
  hybrid_cfg.layer_kinds = {LayerKind::kMla, LayerKind::kMamba2, LayerKind::kMamba2,
                            LayerKind::kMla};
  const MLAConfig m = tiny_mla();
  const BenchReport mha = bench(make_model(mha_cfg, std::nullopt, 1), 8, 24, 3);
  EXPECT_EQ(mha.peak_cache_bytes, kv_report(mha_cfg, nullptr, 32).kv_bytes);
  const BenchReport mla = bench(make_model(mla_cfg, m, 1), 8, 1000, 3);
  EXPECT_EQ(mla.peak_cache_bytes, kv_report(mla_cfg, &m, 1008).kv_bytes);
  const BenchReport hybrid = bench(make_model(hybrid_cfg, m, 1), 5, 10, 3);
  EXPECT_EQ(hybrid.peak_cache_bytes,
            kv_report(hybrid_cfg, HybridLayout{4, {0, 3}}, m, 15).kv_bytes);
  const BenchReport mamba = bench(make_model(mamba_cfg, std::nullopt, 1), 8, 24, 3);
  EXPECT_EQ(mamba.peak_cache_bytes, 0u);
  EXPECT_GT(mamba.state_bytes, 0u);
  EXPECT_EQ(mamba.step_seconds.size(), 24u);
  EXPECT_GT(mamba.decode_tokens_per_s, 0.0);
  EXPECT_THROW(bench(make_model(mamba_cfg, std::nullopt, 1), 8, 4, 2), ConfigError);
}

TEST(BenchTest, MambaStepTimeIsFlat) {
  const HybridModel m = make_model(testing::toy_config(LayerKind::kMamba2, 4), std::nullopt, 1);
  const BenchReport r = bench(m, 1, 2100, 3);
  const double early = r.step_time_near(200), late = r.step_time_near(2000);
  EXPECT_GT(early, 0.0);
  EXPECT_LE(late, 1.5 * early);
}

TEST(BenchTest, CsvRows) {
  BenchReport a;
  a.gen_len = 100;
  a.decode_tokens_per_s = 50.5;
  a.peak_cache_bytes = 4096;
  std::ostringstream out;
  write_bench_csv(out, std::span(&a, 1));
  EXPECT_EQ(out.str(), "gen_len,tokens_per_s,peak_cache_bytes\n100,50.5,4096\n");
}

}  // namespace
}  // namespace hforge
