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

#include "hforge/model.hpp"

#include <gtest/gtest.h>

#include "hforge/error.hpp"
#include "hforge/ops.hpp"
#include "reference_model.hpp"
#include "test_support.hpp"

namespace hforge {
namespace {

using testing::tiny_config;
using testing::tiny_mla;

ModelConfig hybrid_config() {
  ModelConfig cfg = tiny_config(LayerKind::kMha, 3);
  cfg.layer_kinds = {LayerKind::kMha, LayerKind::kMla, LayerKind::kMamba2};
  return cfg;
}

std::vector<std::int32_t> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = static_cast<std::int32_t>(rng.below(vocab));
  return out;
}

TEST(ModelTest, ForwardMatchesReference) {
  HybridModel model = make_model(hybrid_config(), tiny_mla(), 1);
  auto tokens = random_tokens(9, model.cfg.vocab, 2);
  Tensor ours = forward_logits(model, tokens, 1, tokens.size());
  Tensor ref = reference::to_tensor(reference::logits(model, tokens));
  EXPECT_LT(max_abs_diff(ours, ref), 1e-10);
}

TEST(ModelTest, BatchRowsAreIndependent) {
  HybridModel model = make_model(hybrid_config(), tiny_mla(), 3);
  auto a = random_tokens(6, model.cfg.vocab, 4);
  auto b = random_tokens(6, model.cfg.vocab, 5);
  std::vector<std::int32_t> both = a;
  both.insert(both.end(), b.begin(), b.end());
  Tensor batched = forward_logits(model, both, 2, 6);
  EXPECT_LT(max_abs_diff(testing::row_slice(batched, 0, 6), forward_logits(model, a, 1, 6)), 1e-12);
  EXPECT_LT(max_abs_diff(testing::row_slice(batched, 6, 6), forward_logits(model, b, 1, 6)), 1e-12);
}

class DecoderTest : public ::testing::TestWithParam<LayerKind> {};

TEST_P(DecoderTest, IncrementalMatchesFullForward) {
  ModelConfig cfg = tiny_config(GetParam(), 2);
  HybridModel model = make_model(cfg, tiny_mla(), 6);
  auto tokens = random_tokens(11, cfg.vocab, 7);
  Tensor full = forward_logits(model, tokens, 1, tokens.size());
  Decoder dec(model);
  Tensor got = dec.feed(std::span(tokens).first(5));
  for (std::size_t i = 5; i < tokens.size(); ++i) got.append_rows(dec.feed(std::span(tokens).subspan(i, 1)));
  EXPECT_EQ(dec.tokens(), tokens.size());
  EXPECT_LT(max_abs_diff(got, full), 1e-10);
}

INSTANTIATE_TEST_SUITE_P(Kinds, DecoderTest,
                         ::testing::Values(LayerKind::kMha, LayerKind::kMla, LayerKind::kMamba2));

TEST(DecoderTest, CacheBytesFollowLayerKinds) {
  HybridModel model = make_model(hybrid_config(), tiny_mla(), 8);
  Decoder dec(model);
  auto tokens = random_tokens(7, model.cfg.vocab, 9);
  dec.feed(tokens);
  const ModelConfig& c = model.cfg;
  const MLAConfig m = tiny_mla();
  const std::size_t expect = 7 * 2 * c.n_kv * c.d_h * 8 + 7 * (m.r_kv + m.d_r) * 8;
  EXPECT_EQ(dec.kv_cache_bytes(), expect);
  EXPECT_EQ(dec.ssm_state_bytes(),
            (c.n_h * c.d_h * c.d_h + (c.conv_width - 1) * (c.n_kv * c.d_h * 2 + c.n_h * c.d_h)) * 8);
}

TEST(ModelTest, SetMixerReplacesKindAndParams) {
  HybridModel model = make_model(tiny_config(LayerKind::kMha), tiny_mla(), 10);
  MixerWeights m = init_mamba2_from_attention(model.attention(1), model.cfg);
  model.set_mixer(1, m);
  EXPECT_EQ(model.kind(1), LayerKind::kMamba2);
  EXPECT_FALSE(model.params.contains("layers.1.mixer.w_q"));
  EXPECT_TRUE(model.params.contains("layers.1.mixer.w_x"));
  EXPECT_NO_THROW(model.validate());
  model.params.erase("layers.0.mixer.w_o");
  EXPECT_THROW(model.validate(), Error);
}

TEST(ModelTest, StoragePrecisionRoundsToFloat) {
  ModelConfig cfg = tiny_config(LayerKind::kMha);
  cfg.dtype = DType::kF32;
  HybridModel model = make_model(cfg, std::nullopt, 11);
  for (const auto& [name, e] : model.params) {
    for (double v : e.value.values()) ASSERT_EQ(v, double(float(v))) << name;
  }
}

class ModelGradTest : public ::testing::TestWithParam<LayerKind> {};

TEST_P(ModelGradTest, FiniteDifferenceAgreement) {
  ModelConfig cfg = tiny_config(GetParam(), 1);
  HybridModel model = make_model(cfg, tiny_mla(), 12);
  if (GetParam() == LayerKind::kMamba2) {
    // Move off the identity-conv, zero-w_dt dynamics so every path carries signal.
    Rng rng(13);
    for (const char* p : {"layers.0.mixer.w_dt", "layers.0.mixer.conv_x"}) {
      Tensor& t = model.params.get_mut(p);
      for (double& v : t.values()) v += 0.3 * rng.normal();
    }
  }
  auto tokens = random_tokens(10, cfg.vocab, 14);
  std::vector<std::int32_t> targets(tokens.begin() + 1, tokens.end());
  targets.push_back(-1);
  std::vector<std::int32_t> input = tokens;
  testing::LossBuilder build = [&](Tape&, const VarMap& vars) {
    Var logits = forward(vars, model, input, 2, 5);
    return ops::scale(ops::nll_rows(ops::log_softmax_rows(logits), targets), 1.0 / 9.0);
  };
  auto check = testing::check_gradients(build, model.params, 1e-5, 1e-6);
  EXPECT_LT(check.max_rel_error, 1e-4) << check.worst;
}

INSTANTIATE_TEST_SUITE_P(Kinds, ModelGradTest,
                         ::testing::Values(LayerKind::kMha, LayerKind::kMla, LayerKind::kMamba2));

}  // namespace
}  // namespace hforge
