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

#include "hforge/compose.hpp"

#include <gtest/gtest.h>
#include <unistd.h>

#include <cstring>
#include <fstream>

#include "hforge/error.hpp"
#include "test_support.hpp"

namespace hforge {
namespace {

namespace fs = std::filesystem;

struct TempDir {
  TempDir() : path(fs::temp_directory_path() / ("hforge_compose_" + std::to_string(::getpid()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path path;
};

class AssembleTest : public ::testing::Test {
 protected:
  void SetUp() override {
    ModelConfig cfg = testing::tiny_config(LayerKind::kMha, 16);
    teacher_ = make_model(cfg, std::nullopt, 1);
    mla_ = upcycle_model(teacher_, LayerKind::kMla, testing::tiny_mla());
    mamba_ = upcycle_model(teacher_, LayerKind::kMamba2, std::nullopt);
  }
  HybridModel teacher_, mla_, mamba_;
};

TEST_F(AssembleTest, AllAndNoneAreTheSources) {
  std::vector<std::string> warnings;
  HybridLayout all{16, {}};
  for (std::size_t i = 0; i < 16; ++i) all.mla_indices.push_back(i);
  EXPECT_TRUE(assemble(mla_, mamba_, all, 0.0, &warnings).params == mla_.params);
  HybridModel none = assemble(mla_, mamba_, HybridLayout{16, {}}, 0.0, &warnings);
  EXPECT_TRUE(none.params == mamba_.params);
  EXPECT_EQ(none.cfg.layer_kinds, mamba_.cfg.layer_kinds);
  EXPECT_TRUE(warnings.empty());
}

TEST_F(AssembleTest, PublishedSelectionPattern) {
  HybridModel h = assemble(mla_, mamba_, HybridLayout{16, {0, 5, 10, 14}});
  for (std::size_t i = 0; i < 16; ++i) {
    const bool mla = i == 0 || i == 5 || i == 10 || i == 14;
    EXPECT_EQ(h.kind(i), mla ? LayerKind::kMla : LayerKind::kMamba2) << i;
    EXPECT_EQ(h.params.contains(HybridModel::mixer_prefix(i) + "w_dkv"), mla);
  }
  EXPECT_TRUE(bitwise_equal(h.params.get("layers.5.mixer.w_dkv"), mla_.params.get("layers.5.mixer.w_dkv")));
  EXPECT_TRUE(bitwise_equal(h.params.get("layers.6.mixer.w_x"), mamba_.params.get("layers.6.mixer.w_x")));
}

TEST_F(AssembleTest, DivergentSharedParametersWarn) {
  HybridModel drifted = mamba_;
  drifted.params.get_mut("layers.3.mlp.w_up")[0] += 1e-3;
  std::vector<std::string> warnings;
  HybridModel h = assemble(mla_, drifted, HybridLayout{16, {0, 15}}, 1e-6, &warnings);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("layers.3.mlp.w_up"), std::string::npos);
  EXPECT_TRUE(bitwise_equal(h.params.get("layers.3.mlp.w_up"), mla_.params.get("layers.3.mlp.w_up")));
  warnings.clear();
  assemble(mla_, drifted, HybridLayout{16, {0, 15}}, 1e-2, &warnings);
  EXPECT_TRUE(warnings.empty());
}

TEST_F(AssembleTest, RejectsBadInputs) {
  EXPECT_THROW(assemble(mamba_, mla_, HybridLayout{16, {0}}), ConfigError);
  EXPECT_THROW(assemble(mla_, mamba_, HybridLayout{15, {0}}), ConfigError);
  EXPECT_THROW(assemble(mla_, mamba_, HybridLayout{16, {0, 1, 14}}), ConfigError);
  HybridModel other = upcycle_model(make_model(testing::tiny_config(LayerKind::kMha, 15), std::nullopt, 2),
                                    LayerKind::kMamba2, std::nullopt);
  EXPECT_THROW(assemble(mla_, other, HybridLayout{16, {0}}), ConfigError);
}

ModelConfig llama(std::size_t L, std::size_t d, std::size_t n_h, std::size_t d_h) {
  ModelConfig c;
  c.L = L;
  c.d = d;
  c.n_h = n_h;
  c.n_kv = 8;
  c.d_h = d_h;
  c.vocab = 128256;
  c.layer_kinds.assign(L, LayerKind::kMha);
  c.dtype = DType::kF32;
  return c;
}

HybridLayout uniform_layout(std::size_t L, std::size_t n) {
  SensitivityProfile flat;
  flat.scores.assign(L, 0.0);
  return smart_select(flat, n);
}

TEST(KvReportTest, PublishedPercentages) {
  struct Row {
    ModelConfig cfg;
    MLAConfig mla;
    std::size_t n;
    double percent;
  };
  const ModelConfig b1 = llama(16, 2048, 32, 64), b3 = llama(28, 3072, 24, 128), b8 = llama(32, 4096, 32, 128);
  const MLAConfig m1{1344, 128, 32, 64, 32}, m3{1536, 128, 64, 128, 64}, m8{2048, 160, 64, 128, 64};
  const Row rows[] = {{b1, m1, 8, 7.81}, {b1, m1, 6, 5.86},  {b1, m1, 4, 3.91},
                      {b3, m3, 14, 4.69}, {b3, m3, 8, 2.68}, {b3, m3, 6, 2.01},
                      {b8, m8, 16, 5.47}, {b8, m8, 8, 2.73}};
  for (const Row& r : rows) {
    const KvReport rep = kv_report(r.cfg, uniform_layout(r.cfg.L, r.n), r.mla, 4096);
    EXPECT_NEAR(rep.percent, r.percent, 0.01 + 1e-12) << r.cfg.L << " layers, " << r.n << " MLA";
  }
  const KvReport rep = kv_report(b1, HybridLayout{16, {0, 5, 10, 14}}, m1, 1);
  EXPECT_EQ(rep.kv_bytes, 4u * 160u * 4u);
  EXPECT_EQ(rep.baseline_bytes, 16u * 1024u * 4u);
  EXPECT_GT(rep.state_bytes, 0u);
  EXPECT_EQ(rep.layers[1].kv_bytes, 0u);
}

TEST(KvReportTest, RatioIndependentOfTokensAndWidth) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    ModelConfig c = llama(4 + rng.below(29), 512, 8, 64);
    c.dtype = rng.below(2) ? DType::kF32 : DType::kF64;
    const MLAConfig m{64, 1 + rng.below(256), 32, 64, 32};
    const std::size_t n = rng.below(c.L + 1);
    const KvReport rep = kv_report(c, uniform_layout(c.L, n), m, 1 + rng.below(100000));
    const double expected = double(n * (m.r_kv + m.d_r)) / double(c.L * 2 * c.n_kv * c.d_h);
    EXPECT_EQ(rep.ratio, expected);
  }
}

TEST(KvReportTest, MhaAndMambaExtremes) {
  ModelConfig c = testing::tiny_config(LayerKind::kMha, 4);
  EXPECT_EQ(kv_report(c, nullptr, 10).percent, 100.0);
  EXPECT_EQ(kv_report(c.with_uniform_kind(LayerKind::kMamba2), nullptr, 10).kv_bytes, 0u);
  EXPECT_THROW(kv_report(c, nullptr, 0), ConfigError);
  nlohmann::json j = kv_report(c, nullptr, 3);
  EXPECT_EQ(j.at("layers").size(), 4u);
  EXPECT_EQ(j.at("percent").get<double>(), 100.0);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    ModelConfig cfg = testing::tiny_config(LayerKind::kMha, 3);
    cfg.layer_kinds = {LayerKind::kMla, LayerKind::kMamba2, LayerKind::kMla};
    model_ = make_model(cfg, testing::tiny_mla(), 3);
    model_.params.set_trainable("embed", false);
  }
  fs::path file(const char* name) const { return dir_.path / name; }
  TempDir dir_;
  HybridModel model_;
};

TEST_F(CheckpointTest, RoundTripIsBitwise) {
  save_checkpoint(model_, file("a.hfrg"));
  HybridModel back = load_checkpoint(file("a.hfrg"));
  EXPECT_EQ(back.cfg, model_.cfg);
  EXPECT_EQ(back.mla, model_.mla);
  EXPECT_TRUE(back.params == model_.params);
  EXPECT_FALSE(back.params.entry("embed").trainable);
  EXPECT_EQ(back.parameter_count(), model_.parameter_count());
}

TEST_F(CheckpointTest, FloatStorageRoundTrip) {
  ModelConfig cfg = model_.cfg;
  cfg.dtype = DType::kF32;
  HybridModel m = make_model(cfg, testing::tiny_mla(), 4);
  save_checkpoint(m, file("f.hfrg"));
  HybridModel back = load_checkpoint(file("f.hfrg"));
  for (const auto& [name, e] : m.params) EXPECT_TRUE(bitwise_equal(e.value, back.params.get(name)));
  EXPECT_LT(fs::file_size(file("f.hfrg")), checkpoint_bytes(model_).size());
}

TEST_F(CheckpointTest, RepeatedCyclesAreByteIdentical) {
  std::string bytes = checkpoint_bytes(model_);
  for (int cycle = 0; cycle < 3; ++cycle) {
    const std::string again = checkpoint_bytes(parse_checkpoint(bytes));
    ASSERT_EQ(again, bytes);
    bytes = again;
  }
}

TEST_F(CheckpointTest, LayoutAndAlignment) {
  const std::string bytes = checkpoint_bytes(model_);
  ASSERT_EQ(bytes.substr(0, 4), "HFRG");
  std::uint32_t version;
  std::uint64_t length;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&length, bytes.data() + 8, 8);
  EXPECT_EQ(version, kCheckpointVersion);
  auto header = nlohmann::json::parse(bytes.substr(16, length));
  EXPECT_EQ(header.at("config").get<ModelConfig>(), model_.cfg);
  const std::uint64_t payload = (16 + length + 63) / 64 * 64;
  EXPECT_EQ(bytes.size() - payload, header.at("payload_bytes").get<std::uint64_t>());
  for (const auto& t : header.at("tensors")) EXPECT_EQ(t.at("offset").get<std::uint64_t>() % 64, 0u);
}

TEST_F(CheckpointTest, HeaderOnlyRead) {
  save_checkpoint(model_, file("h.hfrg"));
  const CheckpointHeader h = read_checkpoint_header(file("h.hfrg"));
  EXPECT_EQ(h.cfg, model_.cfg);
  EXPECT_EQ(h.layout.mla_indices, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(h.tensors.size(), model_.params.size());
  // Dropping the payload entirely still lets the header be read.
  fs::resize_file(file("h.hfrg"), h.payload_offset);
  EXPECT_EQ(read_checkpoint_header(file("h.hfrg")).cfg, model_.cfg);
  EXPECT_THROW(load_checkpoint(file("h.hfrg")), FormatError);
}

TEST_F(CheckpointTest, CorruptionIsDetected) {
  std::string bytes = checkpoint_bytes(model_);
  const std::size_t last = bytes.size() - 3;
  bytes[last] = static_cast<char>(bytes[last] ^ 0x5a);
  try {
    parse_checkpoint(bytes);
    FAIL() << "corruption not detected";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
}

TEST_F(CheckpointTest, MalformedFilesAreRejected) {
  const std::string good = checkpoint_bytes(model_);
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad), FormatError);
  bad = good;
  bad[4] = 2;
  EXPECT_THROW(parse_checkpoint(bad), FormatError);
  EXPECT_THROW(parse_checkpoint(good.substr(0, good.size() - 1)), FormatError);
  EXPECT_THROW(parse_checkpoint(good.substr(0, 10)), FormatError);
  EXPECT_THROW(load_checkpoint(fs::path("/nonexistent/x.hfrg")), FormatError);
}

// Rewrites the header JSON and re-lays the file around the original payload.
std::string with_header(const std::string& bytes, const std::function<void(nlohmann::json&)>& edit) {
  std::uint64_t length;
  std::memcpy(&length, bytes.data() + 8, 8);
  const std::uint64_t payload_at = (16 + length + 63) / 64 * 64;
  auto header = nlohmann::json::parse(bytes.substr(16, length));
  edit(header);
  const std::string text = header.dump();
  std::string out = bytes.substr(0, 8);
  const std::uint64_t n = text.size();
  out.append(reinterpret_cast<const char*>(&n), 8);
  out += text;
  out.resize((out.size() + 63) / 64 * 64, '\0');
  out += bytes.substr(payload_at);
  return out;
}

TEST_F(CheckpointTest, DirectoryChecks) {
  const std::string good = checkpoint_bytes(model_);
  EXPECT_NO_THROW(parse_checkpoint(with_header(good, [](nlohmann::json&) {})));
  auto overlap = with_header(good, [](nlohmann::json& h) {
    h["tensors"][1]["offset"] = h["tensors"][0]["offset"].get<std::uint64_t>() + 8;
  });
  EXPECT_THROW(parse_checkpoint(overlap), FormatError);
  auto outside = with_header(good, [](nlohmann::json& h) {
    h["tensors"][0]["offset"] = h["payload_bytes"].get<std::uint64_t>();
  });
  EXPECT_THROW(parse_checkpoint(outside), FormatError);
  auto wrong_size = with_header(good, [](nlohmann::json& h) { h["tensors"][0]["bytes"] = 8; });
  EXPECT_THROW(parse_checkpoint(wrong_size), FormatError);
  auto no_config = with_header(good, [](nlohmann::json& h) { h.erase("config"); });
  EXPECT_THROW(parse_checkpoint(no_config), FormatError);
}

}  // namespace
}  // namespace hforge
