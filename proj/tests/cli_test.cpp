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

#include "hforge/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "hforge/compose.hpp"
#include "hforge/error.hpp"
#include "hforge/smart.hpp"

namespace hforge {
namespace {

namespace fs = std::filesystem;

const fs::path kConfigs = fs::path(HFORGE_SOURCE_DIR) / "configs";

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli_dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("hforge_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string out() const { return dir_.string(); }
  std::string smoke() const { return (kConfigs / "smoke" / "pipeline.json").string(); }

  Result stage(std::vector<std::string> args) {
    args.insert(args.end(), {"--config", smoke(), "--out", out()});
    return run(args);
  }

  fs::path dir_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

TEST_F(CliTest, UsageErrorsExitOne) {
  Result r = run({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("unknown subcommand"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"upcycle", "--out", out()}).code, 1);
  EXPECT_EQ(run({"upcycle", "--kind", "gru"}).code, 1);
  EXPECT_EQ(run({"smart-select", "--n", "four"}).code, 1);
  EXPECT_EQ(run({"eval", "--config", "/no/such/file.json"}).code, 1);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, SmartSelectPublishedScores) {
  Result r = run({"smart-select", "--scores", (kConfigs / "table8.json").string(), "--n", "4",
                  "--out", out()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "[0,5,10,14]\n");
  std::ifstream in(dir_ / "layout.json");
  const HybridLayout layout = parse_layout(nlohmann::json::parse(in));
  EXPECT_EQ(layout, (HybridLayout{16, {0, 5, 10, 14}}));
  r = run({"smart-select", "--scores", (kConfigs / "table8.json").string(), "--n", "17",
           "--out", out()});
  EXPECT_EQ(r.code, 2);
}

TEST_F(CliTest, KvReportPrintsPercent) {
  const Result r = run({"kv-report", "--config", (kConfigs / "models" / "llama3.2-1b.json").string(),
                        "--layout", (kConfigs / "layouts" / "1b-4mla.json").string(), "--tokens",
                        "2048", "--out", out()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "3.91%\n");
  std::ifstream in(dir_ / "kv_report.json");
  EXPECT_DOUBLE_EQ(nlohmann::json::parse(in).at("percent").get<double>(), 3.91);
}

TEST_F(CliTest, MissingUpstreamNamesTheStage) {
  Result r = stage({"compose"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("ild --kind mla"), std::string::npos);
  r = stage({"train-teacher"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("gen-data"), std::string::npos);
  r = stage({"distill"});
  EXPECT_NE(r.err.find("train-teacher"), std::string::npos);
  r = run({"kv-report", "--config", (kConfigs / "models" / "llama3.2-1b.json").string(), "--out",
           out()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("smart-select"), std::string::npos);
}

TEST_F(CliTest, ConfigValidatedBeforeCompute) {
  ASSERT_EQ(stage({"gen-data"}).code, 0);
  fs::create_directories(dir_ / "cfg");
  const fs::path cfg = dir_ / "cfg" / "bad.json";
  nlohmann::json j;
  {
    std::ifstream in(smoke());
    j = nlohmann::json::parse(in);
  }
  for (auto& [k, v] : j.items()) {
    if (v.is_string() && k != "name") v = (kConfigs / "smoke" / v.get<std::string>()).string();
  }
  j["teacher"] = {{"steps", 0}};
  std::ofstream(cfg) << j.dump();
  const Result r = run({"train-teacher", "--config", cfg.string(), "--out", out()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("steps"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "teacher.hfrg"));
}

TEST_F(CliTest, ThreadCapFromEnvironment) {
  for (const char* s : {"gen-data", "train-teacher"}) ASSERT_EQ(stage({s}).code, 0);
  for (const char* k : {"mla", "mamba2"}) {
    ASSERT_EQ(stage({"upcycle", "--kind", k}).code, 0);
    ASSERT_EQ(stage({"ild", "--kind", k}).code, 0);
  }
  ::setenv("HF_FORGE_THREADS", "zero", 1);
  EXPECT_EQ(stage({"sensitivity", "--jobs", "4"}).code, 2);
  ::setenv("HF_FORGE_THREADS", "1", 1);
  const Result capped = stage({"sensitivity", "--jobs", "4"});
  ::unsetenv("HF_FORGE_THREADS");
  ASSERT_EQ(capped.code, 0) << capped.err;
  const std::string one = slurp(dir_ / "sensitivity.json");
  ASSERT_EQ(stage({"sensitivity", "--jobs", "3"}).code, 0);
  EXPECT_EQ(slurp(dir_ / "sensitivity.json"), one);
}

TEST_F(CliTest, PipelineIsDeterministicAndRecorded) {
  const std::vector<std::vector<std::string>> cmds{
      {"gen-data"}, {"train-teacher"}, {"upcycle", "--kind", "mla"},
      {"upcycle", "--kind", "mamba2"}, {"ild", "--kind", "mla"}, {"ild", "--kind", "mamba2"},
      {"sensitivity"}, {"smart-select"}, {"compose"}, {"distill"}, {"eval"}, {"kv-report"}};
  const fs::path first = dir_ / "a", second = dir_ / "b";
  for (const fs::path& d : {first, second}) {
    for (auto args : cmds) {
      args.insert(args.end(), {"--config", smoke(), "--out", d.string()});
      const Result r = run(args);
      ASSERT_EQ(r.code, 0) << args.front() << ": " << r.err;
    }
  }
  std::ifstream in(first / "manifest.json");
  const PipelineManifest m = nlohmann::json::parse(in).get<PipelineManifest>();
  EXPECT_NO_THROW(m.validate(first));
  EXPECT_EQ(m.stages.size(), cmds.size());
  for (const auto& [name, st] : m.stages) {
    EXPECT_TRUE(st.done) << name;
    for (const std::string& a : st.artifacts) {
      EXPECT_EQ(slurp(first / a), slurp(second / a)) << a;
    }
  }
  const HybridModel student = load_checkpoint(first / "student.hfrg");
  EXPECT_EQ(layout_of(student).L, 4u);

  // A different seed changes the data.
  const Result r = run({"gen-data", "--config", smoke(), "--out", (dir_ / "c").string(), "--seed", "8"});
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(slurp(first / "data.tok"), slurp(dir_ / "c" / "data.tok"));
}

TEST(ManifestTest, ValidateFlagsMissingFiles) {
  PipelineManifest m;
  m.stages["gen-data"] = {true, 1, {"nope.tok"}};
  EXPECT_THROW(m.validate(fs::temp_directory_path()), FormatError);
  m.stages["gen-data"].done = false;
  EXPECT_NO_THROW(m.validate(fs::temp_directory_path()));
  nlohmann::json j = m;
  EXPECT_EQ(j.get<PipelineManifest>(), m);
}

}  // namespace
}  // namespace hforge
