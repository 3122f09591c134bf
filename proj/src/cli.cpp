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

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstring>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "hforge/compose.hpp"
#include "hforge/error.hpp"
#include "hforge/harness.hpp"
#include "hforge/rng.hpp"
#include "hforge/smart.hpp"

namespace hforge {

namespace fs = std::filesystem;
using json = nlohmann::json;

void PipelineManifest::validate(const fs::path& dir) const {
  for (const auto& [name, stage] : stages) {
    if (!stage.done) continue;
    for (const std::string& a : stage.artifacts) {
      if (!fs::exists(dir / a)) {
        throw FormatError("manifest: stage " + name + " lists missing artifact " + a);
      }
    }
  }
}

void to_json(json& j, const PipelineManifest& m) {
  json stages = json::object();
  for (const auto& [name, s] : m.stages) {
    stages[name] = json{{"done", s.done}, {"seed", s.seed}, {"artifacts", s.artifacts}};
  }
  j = json{{"seed", m.seed}, {"stages", stages}};
}

void from_json(const json& j, PipelineManifest& m) {
  m = PipelineManifest{};
  m.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& [name, s] : j.at("stages").items()) {
    PipelineManifest::Stage st;
    st.done = s.at("done").get<bool>();
    st.seed = s.at("seed").get<std::uint64_t>();
    st.artifacts = s.at("artifacts").get<std::vector<std::string>>();
    m.stages.emplace(name, std::move(st));
  }
}

const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> stages{
      "gen-data",    "train-teacher", "upcycle:mla",  "upcycle:mamba2", "ild:mla",
      "ild:mamba2",  "sensitivity",   "smart-select", "compose",        "distill",
      "eval",        "kv-report",     "bench"};
  return stages;
}

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << text;
    if (!out) throw FormatError("write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

}  // namespace

json load_pipeline_config(const fs::path& path) {
  json cfg = read_json_file(path);
  if (!cfg.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
  const fs::path base = path.parent_path();
  for (auto& [key, value] : cfg.items()) {
    if (value.is_string() && key != "name") value = read_json_file(base / value.get<std::string>());
  }
  return cfg;
}

namespace {

constexpr const char* kData = "data.tok";
constexpr const char* kTeacher = "teacher.hfrg";
constexpr const char* kProfile = "sensitivity.json";
constexpr const char* kLayout = "layout.json";
constexpr const char* kHybrid = "hybrid.hfrg";
constexpr const char* kStudent = "student.hfrg";

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

std::string kind_tag(LayerKind kind) { return kind == LayerKind::kMla ? "mla" : "mamba2"; }

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "hforge-out";
};

class Stage {
 public:
  Stage(const Common& common, std::string key, std::ostream& out, std::ostream& log)
      : key_(std::move(key)), dir_(common.out), out_(out), log_(log) {
    if (!common.config.empty()) config_ = load_pipeline_config(common.config);
    if (config_.contains("seed")) seed_ = config_.at("seed").get<std::uint64_t>();
    if (common.seed) seed_ = *common.seed;
    stage_seed_ = mix_seed({seed_, fnv1a(key_)});
  }

  std::ostream& out() { return out_; }
  std::ostream& log() { return log_; }
  fs::path path(const std::string& file) const { return dir_ / file; }

  bool has(const std::string& name) const { return config_.contains(name); }

  json section(const std::string& name) const {
    if (!config_.contains(name)) {
      throw ConfigError("config has no '" + name + "' section (pass --config)");
    }
    return config_.at(name);
  }
  json section_or_empty(const std::string& name) const {
    return config_.contains(name) ? config_.at(name) : json::object();
  }

  /// Seed of a config section: its own "seed" key or one derived from the
  /// run seed and the stage name.
  std::uint64_t seed_for(const json& sec) {
    stage_seed_ = sec.contains("seed") ? sec.at("seed").get<std::uint64_t>()
                                       : mix_seed({seed_, fnv1a(key_)});
    return stage_seed_;
  }

  ModelConfig model_config() const { return parse_model_config(section("model")); }

  fs::path require(const std::string& file, const std::string& stage) const {
    const fs::path p = path(file);
    if (!fs::exists(p)) {
      throw ConfigError("missing " + p.string() + ": run stage '" + stage + "' first");
    }
    return p;
  }

  SynthData data() const { return load_tokens(require(kData, "gen-data")); }

  void finish(std::vector<std::string> artifacts) {
    fs::create_directories(dir_);
    const fs::path mpath = path("manifest.json");
    PipelineManifest m;
    if (fs::exists(mpath)) {
      try {
        m = read_json_file(mpath).get<PipelineManifest>();
      } catch (const json::exception& e) {
        throw FormatError("manifest.json: " + std::string(e.what()));
      }
    }
    m.seed = seed_;
    m.stages[key_] = PipelineManifest::Stage{true, stage_seed_, std::move(artifacts)};
    m.validate(dir_);
    write_json(mpath, m);
  }

  void prepare_output() { fs::create_directories(dir_); }

 private:
  std::string key_;
  fs::path dir_;
  std::ostream& out_;
  std::ostream& log_;
  json config_ = json::object();
  std::uint64_t seed_ = 0;
  std::uint64_t stage_seed_ = 0;
};

TrainConfig train_section(Stage& st, const std::string& name) {
  const json sec = st.section(name);
  TrainConfig tc = parse_train_config(sec);
  tc.seed = st.seed_for(sec);
  return tc;
}

double fraction_of(const json& sec, const char* key, double fallback) {
  const double f = sec.value(key, fallback);
  if (!(f > 0.0 && f < 1.0)) throw ConfigError(std::string(key) + " must lie in (0, 1)");
  return f;
}

void check_vocab(const SynthData& data, std::size_t vocab) {
  for (std::int32_t t : data.tokens) {
    if (t < 0 || std::size_t(t) >= vocab) {
      throw ConfigError("token " + std::to_string(t) + " outside model vocab " +
                        std::to_string(vocab));
    }
  }
}

json train_summary(const TrainReport& r) {
  return json{{"steps", r.steps}, {"final_loss", r.smoothed_final()}, {"losses", r.losses}};
}

std::size_t thread_cap(std::size_t jobs) {
  const char* env = std::getenv("HF_FORGE_THREADS");
  if (env == nullptr || *env == '\0') return jobs;
  std::size_t cap = 0;
  const char* end = env + std::strlen(env);
  auto [p, ec] = std::from_chars(env, end, cap);
  if (ec != std::errc() || p != end || cap == 0) {
    throw ConfigError("HF_FORGE_THREADS must be a positive integer");
  }
  return std::min(jobs, cap);
}

LayerKind parse_student_kind(const std::string& s) {
  if (s == "mla") return LayerKind::kMla;
  if (s == "mamba2") return LayerKind::kMamba2;
  throw ConfigError("--kind must be mla or mamba2");
}

// ILD data is the leading fraction of the training split; KD uses the rest.
std::pair<std::span<const std::int32_t>, std::span<const std::int32_t>> ild_kd_split(
    const Stage& st, const SynthData& data) {
  return split_corpus(data.train(), fraction_of(st.section_or_empty("ild"), "fraction", 0.2));
}

void cmd_gen_data(Stage& st) {
  const json sec = st.section("data");
  SynthSpec spec = parse_synth_spec(sec);
  spec.seed = st.seed_for(sec);
  const SynthData data = gen_data(spec);
  st.prepare_output();
  save_tokens(data, st.path(kData));
  st.finish({kData});
  st.out() << json{{"tokens", data.tokens.size()},
                   {"train_tokens", data.train_tokens},
                   {"unigram_perplexity", unigram_perplexity(data.train(), spec.vocab)}}
                  .dump()
           << '\n';
}

void cmd_train_teacher(Stage& st) {
  const ModelConfig cfg = st.model_config();
  if (cfg.count(LayerKind::kMha) != cfg.L) throw ConfigError("teacher model must be all-MHA");
  const TrainConfig tc = train_section(st, "teacher");
  const SynthData data = st.data();
  check_vocab(data, cfg.vocab);
  HybridModel model = make_model(cfg, std::nullopt, tc.seed);
  BatchSampler sampler(data.train(), tc.batch_size, tc.seq_len, tc.seed);
  const TrainReport report = run_lm(model, sampler, tc, &st.log());
  save_checkpoint(model, st.path(kTeacher));
  write_json(st.path("teacher_train.json"), train_summary(report));
  st.finish({kTeacher, "teacher_train.json"});
  st.out() << json{{"final_loss", report.smoothed_final()}}.dump() << '\n';
}

void cmd_upcycle(Stage& st, LayerKind kind) {
  std::optional<MLAConfig> mla;
  const fs::path teacher_path = st.require(kTeacher, "train-teacher");
  if (kind == LayerKind::kMla) {
    const CheckpointHeader header = read_checkpoint_header(teacher_path);
    mla = parse_mla_config(st.section("mla"), header.cfg);
  }
  const HybridModel teacher = load_checkpoint(teacher_path);
  const HybridModel model = upcycle_model(teacher, kind, mla);
  const std::string file = kind_tag(kind) + "_init.hfrg";
  save_checkpoint(model, st.path(file));
  st.finish({file});
  st.out() << json{{"artifact", file}, {"parameters", model.parameter_count()}}.dump() << '\n';
}

void cmd_ild(Stage& st, LayerKind kind) {
  const TrainConfig tc = train_section(st, "ild");
  const std::string init = kind_tag(kind) + "_init.hfrg";
  const fs::path init_path = st.require(init, "upcycle --kind " + kind_tag(kind));
  const fs::path teacher_path = st.require(kTeacher, "train-teacher");
  const SynthData data = st.data();
  const HybridModel teacher = load_checkpoint(teacher_path);
  HybridModel student = load_checkpoint(init_path);
  check_vocab(data, teacher.cfg.vocab);
  BatchSampler sampler(ild_kd_split(st, data).first, tc.batch_size, tc.seq_len, tc.seed);
  const TrainReport report = run_ild(teacher, student, sampler, tc, &st.log());
  const std::string file = kind_tag(kind) + "_ild.hfrg";
  const std::string summary = "ild_" + kind_tag(kind) + ".json";
  save_checkpoint(student, st.path(file));
  write_json(st.path(summary), train_summary(report));
  st.finish({file, summary});
  st.out() << json{{"final_loss", report.smoothed_final()}}.dump() << '\n';
}

void cmd_sensitivity(Stage& st, std::optional<std::size_t> jobs_flag) {
  const json sec = st.section_or_empty("sensitivity");
  const std::size_t batches = sec.value("batches", std::size_t{4});
  const std::size_t batch = sec.value("batch", std::size_t{4});
  const std::size_t seq = sec.value("seq", std::size_t{32});
  std::size_t jobs = jobs_flag.value_or(sec.value("jobs", std::size_t{1}));
  if (batches == 0 || jobs == 0) throw ConfigError("sensitivity: batches and jobs must be positive");
  jobs = thread_cap(jobs);
  st.seed_for(sec);
  const fs::path t = st.require(kTeacher, "train-teacher");
  const fs::path mla = st.require("mla_ild.hfrg", "ild --kind mla");
  const fs::path mamba = st.require("mamba2_ild.hfrg", "ild --kind mamba2");
  const SynthData data = st.data();
  const auto set = sequential_batches(ild_kd_split(st, data).first, batch, seq, batches);
  const HybridModel teacher = load_checkpoint(t);
  check_vocab(data, teacher.cfg.vocab);
  SensitivityProfile profile =
      score_sensitivity(teacher, load_checkpoint(mamba), load_checkpoint(mla), set, jobs);
  profile.provenance.dataset = std::string(kData) + ":ild";
  write_json(st.path(kProfile), profile);
  st.finish({kProfile});
  st.out() << json(profile).dump() << '\n';
}

void cmd_smart_select(Stage& st, const std::string& scores, std::optional<std::size_t> n_flag) {
  std::size_t n = 0;
  if (n_flag) {
    n = *n_flag;
  } else {
    const json sec = st.section("select");
    if (!sec.contains("n")) throw ConfigError("select: missing n (pass --n)");
    n = sec.at("n").get<std::size_t>();
  }
  const fs::path source = scores.empty() ? st.require(kProfile, "sensitivity") : fs::path(scores);
  const SensitivityProfile profile = parse_profile(read_json_file(source));
  const HybridLayout layout = smart_select(profile, n);
  st.prepare_output();
  write_json(st.path(kLayout), layout);
  st.finish({kLayout});
  st.out() << json(layout.mla_indices).dump() << '\n';
}

void cmd_compose(Stage& st) {
  const double tolerance = st.section_or_empty("compose").value("tolerance", 1e-6);
  const fs::path mla = st.require("mla_ild.hfrg", "ild --kind mla");
  const fs::path mamba = st.require("mamba2_ild.hfrg", "ild --kind mamba2");
  const HybridLayout layout = parse_layout(read_json_file(st.require(kLayout, "smart-select")));
  std::vector<std::string> warnings;
  const HybridModel hybrid =
      assemble(load_checkpoint(mla), load_checkpoint(mamba), layout, tolerance, &warnings);
  for (const std::string& w : warnings) st.log() << "warning: " << w << '\n';
  save_checkpoint(hybrid, st.path(kHybrid));
  st.finish({kHybrid});
  st.out() << json{{"layout", layout}, {"parameters", hybrid.parameter_count()}}.dump() << '\n';
}

void cmd_distill(Stage& st) {
  const TrainConfig tc = train_section(st, "kd");
  const fs::path t = st.require(kTeacher, "train-teacher");
  const fs::path h = st.require(kHybrid, "compose");
  const SynthData data = st.data();
  const HybridModel teacher = load_checkpoint(t);
  HybridModel student = load_checkpoint(h);
  check_vocab(data, teacher.cfg.vocab);
  BatchSampler sampler(ild_kd_split(st, data).second, tc.batch_size, tc.seq_len, tc.seed);
  const TrainReport report = run_kd(teacher, student, sampler, tc, &st.log());
  save_checkpoint(student, st.path(kStudent));
  write_json(st.path("distill.json"), train_summary(report));
  st.finish({kStudent, "distill.json"});
  st.out() << json{{"final_loss", report.smoothed_final()}}.dump() << '\n';
}

json eval_json(const EvalReport& r) {
  return json{{"perplexity", r.perplexity}, {"kl_to_teacher", r.kl_to_teacher}, {"tokens", r.tokens}};
}

void cmd_eval(Stage& st) {
  const json sec = st.section_or_empty("eval");
  const std::size_t batches = sec.value("batches", std::size_t{8});
  const std::size_t batch = sec.value("batch", std::size_t{4});
  const std::size_t seq = sec.value("seq", std::size_t{64});
  if (batches == 0) throw ConfigError("eval: batches must be positive");
  st.seed_for(sec);
  const fs::path t = st.require(kTeacher, "train-teacher");
  const fs::path s = st.require(kStudent, "distill");
  const SynthData data = st.data();
  const HybridModel teacher = load_checkpoint(t);
  const HybridModel student = load_checkpoint(s);
  check_vocab(data, teacher.cfg.vocab);
  const auto held = sequential_batches(data.heldout(), batch, seq, batches);
  const json report{{"teacher", eval_json(eval_model(teacher, held))},
                    {"student", eval_json(eval_model(student, held, &teacher))},
                    {"unigram_perplexity", unigram_perplexity(data.train(), teacher.cfg.vocab)},
                    {"layout", layout_of(student)}};
  write_json(st.path("eval.json"), report);
  st.finish({"eval.json"});
  st.out() << report.dump() << '\n';
}

void cmd_kv_report(Stage& st, const std::string& layout_flag, std::optional<std::size_t> tokens) {
  const ModelConfig cfg = st.model_config();
  const MLAConfig mcfg = parse_mla_config(st.section("mla"), cfg);
  const std::size_t t =
      tokens.value_or(st.section_or_empty("kv_report").value("tokens", std::size_t{2048}));
  if (t == 0) throw ConfigError("kv-report: tokens must be positive");
  const fs::path source =
      layout_flag.empty() ? st.require(kLayout, "smart-select") : fs::path(layout_flag);
  const HybridLayout layout = parse_layout(read_json_file(source));
  const KvReport r = kv_report(cfg, layout, mcfg, t);
  st.prepare_output();
  write_json(st.path("kv_report.json"), r);
  st.finish({"kv_report.json"});
  std::ostringstream pct;
  pct << std::fixed << std::setprecision(2) << r.percent << '%';
  st.out() << pct.str() << '\n';
}

void cmd_bench(Stage& st) {
  const json sec = st.section_or_empty("bench");
  const std::size_t prompt = sec.value("prompt_len", std::size_t{16});
  const std::size_t reps = sec.value("reps", std::size_t{3});
  const auto gen_lens = sec.value("gen_lens", std::vector<std::size_t>{64, 256});
  const fs::path s = st.require(kStudent, "distill");
  const HybridModel model = load_checkpoint(s);
  std::vector<BenchReport> rows;
  for (std::size_t g : gen_lens) rows.push_back(bench(model, prompt, g, reps));
  std::ostringstream csv;
  write_bench_csv(csv, rows);
  write_text(st.path("bench.csv"), csv.str());
  st.finish({"bench.csv"});
  st.out() << csv.str();
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "Pipeline config (JSON)")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "Run seed; overrides the config's seed");
  sub->add_option("--out", c.out, "Run directory")->capture_default_str();
}

}  // namespace

int cli_dispatch(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hybrid model composition pipeline", "hforge"};
  app.require_subcommand(1, 1);
  Common common;
  std::string kind, scores, layout;
  std::optional<std::size_t> n, tokens, jobs;

  struct Entry {
    const char* name;
    const char* help;
  };
  const Entry entries[] = {
      {"gen-data", "Generate the synthetic token corpus"},
      {"train-teacher", "Train the all-attention teacher"},
      {"upcycle", "Initialize an MLA or Mamba2 model from the teacher"},
      {"ild", "Intermediate layer distillation of an upcycled model"},
      {"sensitivity", "Score per-layer MLA sensitivity"},
      {"smart-select", "Choose MLA layer positions from sensitivity scores"},
      {"compose", "Assemble the hybrid model from the layout"},
      {"distill", "End-to-end distillation of the hybrid model"},
      {"eval", "Perplexity and KL on held-out data"},
      {"kv-report", "Cache size of a layout relative to full attention"},
      {"bench", "Decode throughput and peak cache bytes"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const Entry& e : entries) {
    CLI::App* sub = app.add_subcommand(e.name, e.help);
    add_common(sub, common);
    subs[e.name] = sub;
  }
  subs["upcycle"]->add_option("--kind", kind, "mla or mamba2")->required()->check(
      CLI::IsMember({"mla", "mamba2"}));
  subs["ild"]->add_option("--kind", kind, "mla or mamba2")->required()->check(
      CLI::IsMember({"mla", "mamba2"}));
  subs["sensitivity"]->add_option("--jobs", jobs, "Variant evaluations in parallel");
  subs["smart-select"]->add_option("--scores", scores, "Sensitivity profile JSON")->check(
      CLI::ExistingFile);
  subs["smart-select"]->add_option("--n", n, "Number of MLA layers");
  subs["kv-report"]->add_option("--layout", layout, "Layout JSON")->check(CLI::ExistingFile);
  subs["kv-report"]->add_option("--tokens", tokens, "Cached tokens");

  if (!args.empty() && !args.front().empty() && args.front()[0] != '-' &&
      subs.count(args.front()) == 0) {
    err << "error: unknown subcommand '" << args.front() << "'\n\n" << app.help();
    return 1;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  std::string key = name;
  if (name == "upcycle" || name == "ild") key += ":" + kind;
  try {
    Stage st(common, key, out, err);
    if (name == "gen-data") cmd_gen_data(st);
    else if (name == "train-teacher") cmd_train_teacher(st);
    else if (name == "upcycle") cmd_upcycle(st, parse_student_kind(kind));
    else if (name == "ild") cmd_ild(st, parse_student_kind(kind));
    else if (name == "sensitivity") cmd_sensitivity(st, jobs);
    else if (name == "smart-select") cmd_smart_select(st, scores, n);
    else if (name == "compose") cmd_compose(st);
    else if (name == "distill") cmd_distill(st);
    else if (name == "eval") cmd_eval(st);
    else if (name == "kv-report") cmd_kv_report(st, layout, tokens);
    else cmd_bench(st);
  } catch (const Error& e) {
    err << "error: " << name << ": " << e.what() << '\n';
    return 2;
  } catch (const json::exception& e) {
    err << "error: " << name << ": " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << name << ": " << e.what() << '\n';
    return 2;
  }
  return 0;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_dispatch(args, std::cout, std::cerr);
}

}  // namespace hforge
