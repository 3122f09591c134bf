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

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>

#include "hforge/error.hpp"
#include "hforge/rng.hpp"

namespace hforge {

void SynthSpec::validate() const {
  if (vocab < 2) throw ConfigError("synth: vocab must be at least 2");
  if (vocab > std::size_t(INT32_MAX)) throw ConfigError("synth: vocab too large");
  if (seq_len < 2) throw ConfigError("synth: seq_len must be at least 2");
  if (order != 1 && order != 2) throw ConfigError("synth: order must be 1 or 2");
  if (branching == 0) throw ConfigError("synth: branching must be positive");
  if (!(noise >= 0.0 && noise <= 1.0) || !(copy_prob >= 0.0 && copy_prob < 1.0)) {
    throw ConfigError("synth: probabilities out of range");
  }
  // Copies must reach past a width-4 convolution window.
  if (copy_span <= 4) throw ConfigError("synth: copy_span must exceed 4");
  if (!(heldout > 0.0 && heldout < 1.0)) throw ConfigError("synth: heldout must lie in (0, 1)");
  if (tokens < 4 * seq_len) throw ConfigError("synth: stream shorter than four sequences");
}

void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = nlohmann::json{{"vocab", s.vocab},         {"seq_len", s.seq_len},
                     {"tokens", s.tokens},       {"order", s.order},
                     {"branching", s.branching},
                     {"noise", s.noise},         {"copy_prob", s.copy_prob},
                     {"copy_span", s.copy_span}, {"heldout", s.heldout},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  s = SynthSpec{};
  auto opt = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  opt("vocab", s.vocab);
  opt("seq_len", s.seq_len);
  opt("tokens", s.tokens);
  opt("order", s.order);
  opt("branching", s.branching);
  opt("noise", s.noise);
  opt("copy_prob", s.copy_prob);
  opt("copy_span", s.copy_span);
  opt("heldout", s.heldout);
  opt("seed", s.seed);
}

SynthSpec parse_synth_spec(const nlohmann::json& j) {
  SynthSpec s;
  try {
    s = j.get<SynthSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

SynthData gen_data(const SynthSpec& spec) {
  spec.validate();
  Rng rng(mix_seed({spec.seed, 0x73796e7468ULL}));
  const std::uint64_t table = mix_seed({spec.seed, 0x7461626c65ULL});
  // Successor k of a context is drawn with weight 2^-k.
  std::vector<double> cumulative(spec.branching);
  double total = 0.0;
  for (std::size_t k = 0; k < spec.branching; ++k) {
    total += std::ldexp(1.0, -int(k));
    cumulative[k] = total;
  }
  SynthData out;
  out.tokens.resize(spec.tokens);
  out.copied.assign(spec.tokens, 0);
  const auto V = static_cast<std::uint64_t>(spec.vocab);
  for (std::size_t p = 0; p < spec.tokens; ++p) {
    const double u_copy = rng.uniform();
    const double u_noise = rng.uniform();
    const double u_pick = rng.uniform() * total;
    const std::uint64_t uniform_token = rng.below(V);
    if (p < 2) {
      out.tokens[p] = static_cast<std::int32_t>(uniform_token);
    } else if (p >= spec.copy_span && u_copy < spec.copy_prob) {
      out.tokens[p] = out.tokens[p - spec.copy_span];
      out.copied[p] = 1;
    } else if (u_noise < spec.noise) {
      out.tokens[p] = static_cast<std::int32_t>(uniform_token);
    } else {
      const std::size_t k = std::size_t(
          std::lower_bound(cumulative.begin(), cumulative.end(), u_pick) - cumulative.begin());
      const std::uint64_t far = spec.order == 2 ? std::uint64_t(out.tokens[p - 2]) : V;
      const std::uint64_t ctx = mix_seed({table, far,
                                          std::uint64_t(out.tokens[p - 1]),
                                          std::min<std::uint64_t>(k, spec.branching - 1)});
      out.tokens[p] = static_cast<std::int32_t>(ctx % V);
    }
  }
  out.train_tokens = static_cast<std::size_t>(std::llround((1.0 - spec.heldout) * double(spec.tokens)));
  return out;
}

namespace {

constexpr char kTokenMagic[4] = {'H', 'F', 'T', 'K'};
constexpr std::uint32_t kTokenVersion = 1;

}  // namespace

void save_tokens(const SynthData& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  const std::uint64_t train = data.train_tokens, n = data.tokens.size();
  out.write(kTokenMagic, 4);
  out.write(reinterpret_cast<const char*>(&kTokenVersion), 4);
  out.write(reinterpret_cast<const char*>(&train), 8);
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(reinterpret_cast<const char*>(data.tokens.data()), std::streamsize(n * 4));
  out.write(reinterpret_cast<const char*>(data.copied.data()), std::streamsize(data.copied.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

SynthData load_tokens(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t train = 0, n = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&train), 8);
  in.read(reinterpret_cast<char*>(&n), 8);
  if (!in || std::memcmp(magic, kTokenMagic, 4) != 0) throw FormatError("not a token file");
  if (version != kTokenVersion) throw FormatError("token file version mismatch");
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec || train > n || size != 24 + n * 5) throw FormatError("truncated token file");
  SynthData data;
  data.train_tokens = train;
  data.tokens.resize(n);
  data.copied.resize(n);
  in.read(reinterpret_cast<char*>(data.tokens.data()), std::streamsize(n * 4));
  in.read(reinterpret_cast<char*>(data.copied.data()), std::streamsize(n));
  if (!in) throw FormatError("truncated token file");
  return data;
}

double unigram_perplexity(std::span<const std::int32_t> tokens, std::size_t vocab) {
  if (tokens.empty()) throw ConfigError("unigram: empty stream");
  std::vector<std::size_t> counts(vocab, 0);
  for (std::int32_t t : tokens) {
    if (t < 0 || std::size_t(t) >= vocab) throw ConfigError("unigram: token outside vocab");
    ++counts[std::size_t(t)];
  }
  double h = 0.0;
  const double n = double(tokens.size());
  for (std::size_t c : counts) {
    if (c) h -= double(c) / n * std::log(double(c) / n);
  }
  return std::exp(h);
}

std::vector<Batch> sequential_batches(std::span<const std::int32_t> tokens, std::size_t batch,
                                      std::size_t seq, std::size_t max_batches) {
  if (batch == 0 || seq < 2) throw ConfigError("sequential_batches: need batch >= 1, seq >= 2");
  std::vector<Batch> out;
  std::size_t at = 0;
  while (out.size() < max_batches && at + batch * seq <= tokens.size()) {
    Batch b{{tokens.begin() + at, tokens.begin() + at + batch * seq}, batch, seq};
    out.push_back(std::move(b));
    at += batch * seq;
  }
  if (out.empty()) throw ConfigError("sequential_batches: stream shorter than one batch");
  return out;
}

HybridModel train_teacher(const ModelConfig& cfg, std::span<const std::int32_t> corpus,
                          const TrainConfig& tc, std::ostream* log) {
  if (cfg.count(LayerKind::kMha) != cfg.L) throw ConfigError("teacher config must be all-MHA");
  HybridModel model = make_model(cfg, std::nullopt, tc.seed);
  BatchSampler data(corpus, tc.batch_size, tc.seq_len, tc.seed);
  run_lm(model, data, tc, log);
  return model;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"perplexity", r.perplexity},
                     {"kl_to_teacher", r.kl_to_teacher},
                     {"tokens", r.tokens},
                     {"prefill_tokens_per_s", r.prefill_tokens_per_s},
                     {"decode_tokens_per_s", r.decode_tokens_per_s},
                     {"peak_cache_bytes", r.peak_cache_bytes}};
}

EvalReport eval_model(const HybridModel& model, std::span<const Batch> data,
                      const HybridModel* teacher) {
  if (teacher != nullptr && teacher->cfg.vocab != model.cfg.vocab) {
    throw ConfigError("eval: teacher and model vocabularies differ");
  }
  if (data.empty()) throw ConfigError("eval: no data");
  double nll = 0.0, kl = 0.0;
  std::size_t predicted = 0, rows = 0;
  const std::size_t V = model.cfg.vocab;
  for (const Batch& b : data) {
    b.validate(V);
    const Tensor logits = forward_logits(model, b.tokens, b.batch, b.seq);
    const std::vector<std::int32_t> targets = b.targets();
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      if (targets[r] < 0) continue;
      const double* row = logits.data() + r * V;
      const double m = *std::max_element(row, row + V);
      double z = 0.0;
      for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - m);
      nll += m + std::log(z) - row[targets[r]];
      ++predicted;
    }
    if (teacher != nullptr) {
      kl += kd_loss(forward_logits(*teacher, b.tokens, b.batch, b.seq), logits, b.batch) *
            double(b.batch);
    }
    rows += logits.rows();
  }
  EvalReport r;
  r.tokens = predicted;
  r.perplexity = std::exp(nll / double(predicted));
  r.kl_to_teacher = teacher != nullptr ? kl / double(rows) : 0.0;
  return r;
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::int32_t argmax_last_row(const Tensor& logits) {
  const std::size_t V = logits.cols();
  const double* row = logits.data() + (logits.rows() - 1) * V;
  return static_cast<std::int32_t>(std::max_element(row, row + V) - row);
}

}  // namespace

double BenchReport::step_time_near(std::size_t position, std::size_t radius) const {
  if (step_seconds.empty()) return 0.0;
  const long center = long(position) - long(prompt_len);
  const long lo = std::max<long>(0, center - long(radius));
  const long hi = std::min<long>(long(step_seconds.size()) - 1, center + long(radius));
  if (lo > hi) throw ConfigError("bench: position outside the measured range");
  return median(std::vector<double>(step_seconds.begin() + lo, step_seconds.begin() + hi + 1));
}

BenchReport bench(const HybridModel& model, std::size_t prompt_len, std::size_t gen_len,
                  std::size_t reps) {
  if (reps < 3) throw ConfigError("bench: reps must be at least 3");
  if (prompt_len == 0) throw ConfigError("bench: prompt_len must be positive");
  using clock = std::chrono::steady_clock;
  BenchReport report;
  report.prompt_len = prompt_len;
  report.gen_len = gen_len;
  report.reps = reps;
  std::vector<std::int32_t> prompt(prompt_len);
  for (std::size_t i = 0; i < prompt_len; ++i) {
    prompt[i] = static_cast<std::int32_t>((i * 7 + 1) % model.cfg.vocab);
  }
  std::vector<double> prefill, decode;
  std::vector<std::vector<double>> steps(gen_len);
  for (std::size_t r = 0; r < reps; ++r) {
    Decoder dec(model);
    auto t0 = clock::now();
    Tensor logits = dec.feed(prompt);
    prefill.push_back(double(prompt_len) / std::chrono::duration<double>(clock::now() - t0).count());
    double total = 0.0;
    for (std::size_t k = 0; k < gen_len; ++k) {
      const std::int32_t next = argmax_last_row(logits);
      const auto s0 = clock::now();
      logits = dec.feed(std::span(&next, 1));
      const double dt = std::chrono::duration<double>(clock::now() - s0).count();
      steps[k].push_back(dt);
      total += dt;
    }
    if (gen_len > 0) decode.push_back(double(gen_len) / total);
    report.peak_cache_bytes = std::max(report.peak_cache_bytes, dec.kv_cache_bytes());
    report.state_bytes = dec.ssm_state_bytes();
  }
  report.prefill_tokens_per_s = median(prefill);
  report.decode_tokens_per_s = decode.empty() ? 0.0 : median(decode);
  report.step_seconds.reserve(gen_len);
  for (auto& s : steps) report.step_seconds.push_back(median(s));
  return report;
}

void write_bench_csv(std::ostream& out, std::span<const BenchReport> rows) {
  out << "gen_len,tokens_per_s,peak_cache_bytes\n";
  for (const BenchReport& r : rows) {
    out << r.gen_len << ',' << r.decode_tokens_per_s << ',' << r.peak_cache_bytes << '\n';
  }
}

}  // namespace hforge
