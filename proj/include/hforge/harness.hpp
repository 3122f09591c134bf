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

#ifndef HFORGE_HARNESS_HPP
#define HFORGE_HARNESS_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hforge/distill.hpp"
#include "hforge/model.hpp"

namespace hforge {

/// Order-2 hashed Markov token process with planted copies: a marked
/// position repeats the token copy_span steps back.
struct SynthSpec {
  std::size_t vocab = 256;
  std::size_t seq_len = 128;
  std::size_t tokens = 200000;
  std::size_t order = 1;       // tokens of context, 1 or 2
  std::size_t branching = 4;   // successors per context
  double noise = 0.05;         // probability of a uniform token
  double copy_prob = 0.1;
  std::size_t copy_span = 16;
  double heldout = 0.1;        // trailing fraction kept for evaluation
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);
SynthSpec parse_synth_spec(const nlohmann::json& j);

struct SynthData {
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> copied;  // 1 where the token was planted
  std::size_t train_tokens = 0;      // leading part used for training

  std::span<const std::int32_t> train() const {
    return std::span(tokens).first(train_tokens);
  }
  std::span<const std::int32_t> heldout() const {
    return std::span(tokens).subspan(train_tokens);
  }
};

SynthData gen_data(const SynthSpec& spec);

/// "HFTK", u32 version, u64 train token count, u64 token count, int32 ids.
void save_tokens(const SynthData& data, const std::filesystem::path& path);
SynthData load_tokens(const std::filesystem::path& path);

/// exp of the entropy of the empirical unigram distribution.
double unigram_perplexity(std::span<const std::int32_t> tokens, std::size_t vocab);

/// Consecutive non-overlapping windows; at most max_batches batches.
std::vector<Batch> sequential_batches(std::span<const std::int32_t> tokens, std::size_t batch,
                                      std::size_t seq, std::size_t max_batches);

/// Cross-entropy training of an all-MHA model initialized from tc.seed.
HybridModel train_teacher(const ModelConfig& cfg, std::span<const std::int32_t> corpus,
                          const TrainConfig& tc, std::ostream* log = nullptr);

struct EvalReport {
  double perplexity = 0.0;
  double kl_to_teacher = 0.0;  // mean per predicted token; 0 without a teacher
  std::size_t tokens = 0;      // predicted positions
  double prefill_tokens_per_s = 0.0;
  double decode_tokens_per_s = 0.0;
  std::size_t peak_cache_bytes = 0;
};

void to_json(nlohmann::json& j, const EvalReport& r);

/// Teacher-forced perplexity and mean token KL against `teacher`.
EvalReport eval_model(const HybridModel& model, std::span<const Batch> data,
                      const HybridModel* teacher = nullptr);

struct BenchReport {
  std::size_t prompt_len = 0;
  std::size_t gen_len = 0;
  std::size_t reps = 0;
  double prefill_tokens_per_s = 0.0;  // medians over reps
  double decode_tokens_per_s = 0.0;
  std::size_t peak_cache_bytes = 0;   // key/value bytes after the last step
  std::size_t state_bytes = 0;        // Mamba2 state bytes
  std::vector<double> step_seconds;   // per decode step, median over reps

  /// Median step time over positions [center - radius, center + radius].
  double step_time_near(std::size_t position, std::size_t radius = 50) const;
};

/// Greedy decoding with batch size 1: prefill `prompt_len` tokens, then
/// feed back `gen_len` generated tokens. Requires reps >= 3.
BenchReport bench(const HybridModel& model, std::size_t prompt_len, std::size_t gen_len,
                  std::size_t reps);

/// "gen_len,tokens_per_s,peak_cache_bytes" rows.
void write_bench_csv(std::ostream& out, std::span<const BenchReport> rows);

}  // namespace hforge

#endif  // HFORGE_HARNESS_HPP
