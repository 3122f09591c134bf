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

#include "hforge/smart.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#include "hforge/error.hpp"

namespace hforge {
namespace {

constexpr double kMaxCandidates = 1e6;

std::size_t argmax(std::span<const double> s, std::size_t begin, std::size_t end) {
  std::size_t best = begin;
  for (std::size_t i = begin + 1; i < end; ++i) {
    if (s[i] > s[best]) best = i;
  }
  return best;
}

double binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0.0;
  k = std::min(k, n - k);
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * double(n - k + i) / double(i);
  return std::round(r);
}

double sum_at(std::span<const double> s, const std::vector<std::size_t>& idx) {
  double total = 0.0;
  for (std::size_t i : idx) total += s[i];
  return total;
}

}  // namespace

void SensitivityProfile::validate() const {
  if (scores.empty()) throw ConfigError("sensitivity profile has no scores");
  for (double s : scores) {
    if (!std::isfinite(s)) throw ConfigError("sensitivity profile has a non-finite score");
  }
}

void to_json(nlohmann::json& j, const SensitivityProfile& p) {
  j = nlohmann::json{{"scores", p.scores},
                     {"provenance",
                      {{"dataset", p.provenance.dataset},
                       {"samples", p.provenance.samples},
                       {"decode_steps", p.provenance.decode_steps}}}};
}

void from_json(const nlohmann::json& j, SensitivityProfile& p) {
  p.scores = j.at("scores").get<std::vector<double>>();
  p.provenance = {};
  if (j.contains("provenance")) {
    const auto& v = j.at("provenance");
    p.provenance.dataset = v.value("dataset", std::string());
    p.provenance.samples = v.value("samples", std::size_t{0});
    p.provenance.decode_steps = v.value("decode_steps", std::size_t{0});
  }
}

SensitivityProfile parse_profile(const nlohmann::json& j) {
  SensitivityProfile p;
  try {
    p = j.get<SensitivityProfile>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sensitivity profile: ") + e.what());
  }
  p.validate();
  return p;
}

void HybridLayout::validate() const {
  for (std::size_t k = 0; k < mla_indices.size(); ++k) {
    if (mla_indices[k] >= L) {
      throw ConfigError("layout index " + std::to_string(mla_indices[k]) + " outside " +
                        std::to_string(L) + " layers");
    }
    if (k > 0 && mla_indices[k] <= mla_indices[k - 1]) {
      throw ConfigError("layout indices must be strictly increasing");
    }
  }
  if (mla_indices.size() >= 3) {
    const GapBounds g = gap_bounds(mla_indices.front(), mla_indices.back(), mla_indices.size());
    for (std::size_t k = 1; k < mla_indices.size(); ++k) {
      const long gap = long(mla_indices[k]) - long(mla_indices[k - 1]) - 1;
      if (gap < g.g_min || gap > g.g_max) {
        throw ConfigError("layout gap " + std::to_string(gap) + " outside [" +
                          std::to_string(g.g_min) + ", " + std::to_string(g.g_max) + "]");
      }
    }
  }
}

std::vector<LayerKind> HybridLayout::layer_kinds() const {
  std::vector<LayerKind> kinds(L, LayerKind::kMamba2);
  for (std::size_t i : mla_indices) kinds.at(i) = LayerKind::kMla;
  return kinds;
}

void to_json(nlohmann::json& j, const HybridLayout& layout) {
  j = nlohmann::json{{"L", layout.L}, {"mla_indices", layout.mla_indices}};
}

void from_json(const nlohmann::json& j, HybridLayout& layout) {
  layout.L = j.at("L").get<std::size_t>();
  layout.mla_indices = j.at("mla_indices").get<std::vector<std::size_t>>();
}

HybridLayout parse_layout(const nlohmann::json& j) {
  HybridLayout layout;
  try {
    layout = j.get<HybridLayout>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("layout: ") + e.what());
  }
  layout.validate();
  return layout;
}

GapBounds gap_bounds(std::size_t first, std::size_t last, std::size_t n) {
  if (n < 2) throw ConfigError("gap bounds need at least two layers");
  GapBounds g;
  g.t = long(last) - long(first) - long(n) + 1;
  const long parts = long(n) - 1;
  // Floor and ceiling that stay correct for negative t.
  g.g_min = g.t >= 0 ? g.t / parts : -((-g.t + parts - 1) / parts);
  g.g_max = g.t >= 0 ? (g.t + parts - 1) / parts : -((-g.t) / parts);
  return g;
}

double count_valid_configs(std::size_t first, std::size_t last, std::size_t n) {
  if (first >= last) throw ConfigError("enumerate: first endpoint must precede the last");
  const GapBounds g = gap_bounds(first, last, n);
  if (g.t < 0) return 0.0;
  if (g.g_min == g.g_max) return 1.0;
  const long wide = g.t - g.g_min * (long(n) - 1);  // gaps at g_max
  return binomial(n - 1, std::size_t(wide));
}

std::vector<std::vector<std::size_t>> enumerate_valid_configs(std::size_t first, std::size_t last,
                                                              std::size_t n) {
  const double count = count_valid_configs(first, last, n);
  if (count > kMaxCandidates) {
    throw ConfigError("enumerate: " + std::to_string(count) + " candidate sets exceed the limit");
  }
  std::vector<std::vector<std::size_t>> out;
  if (count == 0.0) return out;
  const GapBounds g = gap_bounds(first, last, n);
  std::vector<std::size_t> current;
  // Depth-first in increasing index order yields lexicographic output.
  auto extend = [&](auto&& self, std::size_t prev) -> void {
    if (current.size() == n - 2) {
      const long gap = long(last) - long(prev) - 1;
      if (gap >= g.g_min && gap <= g.g_max) out.push_back(current);
      return;
    }
    for (long gap = g.g_min; gap <= g.g_max; ++gap) {
      const std::size_t next = prev + std::size_t(gap) + 1;
      if (next >= last) break;
      // Prune prefixes that cannot reach `last` with the remaining gaps.
      const long remaining = long(n) - 2 - long(current.size());
      const long distance = long(last) - long(next);
      if (distance < remaining * (g.g_min + 1) || distance > remaining * (g.g_max + 1)) continue;
      current.push_back(next);
      self(self, next);
      current.pop_back();
    }
  };
  extend(extend, first);
  return out;
}

std::pair<std::size_t, std::size_t> terminal_layers(std::span<const double> scores,
                                                    std::size_t n) {
  const std::size_t L = scores.size();
  if (n == 0 || n > L) throw ConfigError("terminal layers need 1 <= n <= L");
  const std::size_t part = L / n;
  return {argmax(scores, 0, part), argmax(scores, L - part, L)};
}

std::vector<std::size_t> best_valid_config(std::span<const double> s, std::size_t first,
                                           std::size_t last, std::size_t n) {
  if (first >= last || last >= s.size()) throw ConfigError("best_valid_config: bad endpoints");
  const GapBounds g = gap_bounds(first, last, n);
  if (g.t < 0) throw InfeasibleError("no configuration satisfies the gap bounds");
  if (n == 2) return {};
  const std::size_t m = n - 1;
  const double none = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best(m + 1, std::vector<double>(last + 1, none));
  best[m][last] = 0.0;
  auto value = [&](std::size_t j, std::size_t q) {
    if (q > last || best[j + 1][q] == none) return none;
    return (q == last ? 0.0 : s[q]) + best[j + 1][q];
  };
  for (std::size_t j = m; j-- > 0;) {
    for (std::size_t p = first; p < last; ++p) {
      for (long d = g.g_min + 1; d <= g.g_max + 1; ++d) {
        best[j][p] = std::max(best[j][p], value(j, p + std::size_t(d)));
      }
    }
  }
  if (best[0][first] == none) throw InfeasibleError("no configuration satisfies the gap bounds");
  std::vector<std::size_t> out;
  std::size_t p = first;
  for (std::size_t j = 0; j + 1 < m; ++j) {
    for (long d = g.g_min + 1; d <= g.g_max + 1; ++d) {
      const std::size_t q = p + std::size_t(d);
      if (value(j, q) == best[j][p]) {
        p = q;
        break;
      }
    }
    out.push_back(p);
  }
  return out;
}

HybridLayout smart_select(const SensitivityProfile& profile, std::size_t n) {
  profile.validate();
  const std::span<const double> s = profile.scores;
  const std::size_t L = s.size();
  if (n > L) {
    throw ConfigError("cannot place " + std::to_string(n) + " MLA layers in " + std::to_string(L));
  }
  HybridLayout layout{L, {}};
  if (n == 0) return layout;
  if (n == 1) {
    layout.mla_indices = {argmax(s, 0, L)};
    return layout;
  }
  const auto [first, last] = terminal_layers(s, n);
  if (last <= first || last - first < n - 1) {
    throw InfeasibleError("terminal layers " + std::to_string(first) + " and " +
                          std::to_string(last) + " leave no room for " + std::to_string(n) +
                          " MLA layers");
  }
  std::vector<std::size_t> chosen;
  if (count_valid_configs(first, last, n) <= kMaxCandidates) {
    const auto candidates = enumerate_valid_configs(first, last, n);
    if (candidates.empty()) throw InfeasibleError("no configuration satisfies the gap bounds");
    std::size_t best = 0;
    double best_sum = sum_at(s, candidates[0]);
    for (std::size_t c = 1; c < candidates.size(); ++c) {
      const double v = sum_at(s, candidates[c]);
      if (v > best_sum) {
        best = c;
        best_sum = v;
      }
    }
    chosen = candidates[best];
  } else {
    chosen = best_valid_config(s, first, last, n);
  }
  layout.mla_indices.push_back(first);
  layout.mla_indices.insert(layout.mla_indices.end(), chosen.begin(), chosen.end());
  layout.mla_indices.push_back(last);
  return layout;
}

HybridModel substitute_mixer(const HybridModel& mamba, const HybridModel& mla, std::size_t i) {
  HybridModel out = mamba;
  if (mla.kind(i) == LayerKind::kMla) out.mla = mla.mla_config();
  out.set_mixer(i, mla.mixer(i));
  return out;
}

namespace {

std::vector<Tensor> teacher_logits(const HybridModel& teacher, std::span<const Batch> data) {
  std::vector<Tensor> out;
  out.reserve(data.size());
  for (const Batch& b : data) out.push_back(forward_logits(teacher, b.tokens, b.batch, b.seq));
  return out;
}

double kl_against(std::span<const Tensor> target, const HybridModel& model,
                  std::span<const Batch> data) {
  double total = 0.0;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const Batch& b = data[k];
    total += kd_loss(target[k], forward_logits(model, b.tokens, b.batch, b.seq), b.batch) *
             double(b.batch);
  }
  return total;
}

}  // namespace

double total_kl(const HybridModel& teacher, const HybridModel& model,
                std::span<const Batch> data) {
  return kl_against(teacher_logits(teacher, data), model, data);
}

SensitivityProfile score_sensitivity(const HybridModel& teacher, const HybridModel& full_mamba,
                                     const HybridModel& full_mla, std::span<const Batch> data,
                                     std::size_t jobs) {
  const ModelConfig& c = full_mamba.cfg;
  for (const HybridModel* m : {&teacher, &full_mla}) {
    if (m->cfg.L != c.L || m->cfg.d != c.d || m->cfg.vocab != c.vocab) {
      throw ConfigError("sensitivity: models differ in depth, width or vocabulary");
    }
  }
  if (c.count(LayerKind::kMamba2) != c.L) {
    throw ConfigError("sensitivity: the base model must be all-Mamba2");
  }
  if (data.empty()) throw ConfigError("sensitivity: no data");
  for (const Batch& b : data) b.validate(c.vocab);

  const std::vector<Tensor> target = teacher_logits(teacher, data);
  const double base = kl_against(target, full_mamba, data);
  SensitivityProfile profile;
  profile.scores.assign(c.L, 0.0);
  for (const Batch& b : data) profile.provenance.samples += b.batch;
  profile.provenance.decode_steps = data.front().seq;

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < c.L; i = next++) {
      try {
        const HybridModel variant = substitute_mixer(full_mamba, full_mla, i);
        profile.scores[i] = base - kl_against(target, variant, data);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, c.L);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return profile;
}

}  // namespace hforge
