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

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "hforge/attention.hpp"
#include "hforge/error.hpp"
#include "hforge/ssm.hpp"

namespace hforge {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

HybridLayout layout_of(const HybridModel& model) {
  HybridLayout layout{model.cfg.L, {}};
  for (std::size_t i = 0; i < model.cfg.L; ++i) {
    if (model.kind(i) == LayerKind::kMla) layout.mla_indices.push_back(i);
  }
  return layout;
}

HybridModel assemble(const HybridModel& mla, const HybridModel& mamba, const HybridLayout& layout,
                     double tolerance, std::vector<std::string>* warnings) {
  const ModelConfig& c = mla.cfg;
  if (c.with_uniform_kind(LayerKind::kMha) != mamba.cfg.with_uniform_kind(LayerKind::kMha)) {
    throw ConfigError("assemble: source models have different shapes");
  }
  if (c.count(LayerKind::kMla) != c.L || mamba.cfg.count(LayerKind::kMamba2) != c.L) {
    throw ConfigError("assemble: sources must be all-MLA and all-Mamba2");
  }
  if (layout.L != c.L) {
    throw ConfigError("assemble: layout has " + std::to_string(layout.L) + " layers, models " +
                      std::to_string(c.L));
  }
  layout.validate();
  for (const auto& [name, e] : mla.params) {
    if (is_mixer_param(name)) continue;
    const Tensor& other = mamba.params.get(name);
    const double diff = e.value.shape() == other.shape() ? max_abs_diff(e.value, other) : INFINITY;
    if (diff > tolerance && warnings != nullptr) {
      warnings->push_back("shared parameter " + name + " differs between sources by " +
                          std::to_string(diff) + "; using the MLA source");
    }
  }
  HybridModel out = mla;
  const std::set<std::size_t> chosen(layout.mla_indices.begin(), layout.mla_indices.end());
  for (std::size_t i = 0; i < c.L; ++i) {
    if (!chosen.count(i)) out.set_mixer(i, mamba.mixer(i));
  }
  if (chosen.empty()) out.mla.reset();
  out.validate();
  return out;
}

void to_json(nlohmann::json& j, const KvReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const KvReport::Layer& l : r.layers) {
    layers.push_back({{"index", l.index},
                      {"kind", layer_kind_name(l.kind)},
                      {"kv_bytes", l.kv_bytes},
                      {"state_bytes", l.state_bytes}});
  }
  j = nlohmann::json{{"tokens", r.tokens},
                     {"elem_bytes", r.elem_bytes},
                     {"layers", layers},
                     {"kv_bytes", r.kv_bytes},
                     {"state_bytes", r.state_bytes},
                     {"baseline_bytes", r.baseline_bytes},
                     {"ratio", r.ratio},
                     {"percent", r.percent}};
}

KvReport kv_report(const ModelConfig& cfg, const MLAConfig* mcfg, std::size_t t) {
  cfg.validate();
  if (t == 0) throw ConfigError("kv_report: tokens must be positive");
  KvReport r;
  r.tokens = t;
  r.elem_bytes = cfg.elem_bytes();
  for (std::size_t i = 0; i < cfg.L; ++i) {
    KvReport::Layer layer{i, cfg.layer_kinds[i], 0, 0};
    layer.kv_bytes = kv_bytes(layer.kind, cfg, mcfg, t, r.elem_bytes);
    if (layer.kind == LayerKind::kMamba2) layer.state_bytes = ssm_state_bytes(cfg, r.elem_bytes);
    r.kv_bytes += layer.kv_bytes;
    r.state_bytes += layer.state_bytes;
    r.baseline_bytes += kv_bytes(LayerKind::kMha, cfg, nullptr, t, r.elem_bytes);
    r.layers.push_back(layer);
  }
  r.ratio = double(r.kv_bytes) / double(r.baseline_bytes);
  r.percent = std::round(r.ratio * 1e4) / 100.0;
  return r;
}

KvReport kv_report(const ModelConfig& cfg, const HybridLayout& layout, const MLAConfig& mcfg,
                   std::size_t t) {
  if (layout.L != cfg.L) throw ConfigError("kv_report: layout and config disagree on L");
  layout.validate();
  ModelConfig c = cfg;
  c.layer_kinds = layout.layer_kinds();
  mcfg.validate(c);
  return kv_report(c, &mcfg, t);
}

namespace {

constexpr char kMagic[4] = {'H', 'F', 'R', 'G'};
constexpr std::uint64_t kAlign = 64;
constexpr std::size_t kPreamble = 4 + 4 + 8;

std::uint64_t align_up(std::uint64_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t at) {
  T v;
  std::memcpy(&v, in.data() + at, sizeof(T));
  return v;
}

std::uint32_t checksum(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

std::string encode(const Tensor& t) {
  std::string out;
  out.reserve(t.numel() * dtype_size(t.dtype()));
  for (double v : t.values()) {
    if (t.dtype() == DType::kF32) {
      put(out, static_cast<float>(v));
    } else {
      put(out, v);
    }
  }
  return out;
}

nlohmann::json header_json(const CheckpointHeader& h) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : h.tensors) {
    tensors.push_back({{"name", e.name},
                       {"dtype", dtype_name(e.dtype)},
                       {"shape", e.shape},
                       {"trainable", e.trainable},
                       {"offset", e.offset},
                       {"bytes", e.bytes},
                       {"crc32", e.crc32}});
  }
  nlohmann::json j{{"format", "hforge"},
                   {"version", h.version},
                   {"config", h.cfg},
                   {"layout", h.layout},
                   {"tied_head", false},
                   {"payload_bytes", h.payload_bytes},
                   {"tensors", tensors}};
  j["mla"] = h.mla ? nlohmann::json(*h.mla) : nlohmann::json(nullptr);
  return j;
}

// Parses the preamble and JSON header from the first bytes of a file.
CheckpointHeader parse_header(const std::string& prefix, std::uint64_t file_size,
                              std::uint64_t* header_length) {
  if (prefix.size() < kPreamble || std::memcmp(prefix.data(), kMagic, 4) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  const auto version = take<std::uint32_t>(prefix, 4);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  }
  const auto length = take<std::uint64_t>(prefix, 8);
  if (header_length) *header_length = length;
  if (length > file_size - kPreamble) throw FormatError("truncated checkpoint header");
  if (prefix.size() < kPreamble + length) return {};
  CheckpointHeader h;
  try {
    const auto j = nlohmann::json::parse(prefix.substr(kPreamble, length));
    if (j.at("format").get<std::string>() != "hforge") throw FormatError("unknown format tag");
    h.version = j.at("version").get<std::uint32_t>();
    if (h.version != version) throw FormatError("header and preamble versions differ");
    h.cfg = parse_model_config(j.at("config"));
    if (!j.at("mla").is_null()) h.mla = parse_mla_config(j.at("mla"), h.cfg);
    h.layout = j.at("layout").get<HybridLayout>();
    h.payload_bytes = j.at("payload_bytes").get<std::uint64_t>();
    for (const auto& t : j.at("tensors")) {
      CheckpointHeader::Entry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = parse_dtype(t.at("dtype").get<std::string>());
      e.shape = t.at("shape").get<Shape>();
      e.trainable = t.at("trainable").get<bool>();
      e.offset = t.at("offset").get<std::uint64_t>();
      e.bytes = t.at("bytes").get<std::uint64_t>();
      e.crc32 = t.at("crc32").get<std::uint32_t>();
      h.tensors.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what());
  }
  h.payload_offset = align_up(kPreamble + length);
  if (h.layout.L != h.cfg.L || h.layout.layer_kinds().size() != h.cfg.L) {
    throw FormatError("checkpoint layout does not match the config");
  }
  // Directory checks: sizes, bounds and overlap.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& e : h.tensors) {
    if (e.bytes != shape_numel(e.shape) * dtype_size(e.dtype)) {
      throw FormatError("tensor " + e.name + " byte count does not match its shape");
    }
    if (e.offset > h.payload_bytes || e.bytes > h.payload_bytes - e.offset) {
      throw FormatError("tensor " + e.name + " lies outside the payload");
    }
    spans.emplace_back(e.offset, e.bytes);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t k = 1; k < spans.size(); ++k) {
    if (spans[k - 1].first + spans[k - 1].second > spans[k].first) {
      throw FormatError("overlapping tensors in checkpoint directory");
    }
  }
  return h;
}

std::string read_file(const std::filesystem::path& path, std::uint64_t limit) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string out;
  out.resize(limit);
  in.read(out.data(), static_cast<std::streamsize>(limit));
  out.resize(static_cast<std::size_t>(in.gcount()));
  return out;
}

}  // namespace

std::string checkpoint_bytes(const HybridModel& model) {
  model.validate();
  CheckpointHeader h;
  h.cfg = model.cfg;
  h.mla = model.mla;
  h.layout = layout_of(model);
  std::string payload;
  for (const auto& [name, e] : model.params) {
    payload.resize(align_up(payload.size()), '\0');
    const std::string data = encode(e.value);
    h.tensors.push_back({name, e.value.dtype(), e.value.shape(), e.trainable, payload.size(),
                         data.size(), checksum(data.data(), data.size())});
    payload += data;
  }
  h.payload_bytes = payload.size();
  const std::string header = header_json(h).dump();
  std::string out(kMagic, 4);
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(header.size()));
  out += header;
  out.resize(align_up(out.size()), '\0');
  out += payload;
  return out;
}

void save_checkpoint(const HybridModel& model, const std::filesystem::path& path) {
  const std::string bytes = checkpoint_bytes(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  std::error_code ec;
  const std::uint64_t size = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError("cannot stat " + path.string());
  std::uint64_t length = 0;
  parse_header(read_file(path, std::min<std::uint64_t>(size, kPreamble)), size, &length);
  return parse_header(read_file(path, kPreamble + length), size, nullptr);
}

HybridModel parse_checkpoint(const std::string& bytes) {
  CheckpointHeader h = parse_header(bytes, bytes.size(), nullptr);
  if (bytes.size() < h.payload_offset || bytes.size() - h.payload_offset != h.payload_bytes) {
    throw FormatError("truncated checkpoint payload");
  }
  HybridModel model;
  model.cfg = h.cfg;
  model.mla = h.mla;
  for (const auto& e : h.tensors) {
    const char* data = bytes.data() + h.payload_offset + e.offset;
    if (checksum(data, e.bytes) != e.crc32) throw FormatError("checksum mismatch in " + e.name);
    Tensor t(e.shape);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      if (e.dtype == DType::kF32) {
        float f;
        std::memcpy(&f, data + i * 4, 4);
        t[i] = f;
      } else {
        std::memcpy(&t[i], data + i * 8, 8);
      }
    }
    t.cast(e.dtype);
    model.params.add(e.name, std::move(t), e.trainable);
  }
  try {
    model.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint does not describe a valid model: ") + e.what());
  }
  if (layout_of(model) != h.layout) throw FormatError("checkpoint layout does not match its layers");
  return model;
}

HybridModel load_checkpoint(const std::filesystem::path& path) {
  std::error_code ec;
  const std::uint64_t size = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError("cannot stat " + path.string());
  return parse_checkpoint(read_file(path, size));
}

}  // namespace hforge
