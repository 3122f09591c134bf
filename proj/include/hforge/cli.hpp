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

#ifndef HFORGE_CLI_HPP
#define HFORGE_CLI_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace hforge {

/// Run directory bookkeeping, stored as manifest.json next to the
/// artifacts. Paths are relative to the run directory.
struct PipelineManifest {
  struct Stage {
    bool done = false;
    std::uint64_t seed = 0;
    std::vector<std::string> artifacts;
    bool operator==(const Stage&) const = default;
  };

  std::uint64_t seed = 0;
  std::map<std::string, Stage> stages;

  /// Throws FormatError when a completed stage lists a missing file.
  void validate(const std::filesystem::path& dir) const;
  bool operator==(const PipelineManifest&) const = default;
};

void to_json(nlohmann::json& j, const PipelineManifest& m);
void from_json(const nlohmann::json& j, PipelineManifest& m);

/// Stage names in pipeline order.
const std::vector<std::string>& pipeline_stages();

/// Reads a pipeline config. String-valued sections name JSON files
/// resolved against the config file's directory and are inlined.
nlohmann::json load_pipeline_config(const std::filesystem::path& path);

/// Runs one subcommand. args excludes the program name. Returns 0 on
/// success, 1 on usage errors and 2 on runtime or validation errors.
int cli_dispatch(std::span<const std::string> args, std::ostream& out, std::ostream& err);

int cli_main(int argc, char** argv);

}  // namespace hforge

#endif  // HFORGE_CLI_HPP
