#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace nero {

/// Record of one CLI invocation, written before any work starts.
struct RunManifest {
  std::string subcommand;
  std::vector<std::string> argv;
  std::string config;  // resolved configuration as JSON text
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
  std::uint64_t seed = 0;
  std::string started_at;
  std::string git_describe;
};

void write_manifest(const std::filesystem::path& path, const RunManifest& m);
RunManifest read_manifest(const std::filesystem::path& path);

/// Exit codes: 0 success, 1 validation error (bad flags, malformed or missing
/// input), 2 runtime error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

std::string git_describe();

}  // namespace nero
