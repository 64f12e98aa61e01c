#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "coseg/pipeline.hpp"
#include "coseg/profiler.hpp"

namespace coseg::cli {

enum Exit { kOk = 0, kUsage = 1, kInvalid = 2, kFailure = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Invocation {
  std::string command;  // gen-data | train | eval | gradcheck | profile | export-masks
  RunConfig cfg;
  std::string checkpoint;
  std::vector<std::size_t> snippets;
  std::vector<Geometry> geometries;
  bool key_values = false;
  std::vector<std::string> argv;
  std::string config_text;  // every run option in config-file form
};

// Flags override values from --config; unknown keys and malformed values
// throw UsageError. The config is not validated here.
Invocation parse(const std::vector<std::string>& args);

Geometry parse_geometry(const std::string& s);

// cfg.output_dir, or <root>/<command>-<hash> where root comes from
// COSEG_OUTPUT_ROOT (default "runs").
std::filesystem::path output_dir(const Invocation& inv);

// Validates, runs the command and maps failures to exit codes.
int run(const Invocation& inv, std::ostream& out, std::ostream& err);
int main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace coseg::cli
