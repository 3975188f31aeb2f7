#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "nxn/config.hpp"

namespace nxn {

// Exit codes of a run.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitDivergence = 3,
  kExitCheckpoint = 4,
};

struct RunOutcome {
  int exit_code = kExitOk;
  std::string run_dir;  // empty when the config could not be resolved
  json summary;
  std::string error;
};

// Resolves the config, creates <out_root>/<task>-<hash>-s<seed>/, echoes the
// resolved config as config.json and dispatches to the task. Failures are
// reported through the exit code and an error.json record, never thrown.
RunOutcome run_experiment(const json& raw, const std::string& out_root);
RunOutcome run_config_file(const std::string& path, const std::string& out_root);

std::string run_directory_name(const ExperimentConfig& c);

// Stream tags separating the random streams of a run.
constexpr std::uint64_t kModelStream = 0x6d6f64656cULL;
constexpr std::uint64_t kPnpStream = 0x706e70ULL;
constexpr std::uint64_t kVerifyStream = 0x766572ULL;

}  // namespace nxn
