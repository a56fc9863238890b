#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "eqreg/error.hpp"

namespace eqreg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitDivergence = 4;

/// Process exit code for an error kind: 2 configuration, 3 input/output, 4 divergence.
int exit_code(ErrorKind kind);

/// Git blob id (SHA-1 of "blob <size>\0" + content), lower-case hex.
std::string git_blob_hash(std::span<const std::uint8_t> bytes);

/// What a command read and wrote. Serialised as run.json next to its outputs.
struct RunRecord {
  std::string run_id;
  std::string command;
  std::vector<std::string> arguments;
  std::string config;                                // config snapshot, if any
  std::map<std::string, std::string> inputs;         // path -> blob hash
  std::vector<std::string> outputs;

  /// Tree-style hash over the sorted (path, blob hash) input list.
  std::string input_hash() const;
  std::string to_json() const;
};

/// Runs `eqreg <subcommand> ...`; args excludes the program name.
/// gen | train | eval | eqerr | tta. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace eqreg
