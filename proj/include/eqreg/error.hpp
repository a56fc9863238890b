#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace eqreg {

enum class ErrorKind {
  Constraint,        // sampler ranges admit no transform
  Semantics,         // map carries the wrong channel semantics
  Dimension,         // shape / frame mismatch
  EmptySample,       // zero crops
  DegenerateCoverage,
  Group,             // transform set not closed
  Shape,             // network input not divisible
  Tape,              // backward on a stale tape
  Format,            // bad magic / malformed file
  Dtype,             // unsupported payload type code
  Version,
  Truncated,
  Checksum,
  Architecture,
  EmptyMetric,
  Overlap,
  Collision,
  Config,
  Io,
  Divergence,
  Invariant,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace eqreg
