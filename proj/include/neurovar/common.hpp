#pragma once

#include <stdexcept>
#include <string>

namespace nv {

// Exit codes used by the CLI. Library code throws the matching exception
// type; the CLI maps it to the code.
enum class ExitCode : int {
  ok = 0,
  config_error = 2,
  missing_artifact = 3,
  numerical_failure = 4,
};

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration or failed input validation.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// A required upstream artifact (file) is missing or unreadable.
struct MissingArtifactError : Error {
  explicit MissingArtifactError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf encountered where finite values are required (training abort).
struct NumericalError : Error {
  explicit NumericalError(const std::string& msg) : Error(msg) {}
};

// Tensor shape disagreement; the message names the offending operation.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

}  // namespace nv
