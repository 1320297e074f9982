#pragma once

#include <stdexcept>
#include <string>

namespace rmx {

/// Broad failure category. The CLI maps these onto exit codes and the
/// service onto HTTP statuses.
enum class error_kind {
  usage,             // bad flags or request shape
  invalid_argument,  // well-formed but out-of-domain value (e.g. risk >= 1)
  data,              // malformed or inconsistent input data
  not_found,         // unknown model, variable, partition, subgroup
  computation,       // numerical failure (non-convergence, degenerate input)
};

inline const char* to_string(error_kind kind) noexcept {
  switch (kind) {
    case error_kind::usage: return "usage";
    case error_kind::invalid_argument: return "invalid_argument";
    case error_kind::data: return "data";
    case error_kind::not_found: return "not_found";
    case error_kind::computation: return "computation";
  }
  return "unknown";
}

class error : public std::runtime_error {
public:
  error(error_kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  error_kind kind() const noexcept { return kind_; }

private:
  error_kind kind_;
};

inline error usage_error(const std::string& what) {
  return {error_kind::usage, what};
}
inline error invalid_argument(const std::string& what) {
  return {error_kind::invalid_argument, what};
}
inline error data_error(const std::string& what) {
  return {error_kind::data, what};
}
inline error not_found(const std::string& what) {
  return {error_kind::not_found, what};
}
inline error computation_error(const std::string& what) {
  return {error_kind::computation, what};
}

/// Process exit code for the CLI: 2 usage, 3 data, 4 computation.
inline int exit_code(error_kind kind) noexcept {
  switch (kind) {
    case error_kind::usage:
    case error_kind::invalid_argument:
      return 2;
    case error_kind::data:
    case error_kind::not_found:
      return 3;
    case error_kind::computation:
      return 4;
  }
  return 1;
}

/// HTTP status for the service.
inline int http_status(error_kind kind) noexcept {
  switch (kind) {
    case error_kind::usage:
    case error_kind::data:
      return 400;
    case error_kind::not_found:
      return 404;
    case error_kind::invalid_argument:
      return 422;
    case error_kind::computation:
      return 500;
  }
  return 500;
}

} // namespace rmx
