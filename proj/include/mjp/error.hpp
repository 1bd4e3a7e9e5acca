#pragma once

#include <stdexcept>
#include <string>

namespace mjp {

/// Failure categories. The numeric values double as CLI exit codes.
enum class ErrorKind : int {
  usage = 2,
  prerequisite = 3,
  data = 4,
  divergence = 5,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::prerequisite: return "prerequisite";
    case ErrorKind::data: return "data";
    case ErrorKind::divergence: return "divergence";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Array/grid shapes that do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed or truncated file contents. `offset` is the byte position where decoding stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& path, std::size_t offset, const std::string& what)
      : Error(ErrorKind::data, path + " @" + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error(ErrorKind::divergence, what) {}
};

class PrerequisiteError : public Error {
 public:
  explicit PrerequisiteError(const std::string& what) : Error(ErrorKind::prerequisite, what) {}
};

}  // namespace mjp
