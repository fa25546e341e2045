#pragma once

#include <stdexcept>
#include <string>

namespace snmm {

// Broad failure classes; the CLI maps them onto exit codes 2/3/4.
enum class ErrorKind { config, data, numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what, long line = -1)
      : Error(ErrorKind::data, line >= 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  long line() const noexcept { return line_; }

 private:
  long line_;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

class SingularMatrixError : public NumericError {
 public:
  SingularMatrixError(const std::string& what, int pivot)
      : NumericError(what + " (singular at pivot " + std::to_string(pivot) + ")"), pivot_(pivot) {}
  int pivot() const noexcept { return pivot_; }

 private:
  int pivot_;
};

class RankDeficientError : public NumericError {
 public:
  RankDeficientError(const std::string& what, double smallest_pivot)
      : NumericError(what + " (rank deficient, smallest relative pivot " +
                     std::to_string(smallest_pivot) + ")"),
        smallest_pivot_(smallest_pivot) {}
  double smallest_pivot() const noexcept { return smallest_pivot_; }

 private:
  double smallest_pivot_;
};

class SeparationError : public NumericError {
 public:
  explicit SeparationError(const std::string& what) : NumericError(what) {}
};

class ConvergenceError : public NumericError {
 public:
  explicit ConvergenceError(const std::string& what) : NumericError(what) {}
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::numeric: return 4;
  }
  return 1;
}

}  // namespace snmm
