#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace groundgen {

// Raised when tensor shapes do not agree.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A NaN or Inf appeared in the output of an op.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration value or combination.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input to an op or model call (bad mask, empty source, ...).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VocabularyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed corpus record. Carries the 1-based line number.
class DataError : public std::runtime_error {
 public:
  DataError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace groundgen
