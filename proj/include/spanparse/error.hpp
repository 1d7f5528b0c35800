#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace spanparse {

// Every error carries a short code naming the failure (e.g. "UnbalancedBrackets").
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

// Malformed input data (treebanks, vector files, checkpoints, config files).
class FormatError : public Error {
 public:
  FormatError(std::string code, const std::string& message, std::size_t line = 0,
              std::size_t column = 0)
      : Error(std::move(code), line ? message + " (line " + std::to_string(line) +
                                          ", column " + std::to_string(column) + ")"
                                    : message),
        line_(line),
        column_(column) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

class ShapeMismatch : public Error {
 public:
  ShapeMismatch(const std::string& op, const std::string& got, const std::string& expected)
      : Error("ShapeMismatch", op + ": got " + got + ", expected " + expected) {}
};

// Non-finite losses and similar numerical failures.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace spanparse
