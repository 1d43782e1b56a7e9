#pragma once

#include <stdexcept>
#include <string>

namespace b2p {

// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised by teacher backends; callers may retry.
class TeacherError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during optimization.
class TrainingAbort : public Error {
 public:
  using Error::Error;
};

}  // namespace b2p
