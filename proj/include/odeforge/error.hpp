#pragma once

#include <stdexcept>
#include <string>

namespace odeforge {

// Base for every domain error raised by the library. The CLI maps these to
// exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset, std::string field)
      : Error(what + " (field '" + field + "' at byte " + std::to_string(offset) + ")"),
        offset_(offset),
        field_(std::move(field)) {}

  std::size_t offset() const { return offset_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t offset_;
  std::string field_;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace odeforge
