#pragma once

#include <stdexcept>
#include <string>

namespace tense {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes, optionally tied to a graph node.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what, long node = -1)
      : Error(node >= 0 ? "node " + std::to_string(node) + ": " + what : what), node_(node) {}
  long node() const { return node_; }

 private:
  long node_;
};

/// An operation produced NaN or infinity.
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& what, long node = -1)
      : Error(node >= 0 ? "node " + std::to_string(node) + ": " + what : what), node_(node) {}
  long node() const { return node_; }

 private:
  long node_;
};

/// Malformed or unreadable file. `field` names the offending header field or entry.
class FormatError : public Error {
 public:
  FormatError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// A precondition on arguments was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace tense
