#ifndef TWINS_ERROR_HPP
#define TWINS_ERROR_HPP

#include <stdexcept>
#include <string>

namespace twins {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller handed us something outside an operation's precondition
// (shape mismatch, odd TWINS batch, out-of-range label, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class IdxError : public Error {
 public:
  enum class Kind { Io, BadMagic, Truncated, CountMismatch };
  IdxError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

class CheckpointError : public Error {
 public:
  enum class Kind { Io, BadMagic, BadVersion, BadHeader, OutOfBounds, DtypeMismatch, MissingTensor };
  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace twins

#endif  // TWINS_ERROR_HPP
