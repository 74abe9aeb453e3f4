#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace psinet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf showed up where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid layer, mapping, partition or experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An operation was invoked in a state that does not permit it.
class StateError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward() on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Parameter sets that must line up by name/shape do not.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

/// A neuron permutation would change the network function.
class InvarianceError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary input. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace psinet
