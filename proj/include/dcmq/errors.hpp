#pragma once

#include <stdexcept>
#include <string>

namespace dcmq {

// Root of every error the library throws. Each subclass maps onto one CLI
// exit-code family (see tools/dcmq.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class NumericInputError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

// Rows of the aligned training inputs disagree.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

// A file could not be opened, read, or written.
class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class UnsupportedFormatError : public FormatError {
 public:
  using FormatError::FormatError;
};

class CorruptFileError : public FormatError {
 public:
  CorruptFileError(const std::string& what, std::size_t offset)
      : FormatError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int epoch, int batch)
      : Error(what + " (epoch " + std::to_string(epoch) + ", batch " +
              std::to_string(batch) + ")"),
        epoch_(epoch),
        batch_(batch) {}

  int epoch() const noexcept { return epoch_; }
  int batch() const noexcept { return batch_; }

 private:
  int epoch_;
  int batch_;
};

}  // namespace dcmq
