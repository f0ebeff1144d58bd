#ifndef GLOSS_ERRORS_HPP
#define GLOSS_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace gloss {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operation requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An operation was called out of order or with arguments outside its contract.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input lies outside the domain of a function (e.g. a vanishing norm).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf showed up where finite values are required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent files on disk.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Architecture string could not be parsed. Token and argument indices are
/// 1-based; an argument index of 0 means the token as a whole.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, int token, int argument)
      : Error(what), token_(token), argument_(argument) {}

  int token() const noexcept { return token_; }
  int argument() const noexcept { return argument_; }

 private:
  int token_;
  int argument_;
};

}  // namespace gloss

#endif  // GLOSS_ERRORS_HPP
