#pragma once

#include <stdexcept>
#include <string>

namespace mbl {

// Base for all library-specific failures. Argument and domain violations use
// std::invalid_argument / std::domain_error directly.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Requested problem size exceeds what the representation supports.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// A numerical procedure produced values it cannot continue from
// (non-finite data, invalid covariance, unbracketable root).
class NumericError : public Error {
 public:
  using Error::Error;
};

// An iterative solver exhausted its budget without reaching tolerance.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

// A fit was asked for with fewer points than the model needs.
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

// A regression design matrix is rank deficient (e.g. all abscissae equal).
class RankError : public Error {
 public:
  using Error::Error;
};

// An experiment description failed validation before any compute started.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A text input could not be parsed; carries file and line context.
class ParseError : public Error {
 public:
  ParseError(const std::string& file, long line, const std::string& what)
      : Error(file + ":" + std::to_string(line) + ": " + what),
        file_(file),
        line_(line) {}

  const std::string& file() const noexcept { return file_; }
  long line() const noexcept { return line_; }

 private:
  std::string file_;
  long line_;
};

// Spectrum contains spacings too small for gap-ratio statistics.
class DegenerateSpectrumError : public Error {
 public:
  DegenerateSpectrumError(const std::string& what, std::size_t i, std::size_t j)
      : Error(what), index_a_(i), index_b_(j) {}

  std::size_t index_a() const noexcept { return index_a_; }
  std::size_t index_b() const noexcept { return index_b_; }

 private:
  std::size_t index_a_;
  std::size_t index_b_;
};

}  // namespace mbl
