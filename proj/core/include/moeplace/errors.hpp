// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace moeplace {

/// Base class for all library errors.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Malformed input while reading a trace, placement, model or config file.
/// Carries the 1-based line number of the offending line.
class ParseError : public Error {
  public:
    ParseError(std::size_t line, const std::string &what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

  private:
    std::size_t line_;
};

/// Well-formed input that violates a domain invariant (expert id out of
/// range, zero activation vector, inconsistent token counts, ...).
class ValidationError : public Error {
  public:
    using Error::Error;
};

/// Invalid run configuration (non-divisible group sizes, top_k > E, ...).
class ConfigError : public Error {
  public:
    using Error::Error;
};

/// A filter matched no records (e.g. no decode records at a layer).
class EmptySelectionError : public Error {
  public:
    using Error::Error;
};

/// Pearson correlation of a constant vector. Callers that build matrices
/// catch this and record a missing value instead of fabricating a zero.
class UndefinedCorrelationError : public Error {
  public:
    using Error::Error;
};

/// A combinatorial requirement cannot be met (K > R, M > E, ...).
class InfeasibleError : public Error {
  public:
    using Error::Error;
};

/// A keyed lookup failed (unknown request id, unknown strategy label).
class LookupError : public Error {
  public:
    using Error::Error;
};

} // namespace moeplace
