#pragma once

#include <stdexcept>
#include <string>

namespace xplain {

/// Malformed input: JSONL lines, CSV rows, chat replies that cannot be parsed.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Well-formed input that violates a domain invariant (span bounds, unknown label, ...).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical failure: diverged training, degenerate Jacobian, undefined correlation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace xplain
