#ifndef PDINTERP_ERROR_H_
#define PDINTERP_ERROR_H_

#include <stdexcept>
#include <string>

namespace pdinterp {

// Raised when tensor extents, channel counts or file layouts disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised for invalid arguments or configuration values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised for malformed or truncated files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a computation produces non-finite values or a singular system.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a pipeline stage is invoked before its inputs exist.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pdinterp

#endif  // PDINTERP_ERROR_H_
