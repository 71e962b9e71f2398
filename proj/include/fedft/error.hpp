#pragma once

#include <stdexcept>
#include <string>

namespace fedft {

/// Malformed or inconsistent input data (CSV, containers, matrix shapes).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Model shape, parameter blob or cache inconsistencies.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Wire-level framing violations.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Carrier failures: refused/reset connections, closed endpoints, timeouts.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fedft
