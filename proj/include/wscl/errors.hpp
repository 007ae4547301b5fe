#pragma once

#include <iostream>
#include <stdexcept>
#include <string>

namespace wscl {

// Invalid configuration, shape mismatch or out-of-range hyperparameter.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// API called out of order (backward before forward, overwriting a metrics row).
class UsageError : public std::logic_error {
 public:
  explicit UsageError(const std::string& what) : std::logic_error(what) {}
};

// A loss or gradient stopped being finite; the run must abort.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline bool& warnings_enabled() {
  static bool enabled = true;
  return enabled;
}
inline int& warning_count() {
  static thread_local int count = 0;
  return count;
}
}  // namespace detail

inline void set_warnings_enabled(bool on) { detail::warnings_enabled() = on; }
inline int warnings_emitted() { return detail::warning_count(); }

inline void warn(const std::string& msg) {
  ++detail::warning_count();
  if (detail::warnings_enabled()) std::clog << "[wscl] warning: " << msg << '\n';
}

}  // namespace wscl
