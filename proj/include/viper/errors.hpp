#pragma once

#include <stdexcept>
#include <string>

namespace viper {

/// Base of every exception thrown by the library.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes of vectors or matrices do not agree.
class dimension_error : public error {
 public:
  using error::error;
};

/// Non-SPD matrices, singular systems, non-finite objectives.
class numerical_error : public error {
 public:
  using error::error;
};

/// A finite mathematical result does not fit in a double.
class overflow_error : public numerical_error {
 public:
  using numerical_error::numerical_error;
};

/// Malformed or inconsistent input data (files, label sets).
class data_error : public error {
 public:
  using error::error;
};

/// Invalid configuration or argument values.
class config_error : public error {
 public:
  using error::error;
};

}  // namespace viper
