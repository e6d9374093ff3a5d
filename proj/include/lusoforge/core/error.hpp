#pragma once

#include <stdexcept>
#include <string>

namespace lusoforge {

/// Base class for every error raised by the library.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operator.
class shape_error : public error {
 public:
  using error::error;
};

/// A caller broke an operation's precondition.
class contract_error : public error {
 public:
  using error::error;
};

/// Malformed, missing or degenerate input data.
class data_error : public error {
 public:
  using error::error;
};

/// NaN/inf during optimisation; training cannot continue.
class numerical_error : public error {
 public:
  using error::error;
};

}  // namespace lusoforge
