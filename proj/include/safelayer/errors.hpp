#pragma once

#include <stdexcept>
#include <string>

namespace safelayer {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// qp
class SingularKkt : public Error { using Error::Error; };
class NumericalBlowup : public Error { using Error::Error; };
class ShapeMismatch : public Error { using Error::Error; };
class DegenerateActiveSet : public Error { using Error::Error; };
class InvalidProblem : public Error { using Error::Error; };

// constraints
class BadLimits : public Error { using Error::Error; };
class BadThresholds : public Error { using Error::Error; };
class LayoutError : public Error { using Error::Error; };

// env
class SamplingExhausted : public Error { using Error::Error; };
class NonFiniteAction : public Error { using Error::Error; };

// learning
class NonFiniteGradient : public Error { using Error::Error; };
class InfeasibleQp : public Error { using Error::Error; };

// experiment tooling
class ConfigError : public Error { using Error::Error; };
class MissingData : public Error { using Error::Error; };

}  // namespace safelayer
