#pragma once

#include <stdexcept>
#include <string>

namespace bq2 {

// Every failure raised by the toolkit derives from Error. The CLI maps
// ConfigError (and its subclasses) to exit code 2, everything else to 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NotPsdError : public Error {
 public:
  using Error::Error;
};

// Raised by cayley_step when (I - lr/2 A) is numerically singular; the
// caller is expected to halve the learning rate and retry.
class StepSizeError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class RotationError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class QuantizationError : public Error {
 public:
  using Error::Error;
};

class ManifestError : public Error {
 public:
  using Error::Error;
};

class TaskFormatError : public Error {
 public:
  using Error::Error;
};

class ReportError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace bq2
