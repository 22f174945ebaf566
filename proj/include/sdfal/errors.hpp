#pragma once

#include <stdexcept>
#include <string>

namespace sdfal {

// Base of every library error. The CLI maps UsageError to exit code 1 and
// everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller violated a precondition (bad argument, wrong tape, non-unit latent).
class UsageError : public Error {
 public:
  using Error::Error;
};

// A computation produced or received a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Input data is malformed (file schema, missing fields, bad values).
class DataError : public Error {
 public:
  using Error::Error;
};

// No surface points survived the narrow-band filter.
class DegenerateShapeError : public Error {
 public:
  using Error::Error;
};

// Point configuration is collinear or otherwise rank deficient.
class RankError : public Error {
 public:
  using Error::Error;
};

class InsufficientCorrespondencesError : public Error {
 public:
  using Error::Error;
};

class InitializationError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace sdfal
