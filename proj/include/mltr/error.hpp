#pragma once

#include <stdexcept>
#include <string>

namespace mltr {

// Base of every error raised by the library. Subclasses name the failure
// category so callers (the CLI in particular) can map them to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CorruptFileError : public Error {
 public:
  using Error::Error;
};

// Checkpoint tensors do not match the model they are loaded into.
class CheckpointMismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace mltr

#define MLTR_CHECK(cond, ErrT, msg)  \
  do {                               \
    if (!(cond)) throw ErrT(msg);    \
  } while (0)
