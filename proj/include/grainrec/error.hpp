// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace grainrec {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class GroupingError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class CorpusError : public Error { using Error::Error; };
class InputError : public Error { using Error::Error; };
class StateError : public Error { using Error::Error; };
class KeyError : public Error { using Error::Error; };
class CompatibilityError : public Error { using Error::Error; };
class ProtocolError : public Error { using Error::Error; };
class EvaluationError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };

}  // namespace grainrec
