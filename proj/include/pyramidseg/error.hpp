#pragma once

#include <stdexcept>
#include <string>

namespace pyseg {

// Numeric values are part of the C API (see c_api.h) and must not be reordered.
enum class ErrorCode : int {
  kOk = 0,
  kShape = 1,
  kConfig = 2,
  kInvalidArgument = 3,
  kLabelRange = 4,
  kIo = 5,
  kNotFound = 6,
  kMalformed = 7,
  kBadMagic = 8,
  kBadVersion = 9,
  kTruncated = 10,
  kDuplicateName = 11,
  kNumeric = 12,
  kState = 13,
  kInternal = 99,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace pyseg
