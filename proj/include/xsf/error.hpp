#pragma once

#include <stdexcept>
#include <string>

namespace xsf {

enum class ErrorKind {
  InvalidShape,
  InvalidConfig,
  DegenerateInput,
  InvalidCall,
  InvalidState,
  CorruptCheckpoint,
  CorruptData,
  InvalidDataset,
  Protocol,
  Io,
};

const char* to_string(ErrorKind kind);

// Single exception type for the library; callers dispatch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace xsf
