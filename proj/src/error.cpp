#include "xsf/error.hpp"

namespace xsf {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidShape: return "invalid-shape";
    case ErrorKind::InvalidConfig: return "invalid-config";
    case ErrorKind::DegenerateInput: return "degenerate-input";
    case ErrorKind::InvalidCall: return "invalid-call";
    case ErrorKind::InvalidState: return "invalid-state";
    case ErrorKind::CorruptCheckpoint: return "corrupt-checkpoint";
    case ErrorKind::CorruptData: return "corrupt-data";
    case ErrorKind::InvalidDataset: return "invalid-dataset";
    case ErrorKind::Protocol: return "protocol";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

}  // namespace xsf
