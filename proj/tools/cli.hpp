#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace xsf::cli {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kConfig = 3,
  kMissingInput = 4,
  kCorruptInput = 5,
  kPipeline = 6,
  kWriteFailure = 7,
};

struct ExitCodeDoc {
  int code;
  const char* meaning;
};

// Every code run_command can return, as listed in the help text.
const std::vector<ExitCodeDoc>& exit_codes();
const std::vector<std::string>& commands();

// Diagnostics go to `err` as a single line; progress to `out`.
int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace xsf::cli
