#pragma once

#include <stdexcept>
#include <string>

namespace ragdiff {

// Process exit codes used by the CLI; library code throws, tools map to codes.
enum ExitCode : int {
    kOk = 0,
    kUsageError = 2,    // bad flags, bad config keys, violated preconditions
    kMissingInput = 3,  // file or directory not found
    kVersionError = 4,  // artifact magic/version mismatch
    kDataError = 5,     // unreadable/inconsistent data, numeric divergence
};

class Error : public std::runtime_error {
  public:
    Error(int code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    int code() const { return code_; }

  private:
    int code_;
};

[[noreturn]] inline void raise_usage(const std::string& msg) { throw Error(kUsageError, msg); }
[[noreturn]] inline void raise_missing(const std::string& msg) { throw Error(kMissingInput, msg); }
[[noreturn]] inline void raise_version(const std::string& msg) { throw Error(kVersionError, msg); }
[[noreturn]] inline void raise_data(const std::string& msg) { throw Error(kDataError, msg); }

inline void require(bool cond, int code, const std::string& msg) {
    if (!cond) throw Error(code, msg);
}

}  // namespace ragdiff
