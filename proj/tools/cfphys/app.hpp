// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace cfphys::app {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitPrereq = 3;
inline constexpr int kExitNumeric = 4;

/// Runs the command line (args excludes the program name) and returns the
/// process exit code. Errors are reported on stderr.
int run(const std::vector<std::string>& args);

const char* version();

} // namespace cfphys::app
