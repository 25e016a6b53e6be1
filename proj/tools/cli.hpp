// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>

namespace qelab {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

// Runs one subcommand. Diagnostics go to `err`, reports to `out`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace qelab
