#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace avw2 {

// Exit codes.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

// Entry point of the `avw2` tool; args excludes the program name.
int runCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace avw2
