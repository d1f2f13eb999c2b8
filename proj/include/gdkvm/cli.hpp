#pragma once

#include <string>
#include <vector>

namespace gdkvm {

// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure
// (including a failed gradient check or equivalence check).
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// args excludes the program name.
int dispatch(const std::vector<std::string>& args);
int dispatch(int argc, char** argv);

}  // namespace gdkvm
