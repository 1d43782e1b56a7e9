#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace b2p {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;   // configuration or input error
inline constexpr int kExitTeacher = 2;  // pseudo-labelling had failures
inline constexpr int kExitAbort = 3;    // training aborted on a non-finite loss

// Entry point behind the b2p binary; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace b2p
