#pragma once

// Command-line entry points: train, eval, infer, protocols, report, synth,
// config. Exit status 0 on success, 2 on usage or configuration errors, 1 on
// runtime failures.

#include <ostream>

namespace flip {

/// Environment variable naming the datasets root (one directory per domain,
/// each holding manifest.csv).
inline constexpr const char* kDataRootEnv = "FLIP_DATA_ROOT";

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace flip
