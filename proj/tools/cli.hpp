#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace storylab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

/// Runs one subcommand. `args` excludes the program name. Returns 0 on
/// success, 1 on a usage error (help text goes to `err`), 2 on a runtime
/// failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Directory that "{data}" in config values expands to: $STORYLAB_DATA_DIR
/// when set, else the data/ directory of the source tree.
std::filesystem::path data_dir();

}  // namespace storylab::cli
