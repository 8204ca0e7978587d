#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "kepil/cli/run_config.hpp"

namespace kepil::cli {

// Exit codes of dispatch().
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;     // runtime failure (bad config, io, divergence, ...)
inline constexpr int kExitUsage = 2;     // bad command line
inline constexpr int kExitMismatch = 3;  // --verify found different outputs, or gradcheck failed

// Runs one subcommand: gen-data, train, eval, robustness, ablate, gradcheck.
// args excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// What to do when the output directory already holds a run.
enum class ExistingOutput { Refuse, Verify, Force };

// Files a command produces, by name relative to its output directory.
using Artifacts = std::map<std::string, std::string>;

// run.txt: command, seeds, config checksum, one checksum per artifact.
std::string manifest_text(const std::string& command, const RunConfig& config, const Artifacts& artifacts);

// Writes the artifacts plus run.txt into dir. Refuse: error when dir already
// has a run.txt. Verify: nothing is written; returns false when the existing
// manifest differs from the new one. Force: overwrites.
bool commit_outputs(const std::filesystem::path& dir, const std::string& command, const RunConfig& config,
                    const Artifacts& artifacts, ExistingOutput mode);

// Gradient check of the full training objective (L_cls + L_ic + L_sc, fixed
// dropout seeds) on the first `batch` training samples of the config's
// dataset. Returns the max relative error.
double objective_grad_check(const RunConfig& config, std::size_t batch = 4);

// Small model and images used by the gradcheck subcommand's default config.
RunConfig toy_config();

} // namespace kepil::cli
