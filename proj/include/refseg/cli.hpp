#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace refseg {

/// Subcommands: train, infer, eval, gradcheck, synth. Returns 0 on success,
/// 1 on a usage error (after printing usage) and 2 on a runtime error.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_main(int argc, char** argv);

}  // namespace refseg
