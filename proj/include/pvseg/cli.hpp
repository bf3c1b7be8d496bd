#pragma once

#include <iosfwd>

namespace pvseg {

enum ExitCode { kExitOk = 0, kExitRuntime = 1, kExitValidation = 2 };

/// Entry point of the `pvseg` command: gen-data, train, eval, serve.
int run_cli(int argc, char** argv);
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace pvseg
