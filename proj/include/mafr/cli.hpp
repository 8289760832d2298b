#pragma once

namespace mafr::cli {

// Entry point shared by the binary and the tests. Returns the process exit
// code: 0 success, 1 usage/config error, 2 data/format error, 3 numerical
// failure.
int run(int argc, const char* const* argv);

} // namespace mafr::cli
