#pragma once

namespace dexmoe {

// Full command-line surface. Exit codes: 0 success, 1 runtime failure,
// 2 bad flags or invalid config.
int cli_main(int argc, const char* const* argv);

}  // namespace dexmoe
