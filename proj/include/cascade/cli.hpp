#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cascade::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kValidation = 2;
inline constexpr int kIo = 3;
inline constexpr int kPropertyFailure = 4;

// `args` excludes the program name. Data goes to `out`, diagnostics and error
// JSON to `err`; `in` feeds the serve command.
int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace cascade::cli
