#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace odeforge::cli {

// Exit codes: 0 success, 1 domain or validation error, 2 usage error.
inline constexpr int kOk = 0;
inline constexpr int kDomainError = 1;
inline constexpr int kUsageError = 2;

// `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace odeforge::cli
