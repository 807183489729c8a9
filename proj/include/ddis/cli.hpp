#pragma once

#include <functional>
#include <string>
#include <vector>

namespace ddis {

/// Exit codes: 0 success, 1 usage or input error, 2 numeric failure.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

/// Runs `fn` for 0..n-1 on up to `jobs` threads.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace ddis
