#include "convsst/runtime.hpp"

#include <Eigen/Core>
#include <charconv>
#include <cstdlib>
#include <cstring>

#include "convsst/error.hpp"

namespace convsst {

int configure_threads() {
  if (const char* env = std::getenv("CONVSST_THREADS"); env && *env) {
    int n = 0;
    const char* end = env + std::strlen(env);
    auto [ptr, ec] = std::from_chars(env, end, n);
    if (ec != std::errc() || ptr != end || n < 1) {
      throw Error(std::string("CONVSST_THREADS must be a positive integer, got \"") + env + "\"");
    }
    Eigen::setNbThreads(n);
  }
  return Eigen::nbThreads();
}

}  // namespace convsst
