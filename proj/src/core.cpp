#include "pdlds/core.hpp"

#include <cstdlib>

namespace pdlds {

int worker_count_from_env() {
  const char* raw = std::getenv("PDLDS_THREADS");
  if (!raw || !*raw) return 1;
  char* end = nullptr;
  const long n = std::strtol(raw, &end, 10);
  if (*end != '\0' || n < 1) return 1;
  return static_cast<int>(std::min<long>(n, 256));
}

}  // namespace pdlds
