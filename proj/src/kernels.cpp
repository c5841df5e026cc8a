#include "lagdiff/kernels.hpp"

#include <cstdlib>
#include <string>

#include "lagdiff/errors.hpp"

namespace lagdiff::kernels {

namespace {

const Backend& select() {
  const char* env = std::getenv("LAGDIFF_KERNELS");
  std::string want = env ? env : "auto";
  if (want == "scalar") return scalar_backend();
  if (want == "avx2") {
    const Backend* b = avx2_backend();
    if (!b) throw ConfigError("LAGDIFF_KERNELS=avx2 but this CPU has no AVX2");
    return *b;
  }
  if (want != "auto") throw ConfigError("unknown LAGDIFF_KERNELS value: " + want);
  const Backend* b = avx2_backend();
  return b ? *b : scalar_backend();
}

}  // namespace

const Backend& active() {
  static const Backend& b = select();
  return b;
}

}  // namespace lagdiff::kernels
