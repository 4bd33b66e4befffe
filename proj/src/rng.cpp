#include "avw2/rng.h"

#include <cmath>
#include <numbers>

#include "avw2/error.h"

namespace avw2 {

namespace {
std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
} // namespace

const char* errorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape:
      return "shape";
    case ErrorKind::Domain:
      return "domain";
    case ErrorKind::Numeric:
      return "numeric";
    case ErrorKind::Infeasible:
      return "infeasible";
    case ErrorKind::Data:
      return "data";
    case ErrorKind::Io:
      return "io";
    case ErrorKind::Usage:
      return "usage";
  }
  return "unknown";
}

std::uint64_t deriveSeed(std::uint64_t base, std::uint64_t a, std::uint64_t b,
                         std::uint64_t c) {
  std::uint64_t h = splitmix(base);
  h = splitmix(h ^ a);
  h = splitmix(h ^ b);
  return splitmix(h ^ c);
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) {
    fail(ErrorKind::Domain, "Rng::below: empty range");
  }
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (hasSpare_) {
    hasSpare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  hasSpare_ = true;
  return r * std::cos(theta);
}

} // namespace avw2
