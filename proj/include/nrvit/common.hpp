#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace nrvit {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using index_t = Eigen::Index;

// All precondition violations surface as invalid_argument with a message that
// names the offending quantity.
#define NRVIT_CHECK(cond, msg)                          \
  do {                                                  \
    if (!(cond)) throw std::invalid_argument(msg);      \
  } while (0)

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a tag, so every
// consumer (init, per-epoch shuffle, per-step dropout, ...) has its own
// reproducible stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  return splitmix64(base ^ splitmix64(tag));
}

// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64 so
// the byte stream does not depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  long uniform_int(long n) {
    NRVIT_CHECK(n > 0, "uniform_int: n must be positive");
    return static_cast<long>(next_u64() % static_cast<std::uint64_t>(n));
  }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename Container>
  void shuffle(Container& v) {
    for (long i = static_cast<long>(v.size()) - 1; i > 0; --i) {
      long j = uniform_int(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace nrvit
