// Shared utilities: errors, seeded RNG, checksums, byte IO, parallel_for.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ctxdet {

// Thrown for invalid user-supplied configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown for IO/runtime failures (CLI exit code 3).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Internal invariant violation. Aborting the run is the correct outcome;
// these indicate a bug, not bad input.
#define CTXDET_CHECK(cond, msg)                                         \
  do {                                                                  \
    if (!(cond)) throw std::logic_error(std::string("invariant: ") + (msg)); \
  } while (0)

namespace detail {
inline void str_parts(std::ostringstream&) {}
template <typename A, typename... R>
void str_parts(std::ostringstream& os, const A& a, const R&... rest) {
  os << a;
  str_parts(os, rest...);
}
}  // namespace detail

template <typename... Parts>
std::string strcat_(const Parts&... parts) {
  std::ostringstream os;
  detail::str_parts(os, parts...);
  return os.str();
}

// Deterministic RNG. Engine state is fully specified by the standard;
// the sampling helpers below avoid std distributions, whose outputs are
// implementation-defined, so seeded streams are portable.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int64_t uniform_int(int64_t n) {
    CTXDET_CHECK(n > 0, "uniform_int needs n > 0");
    return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Standard normal, Box-Muller.
  double normal() {
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent stream seed (splitmix64 finalizer over seed^stream).
  static uint64_t derive(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 eng_;
};

uint32_t crc32_bytes(const void* data, size_t n, uint32_t seed = 0);

// Runs fn(i) for i in [0, n). With threads <= 1 runs inline. Work items
// must be independent; results may not depend on the thread count.
inline void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  size_t nw = std::min<size_t>(static_cast<size_t>(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(nw);
  std::exception_ptr err;
  std::mutex err_mu;
  for (size_t w = 0; w < nw; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (size_t i = w; i < n; i += nw) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace ctxdet
