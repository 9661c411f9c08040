#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace trajdiff {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using VecF = Eigen::VectorXf;

// ---------------------------------------------------------------------------
// Errors

enum class Errc {
  invalid_argument,
  non_finite_input,
  dimension_mismatch,
  cannot_place_obstacles,
  empty_dataset,
  too_few_problems,
  missing_file,
  version_mismatch,
  row_count_mismatch,
  shape_mismatch,
  null_condition,
  non_finite_loss,
  io_error,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_argument: return "invalid argument";
    case Errc::non_finite_input: return "non-finite input";
    case Errc::dimension_mismatch: return "dimension mismatch";
    case Errc::cannot_place_obstacles: return "cannot place obstacles";
    case Errc::empty_dataset: return "empty dataset";
    case Errc::too_few_problems: return "too few problems";
    case Errc::missing_file: return "missing file";
    case Errc::version_mismatch: return "version mismatch";
    case Errc::row_count_mismatch: return "row-count mismatch";
    case Errc::shape_mismatch: return "shape mismatch";
    case Errc::null_condition: return "null condition";
    case Errc::non_finite_loss: return "non-finite loss";
    case Errc::io_error: return "io error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail)
      : std::runtime_error(std::string(errc_name(code)) +
                           (detail.empty() ? "" : ": " + detail)),
        code_(code) {}
  explicit Error(Errc code) : Error(code, "") {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

inline void require(bool cond, Errc code, const std::string& detail = "") {
  if (!cond) throw Error(code, detail);
}

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// mt19937_64 has a portable bit stream; the uniform/normal conversions below
// are hand-rolled so draws are identical across standard libraries.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // uniform in [0, 1)
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform01() * static_cast<double>(n)) %
           n;
  }

  // Box-Muller; second value cached so one call consumes one or two draws.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform01();  // (0, 1]
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  Vec normal_vec(Eigen::Index n) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  std::uint64_t raw() { return gen_(); }

  // Derives an independent child stream; used to give parallel work items
  // their own deterministic streams.
  Rng spawn() {
    std::uint64_t s = gen_() ^ 0x9e3779b97f4a7c15ull;
    return Rng(s);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Parallel helpers.
//
// Work is cut into fixed-size chunks keyed by index, so floating-point
// reduction order never depends on the worker count.

inline int& max_threads_ref() {
  static int value = [] {
    if (const char* env = std::getenv("TRAJDIFF_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return value;
}

inline int max_threads() { return max_threads_ref(); }
inline void set_max_threads(int n) { max_threads_ref() = std::max(1, n); }

// fn(begin, end) over [0, n) in chunks; chunk boundaries are independent of
// the number of workers.
template <typename Fn>
void parallel_chunks(std::int64_t n, std::int64_t chunk, Fn&& fn) {
  if (n <= 0) return;
  chunk = std::max<std::int64_t>(1, chunk);
  const std::int64_t n_chunks = (n + chunk - 1) / chunk;
  const int workers =
      static_cast<int>(std::min<std::int64_t>(max_threads(), n_chunks));
  if (workers <= 1) {
    for (std::int64_t c = 0; c < n_chunks; ++c)
      fn(c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  std::atomic<std::int64_t> next{0};
  auto work = [&] {
    for (;;) {
      std::int64_t c = next.fetch_add(1);
      if (c >= n_chunks) return;
      fn(c * chunk, std::min(n, (c + 1) * chunk));
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (int i = 0; i + 1 < workers; ++i) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
}

template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  parallel_chunks(n, 1, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) fn(i);
  });
}

// ---------------------------------------------------------------------------
// Small numeric utilities

inline double clip(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

inline Vec clip(const Vec& v, double lo, double hi) {
  return v.cwiseMax(lo).cwiseMin(hi);
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

// Round every entry to the nearest binary32 value so later float storage is
// an exact round trip.
inline Vec round_to_f32(const Vec& v) {
  Vec out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i)
    out[i] = static_cast<double>(static_cast<float>(v[i]));
  return out;
}

// FNV-1a, used for config/options digests in provenance records.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace trajdiff
