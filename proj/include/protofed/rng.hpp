#pragma once

#include "protofed/types.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace protofed {

// All randomness flows through named streams derived from the master seed.
// Distributions are implemented by hand (Box-Muller, rejection sampling) so
// that identical seeds give identical draws on every standard library.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  // Derives an independent stream from (master, name, a, b, c).
  static RngStream derive(std::uint64_t master, std::string_view name,
                          std::int64_t a = 0, std::int64_t b = 0,
                          std::int64_t c = 0) {
    std::uint64_t h = fnv1a(name);
    h = splitmix(h ^ splitmix(master));
    h = splitmix(h ^ static_cast<std::uint64_t>(a) * 0x9e3779b97f4a7c15ULL);
    h = splitmix(h ^ static_cast<std::uint64_t>(b) * 0xbf58476d1ce4e5b9ULL);
    h = splitmix(h ^ static_cast<std::uint64_t>(c) * 0x94d049bb133111ebULL);
    log::debug("rng stream " + std::string(name) + "/" + std::to_string(a) +
               "/" + std::to_string(b) + "/" + std::to_string(c));
    return RngStream(h);
  }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (cached spare).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n) by rejection.
  std::uint64_t uniform_index(std::uint64_t n) {
    require_arg(n > 0, "uniform_index: n must be positive");
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  Vector gaussian_vector(int n, double stddev = 1.0) {
    Vector v(n);
    for (int i = 0; i < n; ++i) v[i] = stddev * normal();
    return v;
  }

  Matrix gaussian_matrix(int rows, int cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m(r, c) = stddev * normal();
    return m;
  }

  Vector unit_vector(int n) {
    Vector v = gaussian_vector(n);
    double nrm = v.norm();
    while (nrm < 1e-12) {
      v = gaussian_vector(n);
      nrm = v.norm();
    }
    return v / nrm;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // First k of a seeded permutation of [0, n); uniform without replacement.
  std::vector<int> sample_without_replacement(int n, int k) {
    require_arg(k >= 0 && k <= n, "sample_without_replacement: bad k");
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    shuffle(idx);
    idx.resize(k);
    return idx;
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char ch : s) {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace protofed
