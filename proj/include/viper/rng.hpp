#pragma once

// Seeded random streams.
//
// Seed -> stream mapping (stable across versions):
//   * the 256-bit xoshiro256++ state is filled by four consecutive outputs of
//     SplitMix64 started at `seed`;
//   * uniform01() = (next() >> 11) * 2^-53, in [0, 1);
//   * normal() uses the Box-Muller transform on (u1, u2) = (1 - uniform01(),
//     uniform01()), returning r cos(2 pi u2) first and caching r sin(2 pi u2)
//     for the following call;
//   * fill_normal(out) consumes the same (u1, u2) pairs in the same order as
//     out.size() calls of normal(), cache included; the values agree with
//     normal() to a few ulp (batched log and polynomial sin / cos);
//   * derive_seed(base, stream) = splitmix64(base ^ splitmix64(stream + 1)) names
//     independent sub-streams (per repeat, per method, per purpose).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include <Eigen/Core>

namespace viper {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream + 1));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& word : state_) {
      word = splitmix64(s);
      s += 0x9E3779B97F4A7C15ULL;
    }
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = 1.0 - uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(angle);
    has_cached_ = true;
    return r * std::cos(angle);
  }

  bool bernoulli(double p) { return uniform01() < p; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire's multiply-shift with rejection.
    std::uint64_t x = next();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = -n % n;
      while (low < threshold) {
        x = next();
        m = static_cast<__uint128_t>(x) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  /// Fills a matrix column-major with standard normals.
  void fill_normal(Eigen::Ref<Eigen::MatrixXd> out) {
    if (out.innerStride() != 1 || out.outerStride() != out.rows()) {
      for (Eigen::Index j = 0; j < out.cols(); ++j)
        for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, j) = normal();
      return;
    }
    double* data = out.data();
    const Eigen::Index size = out.size();
    Eigen::Index k = 0;
    if (k < size && has_cached_) {
      data[k++] = normal();
    }
    // Every pair goes through the packet path (chunks padded to whole packets),
    // so a value does not depend on where it falls in the matrix.
    constexpr Eigen::Index kChunk = 512;  // pairs per batch
    constexpr Eigen::Index kPad = 16;
    Eigen::ArrayXd u1(kChunk), u2(kChunk), r(kChunk), c(kChunk), sn(kChunk);
    while (k < size) {
      const Eigen::Index m = std::min(kChunk, (size - k + 1) / 2);
      const Eigen::Index mp = std::min(kChunk, (m + kPad - 1) / kPad * kPad);
      for (Eigen::Index i = 0; i < m; ++i) {
        u1[i] = 1.0 - uniform01();
        u2[i] = uniform01();
      }
      u1.segment(m, mp - m).setConstant(0.5);
      u2.segment(m, mp - m).setConstant(0.5);
      r.head(mp) = (-2.0 * u1.head(mp).log()).sqrt();
      sincos_turns(u2.head(mp), c.head(mp), sn.head(mp));
      const Eigen::Index full = std::min(m, (size - k) / 2);
      Eigen::Map<Eigen::ArrayXd, 0, Eigen::InnerStride<2>>(data + k, full) = r.head(full) * c.head(full);
      Eigen::Map<Eigen::ArrayXd, 0, Eigen::InnerStride<2>>(data + k + 1, full) = r.head(full) * sn.head(full);
      k += 2 * full;
      if (full < m) {  // odd tail: keep the sine for the next draw, as normal() does
        data[k++] = r[full] * c[full];
        cached_ = r[full] * sn[full];
        has_cached_ = true;
      }
    }
  }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  /// k distinct indices from [0, n) in draw order (partial Fisher-Yates).
  std::vector<Eigen::Index> sample_without_replacement(Eigen::Index n, Eigen::Index k) {
    std::vector<Eigen::Index> pool(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    for (Eigen::Index i = 0; i < k; ++i) {
      const auto j = i + static_cast<Eigen::Index>(below(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    pool.resize(static_cast<std::size_t>(k));
    return pool;
  }

 private:
  // cos and sin of 2 pi u, u in [0, 1): reduce to t in [-pi/4, pi/4] around the
  // nearest quarter turn, Taylor polynomials there (truncation < 1e-17), then
  // rotate by the quarter turn. Written branch-free so Eigen vectorizes it; the
  // blends odd * a + (1 - odd) * b are exact for odd in {0, 1}.
  template <class In, class Out>
  static void sincos_turns(const In& u, Out&& c, Out&& s) {
    const Eigen::ArrayXd q = (4.0 * u).round();
    const Eigen::ArrayXd t = 2.0 * std::numbers::pi * (u - 0.25 * q);
    const Eigen::ArrayXd t2 = t * t;
    const Eigen::ArrayXd sp =
        t * (1.0 + t2 * (-1.0 / 6 + t2 * (1.0 / 120 + t2 * (-1.0 / 5040 + t2 * (1.0 / 362880 + t2 * (-1.0 / 39916800 +
        t2 * (1.0 / 6227020800.0 + t2 * (-1.0 / 1307674368000.0 + t2 * (1.0 / 355687428096000.0)))))))));
    const Eigen::ArrayXd cp =
        1.0 + t2 * (-0.5 + t2 * (1.0 / 24 + t2 * (-1.0 / 720 + t2 * (1.0 / 40320 + t2 * (-1.0 / 3628800 +
        t2 * (1.0 / 479001600.0 + t2 * (-1.0 / 87178291200.0 + t2 * (1.0 / 20922789888000.0))))))));
    const Eigen::ArrayXd k = q - 4.0 * (0.25 * q).floor();  // quarter turns mod 4
    const Eigen::ArrayXd hi = (0.5 * k).floor();
    const Eigen::ArrayXd odd = k - 2.0 * hi;
    c = (1.0 - 2.0 * (odd + hi - 2.0 * odd * hi)) * (odd * sp + (1.0 - odd) * cp);
    s = (1.0 - 2.0 * hi) * (odd * cp + (1.0 - odd) * sp);
  }

  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t state_[4]{};
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace viper
