#pragma once

// Dense-vector kernels shared by every other module.
//
// Values are held as double. Files on disk store 32-bit floats; everything is
// promoted on load so reductions and gradients run in 64-bit.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include "dcmq/errors.hpp"

namespace dcmq {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Deterministic random source.
///
/// Engine: std::mt19937_64, whose output sequence is fixed by the C++
/// standard. Distributions are implemented here instead of using the
/// <random> distribution classes, whose algorithms are implementation-defined,
/// so a seed yields the same stream on every platform and toolchain:
///   uniform()  = (next_u64() >> 11) * 2^-53, in [0, 1)
///   normal()   = Box-Muller on two uniforms, cosine branch only
///   below(n)   = rejection sampling on the top bits, in [0, n)
///   gumbel()   = -ln(-ln(u)), u clamped to [1e-12, 1 - 1e-12]
class SeededRng {
 public:
  static constexpr double kGumbelEps = 1e-12;

  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    // 1 - u lies in (0, 1], keeping the log finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ParameterError("SeededRng::below: n must be positive");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  double gumbel() {
    double u = uniform();
    u = std::clamp(u, kGumbelEps, 1.0 - kGumbelEps);
    return -std::log(-std::log(u));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// splitmix64 finalizer, used to derive independent sub-stream seeds.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& values, const char* what) {
  if (!values.derived().allFinite()) {
    throw NumericInputError(std::string(what) + ": non-finite entry");
  }
}

/// Unit-norm copy of v. The all-zero vector maps to itself.
inline Vector l2_normalize(const Vector& v) {
  require_finite(v, "l2_normalize");
  // Scale by the max-abs entry first so tiny (denormal-range) inputs do not
  // underflow when squared.
  const double scale = v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
  if (scale == 0.0) return Vector::Zero(v.size());
  const Vector scaled = v / scale;
  return scaled / scaled.norm();
}

/// Row-wise l2_normalize.
inline Matrix l2_normalize_rows(const Matrix& m) {
  require_finite(m, "l2_normalize_rows");
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    out.row(r) = l2_normalize(m.row(r).transpose()).transpose();
  }
  return out;
}

/// Cosine of two equal-length vectors; 0 when either is all-zero.
template <typename A, typename B>
double cosine(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

/// (i, j) = cosine(row i of a, row j of b).
inline Matrix cosine_sim_matrix(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("cosine_sim_matrix: column counts differ (" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.cols()) + ")");
  }
  const Matrix an = l2_normalize_rows(a);
  const Matrix bn = l2_normalize_rows(b);
  Matrix out = an * bn.transpose();
  return out.cwiseMax(-1.0).cwiseMin(1.0);
}

/// softmax(logits / tau), max-subtracted.
inline Vector softmax_temp(const Vector& logits, double tau) {
  if (!(tau > 0.0)) throw ParameterError("softmax_temp: temperature must be positive");
  require_finite(logits, "softmax_temp");
  if (logits.size() == 0) return Vector();
  const double peak = logits.maxCoeff();
  Vector e(logits.size());
  double sum = 0.0;
  for (Eigen::Index k = 0; k < logits.size(); ++k) {
    e[k] = std::exp((logits[k] - peak) / tau);
    sum += e[k];
  }
  return e / sum;
}

struct GumbelSample {
  Vector probs;
  Vector noise;
};

/// softmax_temp(logits + noise, tau) with caller-supplied noise.
inline Vector gumbel_softmax_with_noise(const Vector& logits, const Vector& noise, double tau) {
  if (logits.size() != noise.size()) throw ShapeError("gumbel_softmax: noise length mismatch");
  return softmax_temp(logits + noise, tau);
}

/// Draws K standard-Gumbel values from rng and returns the tempered softmax of
/// the perturbed logits together with the noise that was used.
inline GumbelSample gumbel_softmax(const Vector& logits, double tau, SeededRng& rng) {
  if (!(tau > 0.0)) throw ParameterError("gumbel_softmax: temperature must be positive");
  Vector noise(logits.size());
  for (Eigen::Index k = 0; k < noise.size(); ++k) noise[k] = rng.gumbel();
  Vector probs = gumbel_softmax_with_noise(logits, noise, tau);
  return {std::move(probs), std::move(noise)};
}

}  // namespace dcmq
