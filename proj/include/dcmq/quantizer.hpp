#pragma once

// Product-quantization codebooks shared by both modalities.
//
// Training uses the soft quantizer (a softmax attention over codewords plus a
// lambda-weighted Gumbel-softmax attention); indexing uses the hard nearest
// codeword and packs the M indices into a compact bit string.

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dcmq/numerics.hpp"

namespace dcmq {

/// Number of bits one sub-index occupies; K must be a power of two.
inline int bits_per_index(std::uint32_t codewords) {
  if (codewords == 0 || !std::has_single_bit(codewords)) {
    throw ParameterError("codewords per book must be a power of two, got " +
                         std::to_string(codewords));
  }
  return std::countr_zero(codewords);
}

/// Bytes in a packed code: ceil(M * log2(K) / 8).
inline std::size_t code_bytes(std::uint32_t books, std::uint32_t codewords) {
  const std::size_t bits = static_cast<std::size_t>(books) * bits_per_index(codewords);
  return (bits + 7) / 8;
}

/// M books of K codewords, each codeword a (D/M)-dim sub-vector.
class Codebooks {
 public:
  Codebooks() = default;

  Codebooks(std::uint32_t books, std::uint32_t codewords, std::uint32_t sub_dim)
      : books_(books), codewords_(codewords), sub_dim_(sub_dim),
        words_(Matrix::Zero(static_cast<Eigen::Index>(books) * codewords, sub_dim)) {
    if (books == 0 || sub_dim == 0) throw ParameterError("Codebooks: M and d must be positive");
    bits_per_index(codewords);
  }

  Codebooks(std::uint32_t books, std::uint32_t codewords, Matrix words)
      : Codebooks(books, codewords, static_cast<std::uint32_t>(words.cols())) {
    if (words.rows() != words_.rows()) throw ShapeError("Codebooks: expected M*K codeword rows");
    require_finite(words, "Codebooks");
    words_ = std::move(words);
  }

  std::uint32_t books() const noexcept { return books_; }
  std::uint32_t codewords() const noexcept { return codewords_; }
  std::uint32_t sub_dim() const noexcept { return sub_dim_; }
  std::uint32_t dim() const noexcept { return books_ * sub_dim_; }

  /// Row (m*K + k) holds codeword k of book m.
  const Matrix& words() const noexcept { return words_; }
  Matrix& words() noexcept { return words_; }

  auto codeword(std::uint32_t book, std::uint32_t k) const {
    return words_.row(static_cast<Eigen::Index>(book) * codewords_ + k);
  }
  auto book(std::uint32_t m) const {
    return words_.middleRows(static_cast<Eigen::Index>(m) * codewords_, codewords_);
  }

  friend bool operator==(const Codebooks& a, const Codebooks& b) {
    return a.books_ == b.books_ && a.codewords_ == b.codewords_ && a.sub_dim_ == b.sub_dim_ &&
           a.words_ == b.words_;
  }

 private:
  std::uint32_t books_ = 0;
  std::uint32_t codewords_ = 0;
  std::uint32_t sub_dim_ = 0;
  Matrix words_;
};

/// Unit-normalized standard-normal codewords.
inline Codebooks init_codebooks(std::uint32_t books, std::uint32_t codewords, std::uint32_t dim,
                                SeededRng& rng) {
  if (books == 0 || dim == 0 || dim % books != 0) {
    throw ParameterError("init_codebooks: D=" + std::to_string(dim) +
                         " is not divisible by M=" + std::to_string(books));
  }
  Codebooks cb(books, codewords, dim / books);
  Matrix& w = cb.words();
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.normal();
    w.row(r) = l2_normalize(w.row(r).transpose()).transpose();
  }
  return cb;
}

/// Weighted sum of codewords: sum_k weights[k] * codebook.row(k).
inline Vector attention_pool(const Matrix& codebook, const Vector& weights) {
  if (codebook.rows() != weights.size()) throw ShapeError("attention_pool: weight count != K");
  Vector out = Vector::Zero(codebook.cols());
  for (Eigen::Index k = 0; k < codebook.rows(); ++k) out += weights[k] * codebook.row(k).transpose();
  return out;
}

struct PqgParams {
  double lambda = 1.0;
  double tau_soft = 0.2;
  double tau_gumbel = 1.0;

  void validate() const {
    if (!(lambda >= 0.0)) throw ParameterError("PQG lambda must be non-negative");
    if (!(tau_soft > 0.0) || !(tau_gumbel > 0.0)) {
      throw ParameterError("PQG temperatures must be positive");
    }
  }
};

/// Soft-quantized vector plus everything backprop needs. Matrices are M x K.
struct SoftQuantized {
  Vector z;
  Matrix logits;          // cosine(sub-vector m, codeword k)
  Matrix soft_weights;    // softmax(logits / tau_soft)
  Matrix gumbel_weights;  // softmax((logits + noise) / tau_gumbel)
  Matrix noise;
};

inline void check_dim(const Vector& x, const Codebooks& cb, const char* what) {
  if (x.size() != static_cast<Eigen::Index>(cb.dim())) {
    throw ShapeError(std::string(what) + ": vector dim " + std::to_string(x.size()) +
                     " != codebook dim " + std::to_string(cb.dim()));
  }
}

/// Soft quantization with the Gumbel noise supplied by the caller (M x K).
inline SoftQuantized pqg_soft_quantize_with_noise(const Vector& x, const Codebooks& cb,
                                                  const PqgParams& params, const Matrix& noise) {
  params.validate();
  check_dim(x, cb, "pqg_soft_quantize");
  require_finite(x, "pqg_soft_quantize");
  const auto books = static_cast<Eigen::Index>(cb.books());
  const auto k_count = static_cast<Eigen::Index>(cb.codewords());
  const auto d = static_cast<Eigen::Index>(cb.sub_dim());
  if (noise.rows() != books || noise.cols() != k_count) {
    throw ShapeError("pqg_soft_quantize: noise must be M x K");
  }
  SoftQuantized out{Vector::Zero(x.size()), Matrix(books, k_count), Matrix(books, k_count),
                    Matrix(books, k_count), noise};
  for (Eigen::Index m = 0; m < books; ++m) {
    const auto sub = x.segment(m * d, d);
    const auto words = cb.book(static_cast<std::uint32_t>(m));
    Vector logits(k_count);
    for (Eigen::Index k = 0; k < k_count; ++k) logits[k] = cosine(sub, words.row(k).transpose());
    const Vector soft = softmax_temp(logits, params.tau_soft);
    const Vector gumbel = gumbel_softmax_with_noise(logits, noise.row(m).transpose(), params.tau_gumbel);
    out.z.segment(m * d, d) = attention_pool(words, soft) + params.lambda * attention_pool(words, gumbel);
    out.logits.row(m) = logits.transpose();
    out.soft_weights.row(m) = soft.transpose();
    out.gumbel_weights.row(m) = gumbel.transpose();
  }
  return out;
}

/// Soft quantization drawing fresh Gumbel noise (book-major, K draws per book).
inline SoftQuantized pqg_soft_quantize(const Vector& x, const Codebooks& cb, const PqgParams& params,
                                       SeededRng& rng) {
  Matrix noise(cb.books(), cb.codewords());
  for (Eigen::Index m = 0; m < noise.rows(); ++m) {
    for (Eigen::Index k = 0; k < noise.cols(); ++k) noise(m, k) = rng.gumbel();
  }
  return pqg_soft_quantize_with_noise(x, cb, params, noise);
}

/// Backward pass of pqg_soft_quantize_with_noise with the noise held fixed.
/// Adds dL/dx into grad_x and dL/dcodewords into grad_words (both pre-sized).
inline void pqg_backward(const Vector& x, const Codebooks& cb, const PqgParams& params,
                         const SoftQuantized& fwd, const Vector& grad_z, Vector& grad_x,
                         Matrix& grad_words) {
  const auto books = static_cast<Eigen::Index>(cb.books());
  const auto k_count = static_cast<Eigen::Index>(cb.codewords());
  const auto d = static_cast<Eigen::Index>(cb.sub_dim());
  Vector grad_logit(k_count);
  for (Eigen::Index m = 0; m < books; ++m) {
    const auto sub = x.segment(m * d, d);
    const auto g = grad_z.segment(m * d, d);
    const auto words = cb.book(static_cast<std::uint32_t>(m));
    auto grad_book = grad_words.middleRows(m * k_count, k_count);

    const auto soft = fwd.soft_weights.row(m);
    const auto gumbel = fwd.gumbel_weights.row(m);

    // z_m = sum_k (soft_k + lambda * gumbel_k) c_k
    Vector grad_w(k_count);
    for (Eigen::Index k = 0; k < k_count; ++k) {
      grad_w[k] = g.dot(words.row(k).transpose());
      grad_book.row(k) += (soft[k] + params.lambda * gumbel[k]) * g.transpose();
    }
    // Softmax Jacobians; the Gumbel branch sees lambda * grad_w.
    const double soft_dot = soft.dot(grad_w.transpose());
    const double gumbel_dot = gumbel.dot(grad_w.transpose());
    for (Eigen::Index k = 0; k < k_count; ++k) {
      grad_logit[k] = soft[k] * (grad_w[k] - soft_dot) / params.tau_soft +
                      params.lambda * gumbel[k] * (grad_w[k] - gumbel_dot) / params.tau_gumbel;
    }

    // logit_k = cos(sub, c_k)
    const double sub_norm = sub.norm();
    if (sub_norm == 0.0) continue;
    const Vector sub_unit = sub / sub_norm;
    for (Eigen::Index k = 0; k < k_count; ++k) {
      const double word_norm = words.row(k).norm();
      if (word_norm == 0.0 || grad_logit[k] == 0.0) continue;
      const Vector word_unit = words.row(k).transpose() / word_norm;
      const double c = fwd.logits(m, k);
      grad_x.segment(m * d, d) += grad_logit[k] * (word_unit - c * sub_unit) / sub_norm;
      grad_book.row(k) += grad_logit[k] * ((sub_unit - c * word_unit) / word_norm).transpose();
    }
  }
}

/// Nearest codeword by cosine per book; ties go to the lowest index.
inline std::vector<std::uint32_t> hard_assign(const Vector& x, const Codebooks& cb) {
  check_dim(x, cb, "hard_assign");
  require_finite(x, "hard_assign");
  const auto d = static_cast<Eigen::Index>(cb.sub_dim());
  std::vector<std::uint32_t> out(cb.books());
  for (std::uint32_t m = 0; m < cb.books(); ++m) {
    const auto sub = x.segment(m * d, d);
    double best = -std::numeric_limits<double>::infinity();
    std::uint32_t best_k = 0;
    for (std::uint32_t k = 0; k < cb.codewords(); ++k) {
      const double c = cosine(sub, cb.codeword(m, k).transpose());
      if (c > best) {
        best = c;
        best_k = k;
      }
    }
    out[m] = best_k;
  }
  return out;
}

/// Packed binary code. Sub-index m occupies bits [m*b, (m+1)*b), b = log2(K),
/// counted LSB-first within each byte; trailing bits are zero.
struct PQCode {
  std::vector<std::uint8_t> bytes;

  friend bool operator==(const PQCode&, const PQCode&) = default;
};

inline PQCode pack_code(std::span<const std::uint32_t> indices, std::uint32_t codewords) {
  const int b = bits_per_index(codewords);
  PQCode code{std::vector<std::uint8_t>((indices.size() * b + 7) / 8, 0)};
  std::size_t pos = 0;
  for (std::size_t m = 0; m < indices.size(); ++m) {
    if (indices[m] >= codewords) {
      throw RangeError("pack_code: index " + std::to_string(indices[m]) + " at book " +
                       std::to_string(m) + " >= K=" + std::to_string(codewords));
    }
    for (int bit = 0; bit < b; ++bit, ++pos) {
      if ((indices[m] >> bit) & 1U) code.bytes[pos / 8] |= static_cast<std::uint8_t>(1U << (pos % 8));
    }
  }
  return code;
}

inline std::vector<std::uint32_t> unpack_code(const PQCode& code, std::uint32_t books,
                                              std::uint32_t codewords) {
  const int b = bits_per_index(codewords);
  if (code.bytes.size() != code_bytes(books, codewords)) {
    throw FormatError("unpack_code: code has " + std::to_string(code.bytes.size()) +
                      " bytes, expected " + std::to_string(code_bytes(books, codewords)));
  }
  std::vector<std::uint32_t> out(books, 0);
  std::size_t pos = 0;
  for (std::uint32_t m = 0; m < books; ++m) {
    for (int bit = 0; bit < b; ++bit, ++pos) {
      if ((code.bytes[pos / 8] >> (pos % 8)) & 1U) out[m] |= 1U << bit;
    }
  }
  for (; pos < code.bytes.size() * 8; ++pos) {
    if ((code.bytes[pos / 8] >> (pos % 8)) & 1U) throw FormatError("unpack_code: padding bits set");
  }
  return out;
}

struct UsageHistogram {
  std::uint32_t books = 0;
  std::uint32_t codewords = 0;
  std::vector<std::uint64_t> counts;  // book-major, M x K
  std::vector<double> entropy_bits;   // per book

  std::uint64_t count(std::uint32_t m, std::uint32_t k) const {
    return counts[static_cast<std::size_t>(m) * codewords + k];
  }
  double mean_entropy() const {
    if (entropy_bits.empty()) return 0.0;
    double s = 0.0;
    for (double e : entropy_bits) s += e;
    return s / static_cast<double>(entropy_bits.size());
  }
};

/// Per-book codeword counts and Shannon entropy (bits) over a set of codes.
inline UsageHistogram usage_histogram(std::span<const PQCode> codes, std::uint32_t books,
                                      std::uint32_t codewords) {
  UsageHistogram h{books, codewords,
                   std::vector<std::uint64_t>(static_cast<std::size_t>(books) * codewords, 0),
                   std::vector<double>(books, 0.0)};
  for (const PQCode& code : codes) {
    const auto idx = unpack_code(code, books, codewords);
    for (std::uint32_t m = 0; m < books; ++m) ++h.counts[static_cast<std::size_t>(m) * codewords + idx[m]];
  }
  if (codes.empty()) return h;
  const auto total = static_cast<double>(codes.size());
  for (std::uint32_t m = 0; m < books; ++m) {
    double e = 0.0;
    for (std::uint32_t k = 0; k < codewords; ++k) {
      const double p = static_cast<double>(h.count(m, k)) / total;
      if (p > 0.0) e -= p * std::log2(p);
    }
    h.entropy_bits[m] = std::max(e, 0.0);
  }
  return h;
}

}  // namespace dcmq
