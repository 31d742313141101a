#pragma once

// Binary-code galleries and asymmetric-distance (lookup-table) search.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dcmq/labels.hpp"
#include "dcmq/quantizer.hpp"

namespace dcmq {

struct ScoredId {
  std::uint32_t id = 0;
  double score = 0.0;

  friend bool operator==(const ScoredId&, const ScoredId&) = default;
};

/// Descending score, ascending id among equal scores.
using RankedList = std::vector<ScoredId>;

inline bool ranks_before(const ScoredId& a, const ScoredId& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

/// Keeps the best k entries of scored in rank order.
inline RankedList top_k(RankedList scored, std::size_t k) {
  k = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(),
                    ranks_before);
  scored.resize(k);
  return scored;
}

/// Immutable gallery of packed codes. Gallery ids are row positions 0..N_g-1.
class Index {
 public:
  Index(Codebooks codebooks, std::vector<PQCode> codes, std::optional<MultiHotLabels> labels = {})
      : codebooks_(std::move(codebooks)), codes_(std::move(codes)), labels_(std::move(labels)) {
    if (labels_ && labels_->rows() != codes_.size()) {
      throw AlignmentError("Index: label rows do not match gallery size");
    }
    decoded_.reserve(codes_.size() * codebooks_.books());
    for (const PQCode& c : codes_) {
      // Throws FormatError on wrong length or stray padding bits.
      const auto idx = unpack_code(c, codebooks_.books(), codebooks_.codewords());
      decoded_.insert(decoded_.end(), idx.begin(), idx.end());
    }
  }

  std::size_t size() const noexcept { return codes_.size(); }
  std::uint32_t books() const noexcept { return codebooks_.books(); }
  std::uint32_t codewords() const noexcept { return codebooks_.codewords(); }
  const Codebooks& codebooks() const noexcept { return codebooks_; }
  const std::vector<PQCode>& codes() const noexcept { return codes_; }
  const std::optional<MultiHotLabels>& labels() const noexcept { return labels_; }

  /// Unpacked sub-index m of gallery item i.
  std::uint32_t sub_index(std::size_t item, std::uint32_t book) const {
    return decoded_[item * codebooks_.books() + book];
  }

  friend bool operator==(const Index& a, const Index& b) {
    return a.codebooks_ == b.codebooks_ && a.codes_ == b.codes_ && a.labels_ == b.labels_;
  }

 private:
  Codebooks codebooks_;
  std::vector<PQCode> codes_;
  std::optional<MultiHotLabels> labels_;
  std::vector<std::uint32_t> decoded_;  // N_g x M, cached for lookup
};

/// Hard-assigns and packs each gallery row (rows are l2-normalized first).
inline Index build_index(const Matrix& gallery, const Codebooks& codebooks,
                         std::optional<MultiHotLabels> labels = {}) {
  if (gallery.rows() > 0 && gallery.cols() != static_cast<Eigen::Index>(codebooks.dim())) {
    throw ShapeError("build_index: gallery dim " + std::to_string(gallery.cols()) +
                     " != codebook dim " + std::to_string(codebooks.dim()));
  }
  std::vector<PQCode> codes;
  codes.reserve(static_cast<std::size_t>(gallery.rows()));
  for (Eigen::Index r = 0; r < gallery.rows(); ++r) {
    const auto idx = hard_assign(gallery.row(r).transpose(), codebooks);
    codes.push_back(pack_code(idx, codebooks.codewords()));
  }
  return Index(codebooks, std::move(codes), std::move(labels));
}

/// M x K table of cosine(query sub-vector m, codeword k).
using LookupTable = Matrix;

inline LookupTable make_lookup_table(const Vector& query, const Codebooks& codebooks) {
  check_dim(query, codebooks, "make_lookup_table");
  require_finite(query, "make_lookup_table");
  const auto d = static_cast<Eigen::Index>(codebooks.sub_dim());
  LookupTable table(codebooks.books(), codebooks.codewords());
  for (std::uint32_t m = 0; m < codebooks.books(); ++m) {
    const auto sub = query.segment(m * d, d);
    for (std::uint32_t k = 0; k < codebooks.codewords(); ++k) {
      table(m, k) = cosine(sub, codebooks.codeword(m, k).transpose());
    }
  }
  return table;
}

/// Sum over books of table(m, indices[m]).
inline double adc_score(const LookupTable& table, std::span<const std::uint32_t> indices) {
  if (indices.size() != static_cast<std::size_t>(table.rows())) {
    throw ShapeError("adc_score: expected one index per book");
  }
  double s = 0.0;
  for (std::size_t m = 0; m < indices.size(); ++m) {
    if (indices[m] >= table.cols()) throw RangeError("adc_score: index out of range");
    s += table(static_cast<Eigen::Index>(m), indices[m]);
  }
  return s;
}

/// Work counters for one or more searches.
struct SearchStats {
  std::uint64_t table_entries = 0;  // cosine evaluations to build tables
  std::uint64_t table_lookups = 0;  // reads while scoring codes
};

/// Scores every gallery code by summing its M table entries and returns the
/// top min(k, N_g) by descending score, ascending id on ties.
inline RankedList adc_search(const Vector& query, const Index& index, std::size_t k,
                             SearchStats* stats = nullptr) {
  if (k == 0) throw ParameterError("adc_search: k must be at least 1");
  const LookupTable table = make_lookup_table(query, index.codebooks());
  if (stats) stats->table_entries += static_cast<std::uint64_t>(table.size());
  RankedList scored(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    double s = 0.0;
    for (std::uint32_t m = 0; m < index.books(); ++m) s += table(m, index.sub_index(i, m));
    scored[i] = {static_cast<std::uint32_t>(i), s};
  }
  if (stats) stats->table_lookups += static_cast<std::uint64_t>(index.size()) * index.books();
  return top_k(std::move(scored), k);
}

/// Uncompressed cosine ranking against raw gallery rows.
inline RankedList exact_search(const Vector& query, const Matrix& gallery, std::size_t k) {
  if (k == 0) throw ParameterError("exact_search: k must be at least 1");
  if (gallery.rows() > 0 && gallery.cols() != query.size()) {
    throw ShapeError("exact_search: query dim != gallery dim");
  }
  RankedList scored(static_cast<std::size_t>(gallery.rows()));
  for (Eigen::Index r = 0; r < gallery.rows(); ++r) {
    scored[static_cast<std::size_t>(r)] = {static_cast<std::uint32_t>(r),
                                           cosine(query, gallery.row(r).transpose())};
  }
  return top_k(std::move(scored), k);
}

}  // namespace dcmq
