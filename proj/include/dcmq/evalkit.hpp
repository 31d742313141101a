#pragma once

// Retrieval metrics with label-sharing relevance.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcmq/errors.hpp"
#include "dcmq/labels.hpp"

namespace dcmq {

/// relevant(q, g) iff query q and gallery item g share an active label.
class RelevanceJudge {
 public:
  RelevanceJudge(const MultiHotLabels& queries, const MultiHotLabels& gallery)
      : queries_(&queries), gallery_(&gallery) {
    if (queries.classes() != gallery.classes()) {
      throw ShapeError("RelevanceJudge: query and gallery label widths differ");
    }
  }

  bool relevant(std::size_t query, std::size_t item) const {
    return queries_->shares(query, *gallery_, item);
  }

  std::size_t query_count() const noexcept { return queries_->rows(); }
  std::size_t gallery_size() const noexcept { return gallery_->rows(); }

  std::size_t total_relevant(std::size_t query) const {
    std::size_t n = 0;
    for (std::size_t g = 0; g < gallery_->rows(); ++g) n += relevant(query, g) ? 1 : 0;
    return n;
  }

  /// Relevance flags of a ranking, in rank order.
  std::vector<std::uint8_t> flags(std::size_t query, std::span<const std::uint32_t> ranking) const {
    std::vector<std::uint8_t> out(ranking.size());
    for (std::size_t r = 0; r < ranking.size(); ++r) {
      if (ranking[r] >= gallery_->rows()) throw RangeError("ranking names an unknown gallery id");
      out[r] = relevant(query, ranking[r]) ? 1 : 0;
    }
    return out;
  }

 private:
  const MultiHotLabels* queries_;
  const MultiHotLabels* gallery_;
};

/// Denominator of average precision.
enum class ApDenominator {
  kRetrieved,        // relevant items within the top R
  kMinRelevantOrR,   // min(R, relevant items in the whole gallery)
};

/// AP over the first R ranks:
///   sum_{k <= R, rel(k)} precision@k / denominator
/// and 0 when nothing relevant appears in the top R.
inline double average_precision_at(std::span<const std::uint8_t> rel, std::size_t cutoff,
                                   ApDenominator denom = ApDenominator::kRetrieved,
                                   std::size_t total_relevant = 0) {
  if (cutoff == 0) throw ParameterError("average_precision_at: R must be at least 1");
  const std::size_t depth = std::min(cutoff, rel.size());
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < depth; ++k) {
    if (rel[k]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  if (hits == 0) return 0.0;
  const std::size_t d =
      denom == ApDenominator::kRetrieved ? hits : std::min(cutoff, std::max(total_relevant, hits));
  return sum / static_cast<double>(d);
}

/// Mean AP@R over queries; queries with no relevant gallery item are skipped.
inline double map_at(const std::vector<std::vector<std::uint32_t>>& rankings,
                     const RelevanceJudge& judge, std::size_t cutoff,
                     ApDenominator denom = ApDenominator::kRetrieved) {
  if (cutoff == 0) throw ParameterError("map_at: R must be at least 1");
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const std::size_t total = judge.total_relevant(q);
    if (total == 0) continue;
    const auto rel = judge.flags(q, rankings[q]);
    sum += average_precision_at(rel, cutoff, denom, total);
    ++counted;
  }
  return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

/// Precision@n averaged over all queries for n = stride, 2*stride, ..., plus
/// n = top when top is not a multiple of stride. Missing ranks count as misses.
inline std::vector<std::pair<std::size_t, double>> precision_curve(
    const std::vector<std::vector<std::uint32_t>>& rankings, const RelevanceJudge& judge,
    std::size_t top, std::size_t stride = 1) {
  if (top == 0 || stride == 0) throw ParameterError("precision_curve: top and stride must be positive");
  std::vector<double> hits_at(top, 0.0);  // summed over queries: hits within first n+1
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto rel = judge.flags(q, rankings[q]);
    std::size_t hits = 0;
    for (std::size_t n = 0; n < top; ++n) {
      if (n < rel.size() && rel[n]) ++hits;
      hits_at[n] += static_cast<double>(hits);
    }
  }
  std::vector<std::pair<std::size_t, double>> curve;
  const double queries = static_cast<double>(std::max<std::size_t>(rankings.size(), 1));
  for (std::size_t n = stride; n <= top; n += stride) {
    curve.emplace_back(n, hits_at[n - 1] / (static_cast<double>(n) * queries));
  }
  if (top % stride != 0) curve.emplace_back(top, hits_at[top - 1] / (static_cast<double>(top) * queries));
  return curve;
}

/// Mean over queries of (relevant in top N) / (relevant in gallery); queries
/// with no relevant gallery item are skipped.
inline double recall_at(const std::vector<std::vector<std::uint32_t>>& rankings,
                        const RelevanceJudge& judge, std::size_t cutoff) {
  if (cutoff == 0) throw ParameterError("recall_at: N must be at least 1");
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const std::size_t total = judge.total_relevant(q);
    if (total == 0) continue;
    const auto rel = judge.flags(q, rankings[q]);
    const std::size_t depth = std::min(cutoff, rel.size());
    const auto hits = static_cast<std::size_t>(std::count(rel.begin(), rel.begin() + static_cast<std::ptrdiff_t>(depth), 1));
    sum += static_cast<double>(hits) / static_cast<double>(total);
    ++counted;
  }
  return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

/// Recall@n for n = stride, 2*stride, ... up to top.
inline std::vector<std::pair<std::size_t, double>> recall_curve(
    const std::vector<std::vector<std::uint32_t>>& rankings, const RelevanceJudge& judge,
    std::size_t top, std::size_t stride = 1) {
  if (top == 0 || stride == 0) throw ParameterError("recall_curve: top and stride must be positive");
  std::vector<double> recall_sum(top, 0.0);
  std::size_t counted = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const std::size_t total = judge.total_relevant(q);
    if (total == 0) continue;
    ++counted;
    const auto rel = judge.flags(q, rankings[q]);
    std::size_t hits = 0;
    for (std::size_t n = 0; n < top; ++n) {
      if (n < rel.size() && rel[n]) ++hits;
      recall_sum[n] += static_cast<double>(hits) / static_cast<double>(total);
    }
  }
  const double denom = static_cast<double>(std::max<std::size_t>(counted, 1));
  std::vector<std::pair<std::size_t, double>> curve;
  for (std::size_t n = stride; n <= top; n += stride) curve.emplace_back(n, recall_sum[n - 1] / denom);
  if (top % stride != 0) curve.emplace_back(top, recall_sum[top - 1] / denom);
  return curve;
}

}  // namespace dcmq
