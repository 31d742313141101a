#pragma once

// Distillation targets built from cached teacher embeddings.

#include <string>

#include "dcmq/labels.hpp"
#include "dcmq/numerics.hpp"

namespace dcmq {

struct TargetMatrix {
  Matrix values;
  /// Set once rows have been rescaled to [-1, 1] with a pinned unit diagonal.
  bool normalized = false;

  Eigen::Index size() const noexcept { return values.rows(); }
};

enum class TargetMode { kNpc, kRaw, kIdentity, kMultiHot };

inline std::string to_string(TargetMode mode) {
  switch (mode) {
    case TargetMode::kNpc: return "npc";
    case TargetMode::kRaw: return "raw";
    case TargetMode::kIdentity: return "identity";
    case TargetMode::kMultiHot: return "multihot";
  }
  return "?";
}

inline TargetMode parse_target_mode(const std::string& name) {
  if (name == "npc") return TargetMode::kNpc;
  if (name == "raw") return TargetMode::kRaw;
  if (name == "identity") return TargetMode::kIdentity;
  if (name == "multihot") return TargetMode::kMultiHot;
  throw ParameterError("unknown target mode '" + name + "' (npc|raw|identity|multihot)");
}

/// Teacher image-text cosine matrix: (i, j) = cos(image i, text j).
inline TargetMatrix compute_similarity(const Matrix& teacher_img, const Matrix& teacher_txt) {
  if (teacher_img.rows() != teacher_txt.rows() || teacher_img.cols() != teacher_txt.cols()) {
    throw ShapeError("compute_similarity: teacher embeddings must share N and D");
  }
  return {cosine_sim_matrix(teacher_img, teacher_txt), false};
}

/// Per-row affine rescale to [-1, 1] followed by a unit diagonal.
///
/// Row i is mapped by s -> a*s + b with a = 2/(max-min), b = -(max+min)/(max-min),
/// so its minimum lands on -1 and its maximum on +1. The paired entry (i, i) is
/// then overwritten with 1. A row whose max equals its min carries no ranking
/// information and is mapped to 0 before the diagonal override.
inline TargetMatrix npc(const TargetMatrix& target) {
  const Matrix& s = target.values;
  if (s.rows() != s.cols()) throw ShapeError("npc: target matrix must be square");
  require_finite(s, "npc");
  Matrix out(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double hi = s.row(i).maxCoeff();
    const double lo = s.row(i).minCoeff();
    if (hi == lo) {
      out.row(i).setZero();
    } else {
      const double slope = 2.0 / (hi - lo);
      const double intercept = -(hi + lo) / (hi - lo);
      for (Eigen::Index j = 0; j < s.cols(); ++j) {
        out(i, j) = std::clamp(slope * s(i, j) + intercept, -1.0, 1.0);
      }
    }
    out(i, i) = 1.0;
  }
  return {std::move(out), true};
}

inline TargetMatrix target_identity(Eigen::Index n) {
  if (n < 1) throw ParameterError("target_identity: N must be at least 1");
  return {Matrix::Identity(n, n), true};
}

/// +1 where two rows share at least one label, -1 otherwise; unit diagonal.
inline TargetMatrix target_multihot(const MultiHotLabels& labels) {
  const auto n = static_cast<Eigen::Index>(labels.rows());
  if (n < 1) throw ParameterError("target_multihot: need at least one row");
  Matrix out(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      out(i, j) = (i == j || labels.shares(i, labels, j)) ? 1.0 : -1.0;
    }
  }
  return {std::move(out), true};
}

}  // namespace dcmq
