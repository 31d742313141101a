#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "dcmq/errors.hpp"

namespace dcmq {

/// N rows of L-bit class-membership vectors.
class MultiHotLabels {
 public:
  MultiHotLabels() = default;
  MultiHotLabels(std::size_t rows, std::size_t classes)
      : rows_(rows), classes_(classes), bits_(rows * classes, 0) {}

  /// Builds from dense 0/1 rows; all rows must have the same length.
  static MultiHotLabels from_rows(std::initializer_list<std::initializer_list<int>> rows) {
    const std::size_t classes = rows.size() == 0 ? 0 : rows.begin()->size();
    MultiHotLabels out(rows.size(), classes);
    std::size_t r = 0;
    for (const auto& row : rows) {
      if (row.size() != classes) throw ShapeError("MultiHotLabels: ragged rows");
      std::size_t c = 0;
      for (int v : row) out.set(r, c++, v != 0);
      ++r;
    }
    return out;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t classes() const noexcept { return classes_; }

  bool test(std::size_t row, std::size_t cls) const { return bits_[row * classes_ + cls] != 0; }
  void set(std::size_t row, std::size_t cls, bool on = true) {
    bits_[row * classes_ + cls] = on ? 1 : 0;
  }

  /// True iff row i of this and row j of other have at least one class in common.
  bool shares(std::size_t i, const MultiHotLabels& other, std::size_t j) const {
    if (other.classes_ != classes_) throw ShapeError("MultiHotLabels: class counts differ");
    const std::uint8_t* a = bits_.data() + i * classes_;
    const std::uint8_t* b = other.bits_.data() + j * classes_;
    for (std::size_t c = 0; c < classes_; ++c) {
      if (a[c] && b[c]) return true;
    }
    return false;
  }

  MultiHotLabels select_rows(const std::vector<std::size_t>& rows) const {
    MultiHotLabels out(rows.size(), classes_);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c < classes_; ++c) out.set(r, c, test(rows[r], c));
    }
    return out;
  }

  friend bool operator==(const MultiHotLabels&, const MultiHotLabels&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t classes_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace dcmq
