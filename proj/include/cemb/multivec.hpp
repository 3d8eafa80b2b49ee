#pragma once

#include <cstddef>
#include <span>

#include "cemb/tensor.hpp"

namespace cemb {

// An L x D stack of unit-norm embedding vectors (a query or document
// representation for late interaction).
class MultiVec {
 public:
  MultiVec() = default;
  // Validates that every row has unit norm within `tol`.
  explicit MultiVec(Tensor rows, double tol = 1e-9);
  // Normalizes each row; throws DegenerateInputError on a zero row.
  static MultiVec normalized(Tensor rows);

  std::size_t length() const { return rows_.rows(); }
  std::size_t dim() const { return rows_.cols(); }
  bool empty() const { return rows_.empty(); }
  std::span<const double> row(std::size_t i) const { return rows_.row(i); }
  const Tensor& tensor() const { return rows_; }

  // First k rows. Requires 1 <= k <= length().
  MultiVec prefix(std::size_t k) const;

 private:
  Tensor rows_;
};

}  // namespace cemb
