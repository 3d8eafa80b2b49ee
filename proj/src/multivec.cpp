#include "cemb/multivec.hpp"

#include <cmath>
#include <string>

#include "cemb/error.hpp"

namespace cemb {

MultiVec::MultiVec(Tensor rows, double tol) : rows_(std::move(rows)) {
  if (rows_.rank() != 2) throw DimensionError("MultiVec needs a matrix, got " + rows_.shape_string());
  for (std::size_t i = 0; i < rows_.rows(); ++i) {
    double ss = 0.0;
    for (double v : rows_.row(i)) ss += v * v;
    if (std::abs(std::sqrt(ss) - 1.0) > tol)
      throw ContractError("MultiVec row " + std::to_string(i) + " has norm " + std::to_string(std::sqrt(ss)));
  }
}

MultiVec MultiVec::normalized(Tensor rows) {
  if (rows.rank() != 2) throw DimensionError("MultiVec needs a matrix, got " + rows.shape_string());
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    double ss = 0.0;
    for (double v : rows.row(i)) ss += v * v;
    const double n = std::sqrt(ss);
    if (n <= 1e-12) throw DegenerateInputError("cannot normalize zero row " + std::to_string(i));
    for (double& v : rows.row(i)) v /= n;
  }
  return MultiVec(std::move(rows));
}

MultiVec MultiVec::prefix(std::size_t k) const {
  if (k == 0 || k > length())
    throw CapacityError("prefix " + std::to_string(k) + " of a " + std::to_string(length()) + "-row MultiVec");
  const auto vals = rows_.values().first(k * dim());
  MultiVec out;
  out.rows_ = Tensor({k, dim()}, std::vector<double>(vals.begin(), vals.end()));
  return out;
}

}  // namespace cemb
