#include "cemb/tensor.hpp"

#include <cmath>
#include <numeric>

#include "cemb/error.hpp"

namespace cemb {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    n *= d;
  }
  return n;
}

}  // namespace

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), values_(product(shape_), fill) {
  if (shape_.empty() || shape_.size() > 2) {
    throw DimensionError("only rank 1 and rank 2 tensors are supported, got " + cemb::shape_string(shape_));
  }
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_.empty() || shape_.size() > 2) {
    throw DimensionError("only rank 1 and rank 2 tensors are supported, got " + cemb::shape_string(shape_));
  }
  if (product(shape_) != values_.size()) {
    throw DimensionError("shape " + cemb::shape_string(shape_) + " does not match " +
                         std::to_string(values_.size()) + " values");
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in from_rows");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(v));
}

std::size_t Tensor::rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
std::size_t Tensor::cols() const { return shape_.size() == 2 ? shape_[1] : shape_[0]; }

std::vector<double>& Tensor::ensure_grad() {
  if (grad_.size() != values_.size()) grad_.assign(values_.size(), 0.0);
  return grad_;
}

bool Tensor::all_finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  for (double g : grad_)
    if (!std::isfinite(g)) return false;
  return true;
}

std::string Tensor::shape_string() const { return cemb::shape_string(shape_); }

}  // namespace cemb
