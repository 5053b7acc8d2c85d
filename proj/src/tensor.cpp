#include "tsn/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace tsn {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw DimensionError("negative tensor extent " + shape.str());
  }
  data_.assign(shape.numel(), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape.numel()) {
    throw DimensionError("tensor buffer does not match shape " + shape.str());
  }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_(const Tensor& other) {
  if (!(other.shape_ == shape_)) {
    throw DimensionError("add_: " + shape_.str() + " vs " + other.shape_.str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

Tensor Tensor::reshaped(Shape s) const {
  if (s.numel() != shape_.numel()) {
    throw DimensionError("reshape " + shape_.str() + " -> " + s.str());
  }
  return Tensor(s, data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_shape(const Tensor& t, const Shape& s, const char* what) {
  if (!(t.shape() == s)) {
    throw DimensionError(std::string(what) + ": expected " + s.str() + ", got " + t.shape().str());
  }
}

}  // namespace tsn
