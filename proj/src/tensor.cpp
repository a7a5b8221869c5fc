#include "amecam/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "amecam/error.hpp"

namespace amecam {

void Tensor::reshape(std::vector<int> shape) {
  if (count(shape) != data_.size()) {
    throw Error(ErrorCode::ShapeMismatch, "reshape " + shape_string() + " to incompatible shape");
  }
  shape_ = std::move(shape);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

void add_inplace(Tensor& dst, const Tensor& src) {
  if (dst.shape() != src.shape()) {
    throw Error(ErrorCode::ShapeMismatch, dst.shape_string() + " += " + src.shape_string());
  }
  float* d = dst.data();
  const float* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace amecam
