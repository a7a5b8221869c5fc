#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace amecam {

// Row-major 2D grid. Used for slices, masks and activation maps.
template <typename T>
struct Grid2D {
  int height = 0;
  int width = 0;
  std::vector<T> values;

  Grid2D() = default;
  Grid2D(int h, int w, T fill = T{}) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  T& operator()(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  const T& operator()(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }

  std::size_t size() const { return values.size(); }
  bool same_shape(const Grid2D& other) const { return height == other.height && width == other.width; }
  bool operator==(const Grid2D&) const = default;
};

using Image = Grid2D<float>;
using Mask = Grid2D<std::uint8_t>;

// Dense float tensor with an arbitrary shape, row-major (last index fastest).
// Network activations use NCHW.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(count(shape_), fill) {}
  Tensor(std::initializer_list<int> shape, float fill = 0.0f)
      : Tensor(std::vector<int>(shape), fill) {}

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t i) const { return shape_[i]; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> span() { return data_; }
  std::span<const float> span() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // 4D accessor for NCHW tensors.
  float& at(int n, int c, int y, int x) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  float at(int n, int c, int y, int x) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(std::vector<int> shape);
  bool all_finite() const;
  std::string shape_string() const;

  bool operator==(const Tensor&) const = default;

  static std::size_t count(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

// Adds src into dst elementwise; shapes must match.
void add_inplace(Tensor& dst, const Tensor& src);

}  // namespace amecam
