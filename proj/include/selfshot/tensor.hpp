#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "selfshot/common.hpp"

namespace selfshot {

// Dense row-major tensor of doubles. All model math runs in double precision
// so the finite-difference gradient checks exercise the production code path.
class Tensor {
 public:
  using Shape = std::vector<std::int64_t>;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, double fill);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return numel_; }
  bool empty() const { return numel_ == 0; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Row-major offsets for the common low ranks.
  double& at2(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  double at2(std::int64_t i, std::int64_t j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  double& at3(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at3(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double& at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
    return data_[static_cast<std::size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
  }
  double at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) const {
    return data_[static_cast<std::size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  void fill(double v);
  bool all_finite() const;
  double max_abs() const;

  std::string shape_str() const;
  static std::string shape_str(const Shape& s);
  static std::int64_t shape_numel(const Shape& s);

 private:
  Shape shape_;
  std::int64_t numel_ = 0;
  std::vector<double> data_;
};

}  // namespace selfshot
