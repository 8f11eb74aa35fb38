#include "selfshot/tensor.hpp"

#include <cmath>
#include <sstream>

namespace selfshot {

std::int64_t Tensor::shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    SS_CHECK(d >= 0, "negative tensor dimension");
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  numel_ = shape_numel(shape_);
  data_.assign(static_cast<std::size_t>(numel_), 0.0);
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  numel_ = shape_numel(shape_);
  data_.assign(static_cast<std::size_t>(numel_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  numel_ = shape_numel(shape_);
  SS_CHECK(numel_ == static_cast<std::int64_t>(data_.size()),
           "tensor data size does not match shape " + shape_str());
}

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double x : data_) m = std::max(m, std::fabs(x));
  return m;
}

std::string Tensor::shape_str(const Shape& s) {
  std::ostringstream ss;
  ss << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) ss << ",";
    ss << s[i];
  }
  ss << "]";
  return ss.str();
}

std::string Tensor::shape_str() const { return shape_str(shape_); }

}  // namespace selfshot
