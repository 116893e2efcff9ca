#include "facectl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace facectl {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != numel(shape_)) {
    throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                " does not match shape " + to_string(shape_));
  }
}

int Tensor::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw std::out_of_range("dimension index out of range for shape " + to_string(shape_));
  return shape_[static_cast<std::size_t>(i)];
}

std::size_t Tensor::offset(std::initializer_list<int> idx) const {
  if (idx.size() != shape_.size()) throw std::out_of_range("index rank mismatch for shape " + to_string(shape_));
  std::size_t off = 0;
  std::size_t k = 0;
  for (int i : idx) {
    off = off * static_cast<std::size_t>(shape_[k]) + static_cast<std::size_t>(i);
    ++k;
  }
  return off;
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor t = *this;
  return std::move(t).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (numel(shape) != data_.size()) {
    throw std::invalid_argument("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

double Tensor::item() const {
  if (data_.size() != 1) throw std::logic_error("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) throw std::invalid_argument("shape mismatch in +=: " + to_string(shape_) + " vs " + to_string(other.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  if (other.shape_ != shape_) throw std::invalid_argument("shape mismatch in -=: " + to_string(shape_) + " vs " + to_string(other.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }

Tensor slice_batch(const Tensor& t, int begin, int end) {
  if (t.rank() < 1 || begin < 0 || end > t.dim(0) || begin > end) {
    throw std::out_of_range("slice_batch out of range for shape " + to_string(t.shape()));
  }
  Shape s = t.shape();
  const std::size_t inner = t.size() / static_cast<std::size_t>(std::max(1, s[0]));
  s[0] = end - begin;
  std::vector<double> d(t.data() + inner * begin, t.data() + inner * end);
  return Tensor(std::move(s), std::move(d));
}

Tensor gather_batch(const Tensor& t, std::span<const int> indices) {
  Shape s = t.shape();
  const std::size_t inner = s[0] ? t.size() / static_cast<std::size_t>(s[0]) : 0;
  s[0] = static_cast<int>(indices.size());
  Tensor out(s);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int b = indices[i];
    if (b < 0 || b >= t.dim(0)) throw std::out_of_range("gather_batch index out of range");
    std::copy_n(t.data() + inner * b, inner, out.data() + inner * i);
  }
  return out;
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw std::invalid_argument("stack of zero tensors");
  Shape s = items[0].shape();
  s.insert(s.begin(), static_cast<int>(items.size()));
  Tensor out(s);
  const std::size_t inner = items[0].size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != items[0].shape()) throw std::invalid_argument("stack of mismatched shapes");
    std::copy_n(items[i].data(), inner, out.data() + inner * i);
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace facectl
