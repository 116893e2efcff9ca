#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace facectl {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Dense row-major float64 array with value semantics. Images and feature maps
// use NCHW layout throughout the library.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(const Shape& shape) { return Tensor(shape, 0.0); }
  static Tensor full(const Shape& shape, double v) { return Tensor(shape, v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  // Negative indices count from the back.
  int dim(int i) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  template <typename... I>
  double& operator()(I... idx) {
    return data_[offset({static_cast<int>(idx)...})];
  }
  template <typename... I>
  double operator()(I... idx) const {
    return data_[offset({static_cast<int>(idx)...})];
  }

  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(double v);
  double item() const;
  double sum() const;
  double max_abs() const;
  bool all_finite() const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double s);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<int> idx) const;

  Shape shape_;
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);

// Selects entries [begin, end) along the leading (batch) axis.
Tensor slice_batch(const Tensor& t, int begin, int end);
// Gathers batch entries in the given order.
Tensor gather_batch(const Tensor& t, std::span<const int> indices);
// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace facectl
