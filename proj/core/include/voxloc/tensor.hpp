#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxloc {

// Row-major dense shape, at most 4 axes (batch, channels, height, width).
struct Shape {
  std::array<int, 4> d{1, 1, 1, 1};
  int rank = 1;

  static Shape scalar() { return Shape{{1, 1, 1, 1}, 1}; }
  static Shape vec(int n) { return Shape{{n, 1, 1, 1}, 1}; }
  static Shape mat(int n, int c) { return Shape{{n, c, 1, 1}, 2}; }
  static Shape rank3(int n, int c, int h) { return Shape{{n, c, h, 1}, 3}; }
  static Shape nchw(int n, int c, int h, int w) { return Shape{{n, c, h, w}, 4}; }

  std::size_t numel() const {
    std::size_t n = 1;
    for (int i = 0; i < rank; ++i) n *= static_cast<std::size_t>(d[i]);
    return n;
  }
  int operator[](int i) const { return d[i]; }
  bool operator==(const Shape& o) const { return rank == o.rank && d == o.d; }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "(";
    for (int i = 0; i < rank; ++i) {
      if (i) s += ",";
      s += std::to_string(d[i]);
    }
    return s + ")";
  }
};

struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
class Tensor {
 public:
  Tensor() : shape_(Shape::scalar()), data_(1, T{0}) {}
  explicit Tensor(const Shape& s, T fill = T{0}) : shape_(s), data_(s.numel(), fill) {}
  Tensor(const Shape& s, std::vector<T> values) : shape_(s), data_(std::move(values)) {
    if (data_.size() != shape_.numel())
      throw shape_error("tensor init: " + std::to_string(data_.size()) + " values for shape " + shape_.str());
  }

  static Tensor zeros(const Shape& s) { return Tensor(s); }
  static Tensor full(const Shape& s, T v) { return Tensor(s, v); }
  static Tensor scalar(T v) {
    Tensor t(Shape::scalar());
    t.data_[0] = v;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * shape_.d[1] + c) * shape_.d[2] + h) * shape_.d[3] + w];
  }
  const T& at(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * shape_.d[1] + c) * shape_.d[2] + h) * shape_.d[3] + w];
  }

  T item() const {
    if (numel() != 1) throw shape_error("item() on tensor of shape " + shape_.str());
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

}  // namespace voxloc
