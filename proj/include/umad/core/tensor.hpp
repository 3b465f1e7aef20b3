#pragma once

#include <Eigen/Core>

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace umad {

using Index = Eigen::Index;
using Array = Eigen::ArrayXd;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

// Dense row-major tensor of doubles. Flat storage; shape is bookkeeping.
struct Tensor {
  Shape shape;
  Array data;

  Tensor() = default;
  Tensor(Shape s, Array d) : shape(std::move(s)), data(std::move(d)) {
    assert(shape_numel(shape) == data.size());
  }

  static Tensor zeros(Shape s) {
    Index n = shape_numel(s);
    return Tensor(std::move(s), Array::Zero(n));
  }
  static Tensor full(Shape s, double v) {
    Index n = shape_numel(s);
    return Tensor(std::move(s), Array::Constant(n, v));
  }
  static Tensor scalar(double v) { return full({1}, v); }

  Index numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  Index dim(int i) const { return shape[static_cast<size_t>(i)]; }

  double& operator[](Index i) { return data[i]; }
  double operator[](Index i) const { return data[i]; }

  // flat index helpers for the common layouts
  double& at4(Index n, Index c, Index h, Index w) {
    return data[((n * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }
  double at4(Index n, Index c, Index h, Index w) const {
    return data[((n * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }
  double& at3(Index n, Index c, Index l) {
    return data[(n * dim(1) + c) * dim(2) + l];
  }
  double at3(Index n, Index c, Index l) const {
    return data[(n * dim(1) + c) * dim(2) + l];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace umad
