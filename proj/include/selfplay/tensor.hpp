#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace selfplay {

// Dense row-major double tensor. Rank 0 (scalar), 1 or 2 in practice.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;

  static Tensor scalar(double v) {
    Tensor t;
    t.data = {v};
    return t;
  }

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double v);
  static Tensor from_vector(const std::vector<double>& v);
  static Tensor matrix(int rows, int cols, std::vector<double> vals);

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  bool is_scalar() const { return shape.empty() && data.size() == 1; }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(int i) { return data[static_cast<size_t>(i)]; }
  double at(int i) const { return data[static_cast<size_t>(i)]; }
  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;
};

int64_t shape_numel(const std::vector<int>& shape);

}  // namespace selfplay
