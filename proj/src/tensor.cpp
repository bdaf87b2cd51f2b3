#include "selfplay/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace selfplay {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (const int d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= d;
  }
  return n;
}

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  t.shape = std::move(shape);
  t.data.assign(static_cast<size_t>(shape_numel(t.shape)), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t = zeros(std::move(shape));
  for (double& x : t.data) x = v;
  return t;
}

Tensor Tensor::from_vector(const std::vector<double>& v) {
  Tensor t;
  t.shape = {static_cast<int>(v.size())};
  t.data = v;
  return t;
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> vals) {
  if (static_cast<int64_t>(vals.size()) != static_cast<int64_t>(rows) * cols) {
    throw std::invalid_argument("matrix size mismatch");
  }
  Tensor t;
  t.shape = {rows, cols};
  t.data = std::move(vals);
  return t;
}

bool Tensor::all_finite() const {
  for (const double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace selfplay
