#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "selfplay/tensor.hpp"

namespace selfplay::ad {

class Tape;

// Handle to a recorded value: node id into the owning tape.
struct Var {
  int32_t id = -1;
  Tape* tape = nullptr;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode recording. Single-threaded; node order is creation order, the
// reverse pass visits nodes in strictly decreasing id, so replays of the same
// program are bit-identical.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int32_t self)>;

  Var leaf(Tensor value, std::string name = {});  // grad-tracked input
  Var constant(Tensor value);                     // no-grad input
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  const Tensor& value(int32_t id) const { return nodes_[static_cast<size_t>(id)].value; }
  double scalar_value(Var v) const { return value(v).data[0]; }
  bool needs_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

  // Reverse pass from a scalar loss. Throws std::runtime_error on a non-finite
  // loss, naming the first non-finite intermediate in creation order.
  void backward(Var loss);

  // Gradient from the last backward(); zeros if the loss never touched `v`.
  Tensor grad_of(Var v) const;

  // Accumulation buffer for `id`, zero-initialized on first touch.
  Tensor& grad_buf(int32_t id);
  bool grad_written(int32_t id) const {
    return static_cast<size_t>(id) < grads_.size() && !grads_[static_cast<size_t>(id)].data.empty();
  }

  Var emit(Tensor value, std::vector<int32_t> parents, BackwardFn fn, const char* op);

  size_t num_nodes() const { return nodes_.size(); }
  const char* op_name(int32_t id) const { return nodes_[static_cast<size_t>(id)].op; }
  const std::string& leaf_name(int32_t id) const { return nodes_[static_cast<size_t>(id)].name; }
  void reset();

 private:
  struct Node {
    Tensor value;
    std::vector<int32_t> parents;
    BackwardFn backward;
    const char* op = "";
    std::string name;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// ---- elementwise / arithmetic ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var divide(Var a, Var b);
Var neg(Var a);
Var add_scalar(Var a, double c);
Var mul_scalar(Var a, double c);
Var vsin(Var a);
Var vcos(Var a);
Var vtan(Var a);
Var vsqrt(Var a);  // subgradient 0 at 0
Var vexp(Var a);
Var vlog(Var a);
Var vtanh(Var a);
Var relu(Var a);                         // derivative 0 at the kink
Var clamp(Var a, double lo, double hi);  // derivative 0 outside and at bounds
Var wrap_angle_op(Var a);                // wraps to (-pi, pi], identity gradient
Var minimum(Var a, Var b);               // ties get zero subgradient
Var maximum(Var a, Var b);               // ties get zero subgradient
Var huber(Var a, Var b, double delta);   // elementwise huber(a - b)

// ---- reductions / linear algebra ----
Var sum_all(Var a);
Var mean_all(Var a);
Var matmul(Var a, Var b);
Var softmax_rows(Var a);
Var layer_norm_rows(Var a, double eps = 1e-5);

// ---- shape / assembly ----
Var reshape(Var a, std::vector<int> shape);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var stack_cols(const std::vector<Var>& cols);  // k vectors [n] -> [n, k]
Var rows_of(Var v, int m);                     // [k] -> [m, k], every row = v
Var cols_of(Var v, int n);                     // [m] -> [m, n], every col = v
Var repeat_mat(Var a, int times);              // [p, q] -> [times*p, q]
Var slice_cols(Var a, int c0, int w);
Var gather_rows(Var a, std::vector<int> idx);
Var gather_elems(Var v, std::vector<int> idx);
Var scatter_rows_add(Var a, std::vector<int> idx, Var delta);
Var add_rowvec(Var a, Var v);
Var mul_rowvec(Var a, Var v);
// Scatters parts into one vector [n]; indices must cover 0..n-1 exactly once.
Var compose_vector(const std::vector<std::pair<Var, std::vector<int>>>& parts, int n);

// ---- fused blocks ----
// Per-row attention: out[i] = sum_j softmax_j(<Q[i], K[j]> / sqrt(d)) V[j]
// with j ranging over ranges[i] = [start, end) into K/V rows.
Var attn_qkv(Var q, Var k, Var v, std::vector<std::pair<int, int>> ranges);

// Relative pose 5-tuple (dx, dy, sin dtheta, cos dtheta, dist) of each frame b
// expressed in each frame a; rows a-major: row = ia * nb + ib.
Var pairpose_cross(Var xa, Var ya, Var tha, Var xb, Var yb, Var thb);

// Row i holds the relative pose of frame b_i expressed in frame a_i
// (elementwise pairing, [n] inputs -> [n, 5]).
Var pairpose_pair(Var xa, Var ya, Var tha, Var xb, Var yb, Var thb);

// Min distance over the 5x5 circle-center pairs of every actor pair, as an
// [N, N] matrix. offsets[i][p] is circle p's longitudinal offset from the
// rear axle of actor i. Diagonal entries are 0 (own circles); mask them out.
Var circle_pair_min_dist(Var x, Var y, Var th,
                         const std::vector<std::array<double, 5>>& offsets);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator*(Var a, double c) { return mul_scalar(a, c); }
inline Var operator*(double c, Var a) { return mul_scalar(a, c); }
inline Var operator-(Var a) { return neg(a); }

}  // namespace selfplay::ad
