#include "selfplay/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "selfplay/geom.hpp"

namespace selfplay::ad {

namespace {

[[noreturn]] void shape_error(const char* op, const Tensor& a) {
  throw std::invalid_argument(std::string(op) + ": bad shape " + a.shape_str());
}

[[noreturn]] void shape_error2(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                              b.shape_str());
}

Tape* same_tape(Var a, Var b) {
  if (!a.valid() || !b.valid() || a.tape != b.tape) {
    throw std::invalid_argument("operands must live on one tape");
  }
  return a.tape;
}

void check_valid(Var a) {
  if (!a.valid()) throw std::invalid_argument("invalid tape handle");
}

void accum_all(Tensor& dst, const Tensor& g, double scale) {
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += scale * g.data[i];
}

}  // namespace

Var Tape::leaf(Tensor value, std::string name) {
  Node n;
  n.value = std::move(value);
  n.op = "leaf";
  n.name = std::move(name);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return {static_cast<int32_t>(nodes_.size() - 1), this};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.op = "const";
  n.needs_grad = false;
  nodes_.push_back(std::move(n));
  return {static_cast<int32_t>(nodes_.size() - 1), this};
}

Var Tape::emit(Tensor value, std::vector<int32_t> parents, BackwardFn fn, const char* op) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  for (const int32_t p : parents) {
    if (nodes_[static_cast<size_t>(p)].needs_grad) {
      n.needs_grad = true;
      break;
    }
  }
  if (n.needs_grad) {
    n.parents = std::move(parents);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {static_cast<int32_t>(nodes_.size() - 1), this};
}

Tensor& Tape::grad_buf(int32_t id) {
  Tensor& g = grads_[static_cast<size_t>(id)];
  if (g.data.empty()) {
    const Tensor& v = nodes_[static_cast<size_t>(id)].value;
    g.shape = v.shape;
    g.data.assign(v.data.size(), 0.0);
  }
  return g;
}

void Tape::backward(Var loss) {
  check_valid(loss);
  if (loss.tape != this) throw std::invalid_argument("loss from another tape");
  const Tensor& lv = value(loss);
  if (lv.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  if (!std::isfinite(lv.data[0])) {
    for (size_t i = 0; i <= static_cast<size_t>(loss.id); ++i) {
      if (!nodes_[i].value.all_finite()) {
        throw std::runtime_error("non-finite loss; first non-finite intermediate: node " +
                                 std::to_string(i) + " (" + nodes_[i].op + ")");
      }
    }
    throw std::runtime_error("non-finite loss");
  }

  grads_.clear();
  grads_.resize(nodes_.size());

  std::vector<uint8_t> reachable(static_cast<size_t>(loss.id) + 1, 0);
  std::vector<int32_t> stack{loss.id};
  reachable[static_cast<size_t>(loss.id)] = 1;
  while (!stack.empty()) {
    const int32_t id = stack.back();
    stack.pop_back();
    for (const int32_t p : nodes_[static_cast<size_t>(id)].parents) {
      if (!reachable[static_cast<size_t>(p)] && nodes_[static_cast<size_t>(p)].needs_grad) {
        reachable[static_cast<size_t>(p)] = 1;
        stack.push_back(p);
      }
    }
  }

  grad_buf(loss.id).data[0] = 1.0;
  for (int32_t id = loss.id; id >= 0; --id) {
    if (!reachable[static_cast<size_t>(id)]) continue;
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.backward && grad_written(id)) n.backward(*this, id);
  }
}

Tensor Tape::grad_of(Var v) const {
  check_valid(v);
  if (grad_written(v.id)) return grads_[static_cast<size_t>(v.id)];
  Tensor zero;
  const Tensor& val = value(v);
  zero.shape = val.shape;
  zero.data.assign(val.data.size(), 0.0);
  return zero;
}

void Tape::reset() {
  nodes_.clear();
  grads_.clear();
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

template <typename Fwd, typename Bwd>
Var unary_ew(Var a, const char* op, Fwd fwd, Bwd dgrad) {
  check_valid(a);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  Tensor out = av;
  for (double& v : out.data) v = fwd(v);
  const int32_t pa = a.id;
  return t.emit(std::move(out), {pa},
                [pa, dgrad](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  const Tensor& x = tp.value(pa);
                  Tensor& ga = tp.grad_buf(pa);
                  for (size_t i = 0; i < g.data.size(); ++i) {
                    ga.data[i] += g.data[i] * dgrad(x.data[i]);
                  }
                },
                op);
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = *same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) shape_error2("add", av, bv);
  Tensor out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  const int32_t pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb},
                [pa, pb](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  if (tp.needs_grad(pa)) accum_all(tp.grad_buf(pa), g, 1.0);
                  if (tp.needs_grad(pb)) accum_all(tp.grad_buf(pb), g, 1.0);
                },
                "add");
}

Var sub(Var a, Var b) {
  Tape& t = *same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) shape_error2("sub", av, bv);
  Tensor out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
  const int32_t pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb},
                [pa, pb](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  if (tp.needs_grad(pa)) accum_all(tp.grad_buf(pa), g, 1.0);
                  if (tp.needs_grad(pb)) accum_all(tp.grad_buf(pb), g, -1.0);
                },
                "sub");
}

Var mul(Var a, Var b) {
  Tape& t = *same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) shape_error2("mul", av, bv);
  Tensor out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  const int32_t pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb},
                [pa, pb](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  const Tensor& x = tp.value(pa);
                  const Tensor& y = tp.value(pb);
                  if (tp.needs_grad(pa)) {
                    Tensor& ga = tp.grad_buf(pa);
                    for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * y.data[i];
                  }
                  if (tp.needs_grad(pb)) {
                    Tensor& gb = tp.grad_buf(pb);
                    for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * x.data[i];
                  }
                },
                "mul");
}

Var divide(Var a, Var b) {
  Tape& t = *same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) shape_error2("div", av, bv);
  Tensor out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] /= bv.data[i];
  const int32_t pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb},
                [pa, pb](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  const Tensor& x = tp.value(pa);
                  const Tensor& y = tp.value(pb);
                  if (tp.needs_grad(pa)) {
                    Tensor& ga = tp.grad_buf(pa);
                    for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / y.data[i];
                  }
                  if (tp.needs_grad(pb)) {
                    Tensor& gb = tp.grad_buf(pb);
                    for (size_t i = 0; i < g.data.size(); ++i) {
                      gb.data[i] -= g.data[i] * x.data[i] / (y.data[i] * y.data[i]);
                    }
                  }
                },
                "div");
}

Var neg(Var a) {
  return unary_ew(a, "neg", [](double v) { return -v; }, [](double) { return -1.0; });
}

Var add_scalar(Var a, double c) {
  return unary_ew(a, "add_scalar", [c](double v) { return v + c; }, [](double) { return 1.0; });
}

Var mul_scalar(Var a, double c) {
  return unary_ew(a, "mul_scalar", [c](double v) { return v * c; }, [c](double) { return c; });
}

Var vsin(Var a) {
  return unary_ew(a, "sin", [](double v) { return std::sin(v); },
                  [](double v) { return std::cos(v); });
}

Var vcos(Var a) {
  return unary_ew(a, "cos", [](double v) { return std::cos(v); },
                  [](double v) { return -std::sin(v); });
}

Var vtan(Var a) {
  return unary_ew(a, "tan", [](double v) { return std::tan(v); },
                  [](double v) {
                    const double c = std::cos(v);
                    return 1.0 / (c * c);
                  });
}

Var vsqrt(Var a) {
  return unary_ew(a, "sqrt", [](double v) { return std::sqrt(v); },
                  [](double v) { return v > 0.0 ? 0.5 / std::sqrt(v) : 0.0; });
}

Var vexp(Var a) {
  return unary_ew(a, "exp", [](double v) { return std::exp(v); },
                  [](double v) { return std::exp(v); });
}

Var vlog(Var a) {
  return unary_ew(a, "log", [](double v) { return std::log(v); },
                  [](double v) { return 1.0 / v; });
}

Var vtanh(Var a) {
  return unary_ew(a, "tanh", [](double v) { return std::tanh(v); },
                  [](double v) {
                    const double th = std::tanh(v);
                    return 1.0 - th * th;
                  });
}

Var relu(Var a) {
  return unary_ew(a, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
                  [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var clamp(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return unary_ew(a, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
                  [lo, hi](double v) { return v > lo && v < hi ? 1.0 : 0.0; });
}

Var wrap_angle_op(Var a) {
  return unary_ew(a, "wrap_angle", [](double v) { return wrap_angle(v); },
                  [](double) { return 1.0; });
}

Var minimum(Var a, Var b) {
  Tape& t = *same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) shape_error2("minimum", av, bv);
  Tensor out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::min(av.data[i], bv.data[i]);
  const int32_t pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb},
                [pa, pb](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  const Tensor& x = tp.value(pa);
                  const Tensor& y = tp.value(pb);
                  for (size_t i = 0; i < g.data.size(); ++i) {
                    if (x.data[i] < y.data[i]) {
                      if (tp.needs_grad(pa)) tp.grad_buf(pa).data[i] += g.data[i];
                    } else if (y.data[i] < x.data[i]) {
                      if (tp.needs_grad(pb)) tp.grad_buf(pb).data[i] += g.data[i];
                    }
                  }
                },
                "minimum");
}

Var maximum(Var a, Var b) {
  Tape& t = *same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) shape_error2("maximum", av, bv);
  Tensor out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::max(av.data[i], bv.data[i]);
  const int32_t pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb},
                [pa, pb](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  const Tensor& x = tp.value(pa);
                  const Tensor& y = tp.value(pb);
                  for (size_t i = 0; i < g.data.size(); ++i) {
                    if (x.data[i] > y.data[i]) {
                      if (tp.needs_grad(pa)) tp.grad_buf(pa).data[i] += g.data[i];
                    } else if (y.data[i] > x.data[i]) {
                      if (tp.needs_grad(pb)) tp.grad_buf(pb).data[i] += g.data[i];
                    }
                  }
                },
                "maximum");
}

Var huber(Var a, Var b, double delta) {
  if (delta <= 0.0) throw std::invalid_argument("huber: delta must be positive");
  Tape& t = *same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) shape_error2("huber", av, bv);
  Tensor out = av;
  for (size_t i = 0; i < out.data.size(); ++i) {
    const double d = av.data[i] - bv.data[i];
    const double ad = std::abs(d);
    out.data[i] = ad <= delta ? 0.5 * d * d : delta * (ad - 0.5 * delta);
  }
  const int32_t pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb},
                [pa, pb, delta](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  const Tensor& x = tp.value(pa);
                  const Tensor& y = tp.value(pb);
                  for (size_t i = 0; i < g.data.size(); ++i) {
                    const double d = std::clamp(x.data[i] - y.data[i], -delta, delta);
                    if (tp.needs_grad(pa)) tp.grad_buf(pa).data[i] += g.data[i] * d;
                    if (tp.needs_grad(pb)) tp.grad_buf(pb).data[i] -= g.data[i] * d;
                  }
                },
                "huber");
}

// ---------------------------------------------------------------------------
// Reductions and linear algebra

Var sum_all(Var a) {
  check_valid(a);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  double s = 0.0;
  for (const double v : av.data) s += v;
  const int32_t pa = a.id;
  return t.emit(Tensor::scalar(s), {pa},
                [pa](Tape& tp, int32_t self) {
                  const double g = tp.grad_buf(self).data[0];
                  Tensor& ga = tp.grad_buf(pa);
                  for (double& v : ga.data) v += g;
                },
                "sum_all");
}

Var mean_all(Var a) {
  check_valid(a);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.data.empty()) throw std::invalid_argument("mean_all: empty tensor");
  double s = 0.0;
  for (const double v : av.data) s += v;
  const double inv = 1.0 / static_cast<double>(av.data.size());
  const int32_t pa = a.id;
  return t.emit(Tensor::scalar(s * inv), {pa},
                [pa, inv](Tape& tp, int32_t self) {
                  const double g = tp.grad_buf(self).data[0] * inv;
                  Tensor& ga = tp.grad_buf(pa);
                  for (double& v : ga.data) v += g;
                },
                "mean_all");
}

Var matmul(Var a, Var b) {
  Tape& t = *same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.shape.size() != 2 || bv.shape.size() != 2 || av.shape[1] != bv.shape[0]) {
    shape_error2("matmul", av, bv);
  }
  const int m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double x = av.data[static_cast<size_t>(i) * k + p];
      if (x == 0.0) continue;
      const double* brow = &bv.data[static_cast<size_t>(p) * n];
      double* orow = &out.data[static_cast<size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  }
  const int32_t pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb},
                [pa, pb, m, k, n](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  const Tensor& x = tp.value(pa);
                  const Tensor& y = tp.value(pb);
                  if (tp.needs_grad(pa)) {
                    Tensor& ga = tp.grad_buf(pa);  // g @ y^T
                    for (int i = 0; i < m; ++i) {
                      for (int p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) {
                          s += g.data[static_cast<size_t>(i) * n + j] *
                               y.data[static_cast<size_t>(p) * n + j];
                        }
                        ga.data[static_cast<size_t>(i) * k + p] += s;
                      }
                    }
                  }
                  if (tp.needs_grad(pb)) {
                    Tensor& gb = tp.grad_buf(pb);  // x^T @ g
                    for (int p = 0; p < k; ++p) {
                      for (int j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (int i = 0; i < m; ++i) {
                          s += x.data[static_cast<size_t>(i) * k + p] *
                               g.data[static_cast<size_t>(i) * n + j];
                        }
                        gb.data[static_cast<size_t>(p) * n + j] += s;
                      }
                    }
                  }
                },
                "matmul");
}

Var softmax_rows(Var a) {
  check_valid(a);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const int m = av.rows(), n = av.cols();
  Tensor out = av;
  for (int i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) mx = std::max(mx, av.at(i * n + j));
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      out.data[static_cast<size_t>(i) * n + j] = std::exp(av.at(i * n + j) - mx);
      z += out.data[static_cast<size_t>(i) * n + j];
    }
    for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] /= z;
  }
  const int32_t pa = a.id;
  return t.emit(std::move(out), {pa},
                [pa, m, n](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  const Tensor& p = tp.value(self);
                  Tensor& ga = tp.grad_buf(pa);
                  for (int i = 0; i < m; ++i) {
                    double gp = 0.0;
                    for (int j = 0; j < n; ++j) {
                      gp += g.data[static_cast<size_t>(i) * n + j] *
                            p.data[static_cast<size_t>(i) * n + j];
                    }
                    for (int j = 0; j < n; ++j) {
                      const size_t k = static_cast<size_t>(i) * n + j;
                      ga.data[k] += p.data[k] * (g.data[k] - gp);
                    }
                  }
                },
                "softmax_rows");
}

Var layer_norm_rows(Var a, double eps) {
  check_valid(a);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const int m = av.rows(), n = av.cols();
  if (n < 1) shape_error("layer_norm_rows", av);
  Tensor out = av;
  for (int i = 0; i < m; ++i) {
    const double* x = &av.data[static_cast<size_t>(i) * n];
    double* y = &out.data[static_cast<size_t>(i) * n];
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += x[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) y[j] = (x[j] - mu) * inv;
  }
  const int32_t pa = a.id;
  return t.emit(std::move(out), {pa},
                [pa, m, n, eps](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  const Tensor& x = tp.value(pa);
                  Tensor& ga = tp.grad_buf(pa);
                  for (int i = 0; i < m; ++i) {
                    const double* xi = &x.data[static_cast<size_t>(i) * n];
                    const double* gi = &g.data[static_cast<size_t>(i) * n];
                    double* go = &ga.data[static_cast<size_t>(i) * n];
                    double mu = 0.0;
                    for (int j = 0; j < n; ++j) mu += xi[j];
                    mu /= n;
                    double var = 0.0;
                    for (int j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
                    var /= n;
                    const double inv = 1.0 / std::sqrt(var + eps);
                    double gmean = 0.0;
                    double gdotxhat = 0.0;
                    for (int j = 0; j < n; ++j) {
                      gmean += gi[j];
                      gdotxhat += gi[j] * (xi[j] - mu) * inv;
                    }
                    gmean /= n;
                    gdotxhat /= n;
                    for (int j = 0; j < n; ++j) {
                      const double xhat = (xi[j] - mu) * inv;
                      go[j] += inv * (gi[j] - gmean - xhat * gdotxhat);
                    }
                  }
                },
                "layer_norm_rows");
}

// ---------------------------------------------------------------------------
// Shape and assembly ops

Var reshape(Var a, std::vector<int> shape) {
  check_valid(a);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (shape_numel(shape) != av.size()) shape_error("reshape", av);
  Tensor out = av;
  out.shape = std::move(shape);
  const int32_t pa = a.id;
  return t.emit(std::move(out), {pa},
                [pa](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  accum_all(tp.grad_buf(pa), g, 1.0);
                },
                "reshape");
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  Tape& t = *parts[0].tape;
  const int m = t.value(parts[0]).rows();
  int total = 0;
  std::vector<int32_t> ids;
  std::vector<int> widths;
  for (const Var p : parts) {
    same_tape(parts[0], p);
    const Tensor& pv = t.value(p);
    if (pv.rows() != m) shape_error2("concat_cols", t.value(parts[0]), pv);
    widths.push_back(pv.cols());
    total += pv.cols();
    ids.push_back(p.id);
  }
  Tensor out = Tensor::zeros({m, total});
  int c0 = 0;
  for (size_t k = 0; k < ids.size(); ++k) {
    const Tensor& pv = t.value(ids[k]);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < widths[k]; ++j) {
        out.data[static_cast<size_t>(i) * total + c0 + j] =
            pv.data[static_cast<size_t>(i) * widths[k] + j];
      }
    }
    c0 += widths[k];
  }
  return t.emit(std::move(out), std::vector<int32_t>(ids),
                [ids, widths, m, total](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  int c0 = 0;
                  for (size_t k = 0; k < ids.size(); ++k) {
                    if (tp.needs_grad(ids[k])) {
                      Tensor& gp = tp.grad_buf(ids[k]);
                      for (int i = 0; i < m; ++i) {
                        for (int j = 0; j < widths[k]; ++j) {
                          gp.data[static_cast<size_t>(i) * widths[k] + j] +=
                              g.data[static_cast<size_t>(i) * total + c0 + j];
                        }
                      }
                    }
                    c0 += widths[k];
                  }
                },
                "concat_cols");
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Tape& t = *parts[0].tape;
  const int n = t.value(parts[0]).cols();
  int total = 0;
  std::vector<int32_t> ids;
  std::vector<int> heights;
  for (const Var p : parts) {
    same_tape(parts[0], p);
    const Tensor& pv = t.value(p);
    if (pv.cols() != n) shape_error2("concat_rows", t.value(parts[0]), pv);
    heights.push_back(pv.rows());
    total += pv.rows();
    ids.push_back(p.id);
  }
  Tensor out = Tensor::zeros({total, n});
  int r0 = 0;
  for (size_t k = 0; k < ids.size(); ++k) {
    const Tensor& pv = t.value(ids[k]);
    std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + static_cast<int64_t>(r0) * n);
    r0 += heights[k];
  }
  return t.emit(std::move(out), std::vector<int32_t>(ids),
                [ids, heights, n](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  int r0 = 0;
                  for (size_t k = 0; k < ids.size(); ++k) {
                    if (tp.needs_grad(ids[k])) {
                      Tensor& gp = tp.grad_buf(ids[k]);
                      for (size_t i = 0; i < gp.data.size(); ++i) {
                        gp.data[i] += g.data[static_cast<size_t>(r0) * n + i];
                      }
                    }
                    r0 += heights[k];
                  }
                },
                "concat_rows");
}

Var stack_cols(const std::vector<Var>& cols) {
  if (cols.empty()) throw std::invalid_argument("stack_cols: no columns");
  Tape& t = *cols[0].tape;
  const int n = static_cast<int>(t.value(cols[0]).size());
  const int k = static_cast<int>(cols.size());
  std::vector<int32_t> ids;
  for (const Var c : cols) {
    same_tape(cols[0], c);
    if (t.value(c).size() != n) shape_error2("stack_cols", t.value(cols[0]), t.value(c));
    ids.push_back(c.id);
  }
  Tensor out = Tensor::zeros({n, k});
  for (int j = 0; j < k; ++j) {
    const Tensor& cv = t.value(ids[static_cast<size_t>(j)]);
    for (int i = 0; i < n; ++i) out.data[static_cast<size_t>(i) * k + j] = cv.data[static_cast<size_t>(i)];
  }
  return t.emit(std::move(out), std::vector<int32_t>(ids),
                [ids, n, k](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  for (int j = 0; j < k; ++j) {
                    if (!tp.needs_grad(ids[static_cast<size_t>(j)])) continue;
                    Tensor& gc = tp.grad_buf(ids[static_cast<size_t>(j)]);
                    for (int i = 0; i < n; ++i) {
                      gc.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i) * k + j];
                    }
                  }
                },
                "stack_cols");
}

Var rows_of(Var v, int m) {
  check_valid(v);
  Tape& t = *v.tape;
  const Tensor& vv = t.value(v);
  const int k = static_cast<int>(vv.size());
  Tensor out = Tensor::zeros({m, k});
  for (int i = 0; i < m; ++i) {
    std::copy(vv.data.begin(), vv.data.end(), out.data.begin() + static_cast<int64_t>(i) * k);
  }
  const int32_t pv = v.id;
  return t.emit(std::move(out), {pv},
                [pv, m, k](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  Tensor& gv = tp.grad_buf(pv);
                  for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < k; ++j) {
                      gv.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i) * k + j];
                    }
                  }
                },
                "rows_of");
}

Var cols_of(Var v, int n) {
  check_valid(v);
  Tape& t = *v.tape;
  const Tensor& vv = t.value(v);
  const int m = static_cast<int>(vv.size());
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] = vv.data[static_cast<size_t>(i)];
  }
  const int32_t pv = v.id;
  return t.emit(std::move(out), {pv},
                [pv, m, n](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  Tensor& gv = tp.grad_buf(pv);
                  for (int i = 0; i < m; ++i) {
                    double s = 0.0;
                    for (int j = 0; j < n; ++j) s += g.data[static_cast<size_t>(i) * n + j];
                    gv.data[static_cast<size_t>(i)] += s;
                  }
                },
                "cols_of");
}

Var repeat_mat(Var a, int times) {
  check_valid(a);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const int p = av.rows(), q = av.cols();
  Tensor out = Tensor::zeros({p * times, q});
  for (int r = 0; r < times; ++r) {
    std::copy(av.data.begin(), av.data.end(),
              out.data.begin() + static_cast<int64_t>(r) * p * q);
  }
  const int32_t pa = a.id;
  return t.emit(std::move(out), {pa},
                [pa, p, q, times](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  Tensor& ga = tp.grad_buf(pa);
                  for (int r = 0; r < times; ++r) {
                    const size_t base = static_cast<size_t>(r) * p * q;
                    for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[base + i];
                  }
                },
                "repeat_mat");
}

Var slice_cols(Var a, int c0, int w) {
  check_valid(a);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const int m = av.rows(), n = av.cols();
  if (c0 < 0 || w < 0 || c0 + w > n) shape_error("slice_cols", av);
  Tensor out = Tensor::zeros({m, w});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < w; ++j) {
      out.data[static_cast<size_t>(i) * w + j] = av.data[static_cast<size_t>(i) * n + c0 + j];
    }
  }
  const int32_t pa = a.id;
  return t.emit(std::move(out), {pa},
                [pa, m, n, c0, w](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  Tensor& ga = tp.grad_buf(pa);
                  for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < w; ++j) {
                      ga.data[static_cast<size_t>(i) * n + c0 + j] +=
                          g.data[static_cast<size_t>(i) * w + j];
                    }
                  }
                },
                "slice_cols");
}

Var gather_rows(Var a, std::vector<int> idx) {
  check_valid(a);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const int m = av.rows(), n = av.cols();
  Tensor out = Tensor::zeros({static_cast<int>(idx.size()), n});
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= m) throw std::out_of_range("gather_rows: index");
    for (int j = 0; j < n; ++j) {
      out.data[r * n + j] = av.data[static_cast<size_t>(idx[r]) * n + j];
    }
  }
  const int32_t pa = a.id;
  return t.emit(std::move(out), {pa},
                [pa, idx, n](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  Tensor& ga = tp.grad_buf(pa);
                  for (size_t r = 0; r < idx.size(); ++r) {
                    for (int j = 0; j < n; ++j) {
                      ga.data[static_cast<size_t>(idx[r]) * n + j] += g.data[r * n + j];
                    }
                  }
                },
                "gather_rows");
}

Var gather_elems(Var v, std::vector<int> idx) {
  check_valid(v);
  Tape& t = *v.tape;
  const Tensor& vv = t.value(v);
  const int n = static_cast<int>(vv.size());
  Tensor out = Tensor::zeros({static_cast<int>(idx.size())});
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= n) throw std::out_of_range("gather_elems: index");
    out.data[r] = vv.data[static_cast<size_t>(idx[r])];
  }
  const int32_t pv = v.id;
  return t.emit(std::move(out), {pv},
                [pv, idx](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  Tensor& gv = tp.grad_buf(pv);
                  for (size_t r = 0; r < idx.size(); ++r) {
                    gv.data[static_cast<size_t>(idx[r])] += g.data[r];
                  }
                },
                "gather_elems");
}

Var scatter_rows_add(Var a, std::vector<int> idx, Var delta) {
  Tape& t = *same_tape(a, delta);
  const Tensor& av = t.value(a);
  const Tensor& dv = t.value(delta);
  const int m = av.rows(), n = av.cols();
  if (dv.cols() != n || dv.rows() != static_cast<int>(idx.size())) {
    shape_error2("scatter_rows_add", av, dv);
  }
  Tensor out = av;
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= m) throw std::out_of_range("scatter_rows_add: index");
    for (int j = 0; j < n; ++j) {
      out.data[static_cast<size_t>(idx[r]) * n + j] += dv.data[r * n + j];
    }
  }
  const int32_t pa = a.id, pd = delta.id;
  return t.emit(std::move(out), {pa, pd},
                [pa, pd, idx, n](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  if (tp.needs_grad(pa)) accum_all(tp.grad_buf(pa), g, 1.0);
                  if (tp.needs_grad(pd)) {
                    Tensor& gd = tp.grad_buf(pd);
                    for (size_t r = 0; r < idx.size(); ++r) {
                      for (int j = 0; j < n; ++j) {
                        gd.data[r * n + j] += g.data[static_cast<size_t>(idx[r]) * n + j];
                      }
                    }
                  }
                },
                "scatter_rows_add");
}

Var add_rowvec(Var a, Var v) {
  Tape& t = *same_tape(a, v);
  const Tensor& av = t.value(a);
  const Tensor& vv = t.value(v);
  const int m = av.rows(), n = av.cols();
  if (static_cast<int>(vv.size()) != n) shape_error2("add_rowvec", av, vv);
  Tensor out = av;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] += vv.data[static_cast<size_t>(j)];
  }
  const int32_t pa = a.id, pv = v.id;
  return t.emit(std::move(out), {pa, pv},
                [pa, pv, m, n](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  if (tp.needs_grad(pa)) accum_all(tp.grad_buf(pa), g, 1.0);
                  if (tp.needs_grad(pv)) {
                    Tensor& gv = tp.grad_buf(pv);
                    for (int i = 0; i < m; ++i) {
                      for (int j = 0; j < n; ++j) {
                        gv.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i) * n + j];
                      }
                    }
                  }
                },
                "add_rowvec");
}

Var mul_rowvec(Var a, Var v) {
  Tape& t = *same_tape(a, v);
  const Tensor& av = t.value(a);
  const Tensor& vv = t.value(v);
  const int m = av.rows(), n = av.cols();
  if (static_cast<int>(vv.size()) != n) shape_error2("mul_rowvec", av, vv);
  Tensor out = av;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] *= vv.data[static_cast<size_t>(j)];
  }
  const int32_t pa = a.id, pv = v.id;
  return t.emit(std::move(out), {pa, pv},
                [pa, pv, m, n](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  const Tensor& x = tp.value(pa);
                  const Tensor& w = tp.value(pv);
                  if (tp.needs_grad(pa)) {
                    Tensor& ga = tp.grad_buf(pa);
                    for (int i = 0; i < m; ++i) {
                      for (int j = 0; j < n; ++j) {
                        ga.data[static_cast<size_t>(i) * n + j] +=
                            g.data[static_cast<size_t>(i) * n + j] * w.data[static_cast<size_t>(j)];
                      }
                    }
                  }
                  if (tp.needs_grad(pv)) {
                    Tensor& gv = tp.grad_buf(pv);
                    for (int i = 0; i < m; ++i) {
                      for (int j = 0; j < n; ++j) {
                        gv.data[static_cast<size_t>(j)] +=
                            g.data[static_cast<size_t>(i) * n + j] *
                            x.data[static_cast<size_t>(i) * n + j];
                      }
                    }
                  }
                },
                "mul_rowvec");
}

Var compose_vector(const std::vector<std::pair<Var, std::vector<int>>>& parts, int n) {
  if (parts.empty()) throw std::invalid_argument("compose_vector: no parts");
  Tape& t = *parts[0].first.tape;
  Tensor out = Tensor::zeros({n});
  std::vector<uint8_t> seen(static_cast<size_t>(n), 0);
  std::vector<int32_t> ids;
  std::vector<std::vector<int>> all_idx;
  for (const auto& [var, idx] : parts) {
    same_tape(parts[0].first, var);
    const Tensor& vv = t.value(var);
    if (static_cast<int>(vv.size()) != static_cast<int>(idx.size())) shape_error("compose_vector", vv);
    for (size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0 || idx[r] >= n || seen[static_cast<size_t>(idx[r])]) {
        throw std::invalid_argument("compose_vector: indices must cover targets exactly once");
      }
      seen[static_cast<size_t>(idx[r])] = 1;
      out.data[static_cast<size_t>(idx[r])] = vv.data[r];
    }
    ids.push_back(var.id);
    all_idx.push_back(idx);
  }
  for (const uint8_t s : seen) {
    if (!s) throw std::invalid_argument("compose_vector: uncovered target index");
  }
  return t.emit(std::move(out), std::vector<int32_t>(ids),
                [ids, all_idx](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  for (size_t k = 0; k < ids.size(); ++k) {
                    if (!tp.needs_grad(ids[k])) continue;
                    Tensor& gv = tp.grad_buf(ids[k]);
                    for (size_t r = 0; r < all_idx[k].size(); ++r) {
                      gv.data[r] += g.data[static_cast<size_t>(all_idx[k][r])];
                    }
                  }
                },
                "compose_vector");
}

// ---------------------------------------------------------------------------
// Fused blocks

Var attn_qkv(Var q, Var k, Var v, std::vector<std::pair<int, int>> ranges) {
  Tape& t = *same_tape(q, k);
  same_tape(q, v);
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  const Tensor& vv = t.value(v);
  const int gq = qv.rows(), d = qv.cols(), mkv = kv.rows();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != mkv) shape_error2("attn_qkv", kv, vv);
  if (static_cast<int>(ranges.size()) != gq) throw std::invalid_argument("attn_qkv: ranges size");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor out = Tensor::zeros({gq, d});
  // Weights cached for the backward pass, flattened group-major.
  std::vector<double> weights;
  weights.reserve(static_cast<size_t>(gq) * 4);
  for (int i = 0; i < gq; ++i) {
    const auto [s, e] = ranges[static_cast<size_t>(i)];
    if (s < 0 || e > mkv || s >= e) throw std::invalid_argument("attn_qkv: bad range");
    const double* qi = &qv.data[static_cast<size_t>(i) * d];
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> sc(static_cast<size_t>(e - s));
    for (int j = s; j < e; ++j) {
      double dotqk = 0.0;
      const double* kj = &kv.data[static_cast<size_t>(j) * d];
      for (int c = 0; c < d; ++c) dotqk += qi[c] * kj[c];
      sc[static_cast<size_t>(j - s)] = dotqk * inv_sqrt_d;
      mx = std::max(mx, sc[static_cast<size_t>(j - s)]);
    }
    double z = 0.0;
    for (double& x : sc) {
      x = std::exp(x - mx);
      z += x;
    }
    double* oi = &out.data[static_cast<size_t>(i) * d];
    for (int j = s; j < e; ++j) {
      const double w = sc[static_cast<size_t>(j - s)] / z;
      weights.push_back(w);
      const double* vj = &vv.data[static_cast<size_t>(j) * d];
      for (int c = 0; c < d; ++c) oi[c] += w * vj[c];
    }
  }

  const int32_t pq = q.id, pk = k.id, pv = v.id;
  return t.emit(std::move(out), {pq, pk, pv},
                [pq, pk, pv, ranges, weights, d, inv_sqrt_d](Tape& tp, int32_t self) {
                  const Tensor& g = tp.grad_buf(self);
                  const Tensor& qv = tp.value(pq);
                  const Tensor& kv = tp.value(pk);
                  const Tensor& vv = tp.value(pv);
                  const bool nq = tp.needs_grad(pq), nk = tp.needs_grad(pk), nv = tp.needs_grad(pv);
                  size_t wofs = 0;
                  for (size_t i = 0; i < ranges.size(); ++i) {
                    const auto [s, e] = ranges[i];
                    const int cnt = e - s;
                    const double* gi = &g.data[i * static_cast<size_t>(d)];
                    const double* qi = &qv.data[i * static_cast<size_t>(d)];
                    const double* w = &weights[wofs];
                    // dw_j = <g_i, V_j>; ds_j = w_j (dw_j - sum_k w_k dw_k)
                    std::vector<double> dw(static_cast<size_t>(cnt));
                    double wdot = 0.0;
                    for (int j = 0; j < cnt; ++j) {
                      const double* vj = &vv.data[static_cast<size_t>(s + j) * d];
                      double acc = 0.0;
                      for (int c = 0; c < d; ++c) acc += gi[c] * vj[c];
                      dw[static_cast<size_t>(j)] = acc;
                      wdot += w[j] * acc;
                    }
                    for (int j = 0; j < cnt; ++j) {
                      const double ds = w[j] * (dw[static_cast<size_t>(j)] - wdot) * inv_sqrt_d;
                      const double* kj = &kv.data[static_cast<size_t>(s + j) * d];
                      if (nv) {
                        double* gvj = &tp.grad_buf(pv).data[static_cast<size_t>(s + j) * d];
                        for (int c = 0; c < d; ++c) gvj[c] += w[j] * gi[c];
                      }
                      if (nq) {
                        double* gqi = &tp.grad_buf(pq).data[i * static_cast<size_t>(d)];
                        for (int c = 0; c < d; ++c) gqi[c] += ds * kj[c];
                      }
                      if (nk) {
                        double* gkj = &tp.grad_buf(pk).data[static_cast<size_t>(s + j) * d];
                        for (int c = 0; c < d; ++c) gkj[c] += ds * qi[c];
                      }
                    }
                    wofs += static_cast<size_t>(cnt);
                  }
                },
                "attn_qkv");
}

Var pairpose_cross(Var xa, Var ya, Var tha, Var xb, Var yb, Var thb) {
  Tape& t = *same_tape(xa, ya);
  same_tape(xa, tha);
  same_tape(xa, xb);
  same_tape(xa, yb);
  same_tape(xa, thb);
  const int na = static_cast<int>(t.value(xa).size());
  const int nb = static_cast<int>(t.value(xb).size());
  if (static_cast<int>(t.value(ya).size()) != na || static_cast<int>(t.value(tha).size()) != na ||
      static_cast<int>(t.value(yb).size()) != nb || static_cast<int>(t.value(thb).size()) != nb) {
    throw std::invalid_argument("pairpose_cross: pose component sizes differ");
  }
  const Tensor& XA = t.value(xa);
  const Tensor& YA = t.value(ya);
  const Tensor& TA = t.value(tha);
  const Tensor& XB = t.value(xb);
  const Tensor& YB = t.value(yb);
  const Tensor& TB = t.value(thb);

  Tensor out = Tensor::zeros({na * nb, 5});
  for (int i = 0; i < na; ++i) {
    const double c = std::cos(TA.data[static_cast<size_t>(i)]);
    const double s = std::sin(TA.data[static_cast<size_t>(i)]);
    for (int j = 0; j < nb; ++j) {
      const double u = XB.data[static_cast<size_t>(j)] - XA.data[static_cast<size_t>(i)];
      const double v = YB.data[static_cast<size_t>(j)] - YA.data[static_cast<size_t>(i)];
      const double dth = TB.data[static_cast<size_t>(j)] - TA.data[static_cast<size_t>(i)];
      double* row = &out.data[(static_cast<size_t>(i) * nb + j) * 5];
      row[0] = c * u + s * v;
      row[1] = -s * u + c * v;
      row[2] = std::sin(dth);
      row[3] = std::cos(dth);
      row[4] = std::hypot(row[0], row[1]);
    }
  }

  const int32_t pxa = xa.id, pya = ya.id, ptha = tha.id;
  const int32_t pxb = xb.id, pyb = yb.id, pthb = thb.id;
  return t.emit(
      std::move(out), {pxa, pya, ptha, pxb, pyb, pthb},
      [pxa, pya, ptha, pxb, pyb, pthb, na, nb](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_buf(self);
        const Tensor& val = tp.value(self);
        const Tensor& TA = tp.value(ptha);
        const bool need_a =
            tp.needs_grad(pxa) || tp.needs_grad(pya) || tp.needs_grad(ptha);
        const bool need_b =
            tp.needs_grad(pxb) || tp.needs_grad(pyb) || tp.needs_grad(pthb);
        if (!need_a && !need_b) return;
        for (int i = 0; i < na; ++i) {
          const double c = std::cos(TA.data[static_cast<size_t>(i)]);
          const double s = std::sin(TA.data[static_cast<size_t>(i)]);
          for (int j = 0; j < nb; ++j) {
            const size_t r = (static_cast<size_t>(i) * nb + j) * 5;
            const double dx = val.data[r], dy = val.data[r + 1];
            const double sth = val.data[r + 2], cth = val.data[r + 3], dist = val.data[r + 4];
            double gdx = g.data[r], gdy = g.data[r + 1];
            const double gsth = g.data[r + 2], gcth = g.data[r + 3], gdist = g.data[r + 4];
            if (dist > 0.0) {
              gdx += gdist * dx / dist;
              gdy += gdist * dy / dist;
            }
            // dx = c u + s v, dy = -s u + c v
            const double gu = gdx * c - gdy * s;
            const double gv = gdx * s + gdy * c;
            const double gdth = gsth * cth - gcth * sth;
            if (need_b) {
              if (tp.needs_grad(pxb)) tp.grad_buf(pxb).data[static_cast<size_t>(j)] += gu;
              if (tp.needs_grad(pyb)) tp.grad_buf(pyb).data[static_cast<size_t>(j)] += gv;
              if (tp.needs_grad(pthb)) tp.grad_buf(pthb).data[static_cast<size_t>(j)] += gdth;
            }
            if (need_a) {
              if (tp.needs_grad(pxa)) tp.grad_buf(pxa).data[static_cast<size_t>(i)] -= gu;
              if (tp.needs_grad(pya)) tp.grad_buf(pya).data[static_cast<size_t>(i)] -= gv;
              if (tp.needs_grad(ptha)) {
                // d(dx)/dth_a = dy, d(dy)/dth_a = -dx
                tp.grad_buf(ptha).data[static_cast<size_t>(i)] += gdx * dy - gdy * dx - gdth;
              }
            }
          }
        }
      },
      "pairpose_cross");
}

Var pairpose_pair(Var xa, Var ya, Var tha, Var xb, Var yb, Var thb) {
  Tape& t = *same_tape(xa, ya);
  same_tape(xa, tha);
  same_tape(xa, xb);
  same_tape(xa, yb);
  same_tape(xa, thb);
  const int n = static_cast<int>(t.value(xa).size());
  if (static_cast<int>(t.value(ya).size()) != n || static_cast<int>(t.value(tha).size()) != n ||
      static_cast<int>(t.value(xb).size()) != n || static_cast<int>(t.value(yb).size()) != n ||
      static_cast<int>(t.value(thb).size()) != n) {
    throw std::invalid_argument("pairpose_pair: pose component sizes differ");
  }
  const Tensor& XA = t.value(xa);
  const Tensor& YA = t.value(ya);
  const Tensor& TA = t.value(tha);
  const Tensor& XB = t.value(xb);
  const Tensor& YB = t.value(yb);
  const Tensor& TB = t.value(thb);

  Tensor out = Tensor::zeros({n, 5});
  for (int i = 0; i < n; ++i) {
    const size_t si = static_cast<size_t>(i);
    const double c = std::cos(TA.data[si]);
    const double s = std::sin(TA.data[si]);
    const double u = XB.data[si] - XA.data[si];
    const double v = YB.data[si] - YA.data[si];
    const double dth = TB.data[si] - TA.data[si];
    double* row = &out.data[si * 5];
    row[0] = c * u + s * v;
    row[1] = -s * u + c * v;
    row[2] = std::sin(dth);
    row[3] = std::cos(dth);
    row[4] = std::hypot(row[0], row[1]);
  }

  const int32_t pxa = xa.id, pya = ya.id, ptha = tha.id;
  const int32_t pxb = xb.id, pyb = yb.id, pthb = thb.id;
  return t.emit(
      std::move(out), {pxa, pya, ptha, pxb, pyb, pthb},
      [pxa, pya, ptha, pxb, pyb, pthb, n](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_buf(self);
        const Tensor& val = tp.value(self);
        const Tensor& TA = tp.value(ptha);
        for (int i = 0; i < n; ++i) {
          const size_t si = static_cast<size_t>(i);
          const double c = std::cos(TA.data[si]);
          const double s = std::sin(TA.data[si]);
          const size_t r = si * 5;
          const double dx = val.data[r], dy = val.data[r + 1];
          const double sth = val.data[r + 2], cth = val.data[r + 3], dist = val.data[r + 4];
          double gdx = g.data[r], gdy = g.data[r + 1];
          const double gsth = g.data[r + 2], gcth = g.data[r + 3], gdist = g.data[r + 4];
          if (dist > 0.0) {
            gdx += gdist * dx / dist;
            gdy += gdist * dy / dist;
          }
          const double gu = gdx * c - gdy * s;
          const double gv = gdx * s + gdy * c;
          const double gdth = gsth * cth - gcth * sth;
          if (tp.needs_grad(pxb)) tp.grad_buf(pxb).data[si] += gu;
          if (tp.needs_grad(pyb)) tp.grad_buf(pyb).data[si] += gv;
          if (tp.needs_grad(pthb)) tp.grad_buf(pthb).data[si] += gdth;
          if (tp.needs_grad(pxa)) tp.grad_buf(pxa).data[si] -= gu;
          if (tp.needs_grad(pya)) tp.grad_buf(pya).data[si] -= gv;
          if (tp.needs_grad(ptha)) {
            tp.grad_buf(ptha).data[si] += gdx * dy - gdy * dx - gdth;
          }
        }
      },
      "pairpose_pair");
}

Var circle_pair_min_dist(Var x, Var y, Var th,
                         const std::vector<std::array<double, 5>>& offsets) {
  Tape& t = *same_tape(x, y);
  same_tape(x, th);
  const Tensor& X = t.value(x);
  const Tensor& Y = t.value(y);
  const Tensor& TH = t.value(th);
  const int n = static_cast<int>(X.size());
  if (static_cast<int>(offsets.size()) != n || static_cast<int>(Y.size()) != n ||
      static_cast<int>(TH.size()) != n) {
    throw std::invalid_argument("circle_pair_min_dist: size mismatch");
  }

  Tensor out = Tensor::zeros({n, n});
  std::vector<uint8_t> argp(static_cast<size_t>(n) * n), argq(static_cast<size_t>(n) * n);
  std::vector<double> cs(static_cast<size_t>(n)), sn(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    cs[static_cast<size_t>(i)] = std::cos(TH.data[static_cast<size_t>(i)]);
    sn[static_cast<size_t>(i)] = std::sin(TH.data[static_cast<size_t>(i)]);
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double best = std::numeric_limits<double>::infinity();
      uint8_t bp = 0, bq = 0;
      for (uint8_t p = 0; p < 5; ++p) {
        const double ax = X.data[static_cast<size_t>(i)] + offsets[static_cast<size_t>(i)][p] * cs[static_cast<size_t>(i)];
        const double ay = Y.data[static_cast<size_t>(i)] + offsets[static_cast<size_t>(i)][p] * sn[static_cast<size_t>(i)];
        for (uint8_t q = 0; q < 5; ++q) {
          const double bx = X.data[static_cast<size_t>(j)] + offsets[static_cast<size_t>(j)][q] * cs[static_cast<size_t>(j)];
          const double by = Y.data[static_cast<size_t>(j)] + offsets[static_cast<size_t>(j)][q] * sn[static_cast<size_t>(j)];
          const double d = std::hypot(bx - ax, by - ay);
          if (d < best) {
            best = d;
            bp = p;
            bq = q;
          }
        }
      }
      out.data[static_cast<size_t>(i) * n + j] = best;
      argp[static_cast<size_t>(i) * n + j] = bp;
      argq[static_cast<size_t>(i) * n + j] = bq;
    }
  }

  const int32_t px = x.id, py = y.id, pth = th.id;
  return t.emit(
      std::move(out), {px, py, pth},
      [px, py, pth, offsets, argp, argq, n](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_buf(self);
        const Tensor& X = tp.value(px);
        const Tensor& Y = tp.value(py);
        const Tensor& TH = tp.value(pth);
        const Tensor& D = tp.value(self);
        Tensor& gx = tp.grad_buf(px);
        Tensor& gy = tp.grad_buf(py);
        Tensor& gth = tp.grad_buf(pth);
        for (int i = 0; i < n; ++i) {
          const double ci = std::cos(TH.data[static_cast<size_t>(i)]);
          const double si = std::sin(TH.data[static_cast<size_t>(i)]);
          for (int j = 0; j < n; ++j) {
            const size_t cell = static_cast<size_t>(i) * n + j;
            const double gc = g.data[cell];
            if (gc == 0.0) continue;
            const double d = D.data[cell];
            if (d <= 0.0) continue;  // coincident centers: subgradient 0
            const double op = offsets[static_cast<size_t>(i)][argp[cell]];
            const double oq = offsets[static_cast<size_t>(j)][argq[cell]];
            const double cj = std::cos(TH.data[static_cast<size_t>(j)]);
            const double sj = std::sin(TH.data[static_cast<size_t>(j)]);
            const double ax = X.data[static_cast<size_t>(i)] + op * ci;
            const double ay = Y.data[static_cast<size_t>(i)] + op * si;
            const double bx = X.data[static_cast<size_t>(j)] + oq * cj;
            const double by = Y.data[static_cast<size_t>(j)] + oq * sj;
            const double ux = (bx - ax) / d, uy = (by - ay) / d;
            gx.data[static_cast<size_t>(j)] += gc * ux;
            gy.data[static_cast<size_t>(j)] += gc * uy;
            gth.data[static_cast<size_t>(j)] += gc * (ux * (-oq * sj) + uy * (oq * cj));
            gx.data[static_cast<size_t>(i)] -= gc * ux;
            gy.data[static_cast<size_t>(i)] -= gc * uy;
            gth.data[static_cast<size_t>(i)] -= gc * (ux * (-op * si) + uy * (op * ci));
          }
        }
      },
      "circle_pair_min_dist");
}

}  // namespace selfplay::ad
