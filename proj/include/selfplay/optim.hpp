#pragma once

#include <map>
#include <string>
#include <vector>

#include "selfplay/params.hpp"
#include "selfplay/tensor.hpp"

namespace selfplay {

// Scales all gradients so the global L2 norm is at most max_norm (no-op when
// already within, or max_norm <= 0). Returns the pre-clip norm.
double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm);

// Learning rate at a 0-based step: linear ramp 0 -> lr_peak over the warmup
// steps (lr_at(0) == 0, lr_at(warmup) == lr_peak), then cosine lr_peak -> 0
// reaching exactly 0 at step == total.
double lr_at(int step, int total, int warmup, double lr_peak);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled: p -= lr * wd * p
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // One update in-place at the given learning rate. Parameters missing from
  // `grads` get a zero gradient (moments still decay). Moment buffers are
  // allocated lazily on first update, keyed by parameter name.
  void update(ParamStore& params, const std::map<std::string, Tensor>& grads, double lr);

  int64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  // Moment state flattened in sorted-name order: all m, then all v.
  std::vector<double> state_blob() const;
  void load_state_blob(const ParamStore& params, const std::vector<double>& blob, int64_t t);

 private:
  AdamWConfig cfg_;
  std::map<std::string, Tensor> m_, v_;
  int64_t t_ = 0;
};

}  // namespace selfplay
