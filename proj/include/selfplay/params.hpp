#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "selfplay/rng.hpp"
#include "selfplay/tape.hpp"
#include "selfplay/tensor.hpp"

namespace selfplay {

// Named parameter tensors. All iteration (flattening, mounting, updates) runs
// in sorted-name order so every consumer sees one deterministic layout.
class ParamStore {
 public:
  Tensor& create(const std::string& name, std::vector<int> shape);
  bool has(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  std::vector<std::string> names() const;  // sorted
  size_t count() const { return params_.size(); }
  int64_t numel() const;

  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);
  std::map<std::string, std::vector<int>> shapes() const;

  // Same names, same shapes, elementwise equal values.
  bool equals(const ParamStore& other) const;

  const std::map<std::string, Tensor>& raw() const { return params_; }
  std::map<std::string, Tensor>& raw() { return params_; }

 private:
  std::map<std::string, Tensor> params_;
};

// Parameters mounted on a tape, as leaves (trainable) or constants (frozen).
// Leaves keep the store's values; gradients are read back per name.
class MountedParams {
 public:
  MountedParams() = default;
  MountedParams(ad::Tape& tape, const ParamStore& store, bool trainable);

  ad::Var at(const std::string& name) const;
  bool has(const std::string& name) const { return vars_.count(name) != 0; }
  bool trainable() const { return trainable_; }

  // Gradients after tape.backward(), keyed by parameter name.
  std::map<std::string, Tensor> grads() const;

 private:
  ad::Tape* tape_ = nullptr;
  std::map<std::string, ad::Var> vars_;
  bool trainable_ = false;
};

// Elementwise truncated normal (resampled beyond 2 sigma), in-place.
void fill_truncated_normal(Tensor& t, Rng& rng, double stddev);

// Runs `builder` on a fresh tape with params mounted as trainable leaves,
// backprops the scalar loss it returns, and extracts per-parameter gradients
// (exact zeros for parameters the loss never touched). Returns the loss.
double record_and_grad(const ParamStore& params,
                       const std::function<ad::Var(ad::Tape&, const MountedParams&)>& builder,
                       std::map<std::string, Tensor>& grads_out);

}  // namespace selfplay
