#include "selfplay/params.hpp"

#include <stdexcept>

namespace selfplay {

Tensor& ParamStore::create(const std::string& name, std::vector<int> shape) {
  if (params_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
  return params_.emplace(name, Tensor::zeros(std::move(shape))).first->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter: " + name);
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [k, v] : params_) out.push_back(k);
  return out;
}

int64_t ParamStore::numel() const {
  int64_t n = 0;
  for (const auto& [k, v] : params_) n += v.size();
  return n;
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(numel()));
  for (const auto& [k, v] : params_) out.insert(out.end(), v.data.begin(), v.data.end());
  return out;
}

void ParamStore::unflatten(const std::vector<double>& flat) {
  if (static_cast<int64_t>(flat.size()) != numel()) {
    throw std::invalid_argument("unflatten: size mismatch");
  }
  size_t ofs = 0;
  for (auto& [k, v] : params_) {
    std::copy(flat.begin() + static_cast<int64_t>(ofs),
              flat.begin() + static_cast<int64_t>(ofs + v.data.size()), v.data.begin());
    ofs += v.data.size();
  }
}

std::map<std::string, std::vector<int>> ParamStore::shapes() const {
  std::map<std::string, std::vector<int>> out;
  for (const auto& [k, v] : params_) out[k] = v.shape;
  return out;
}

bool ParamStore::equals(const ParamStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto it = other.params_.begin();
  for (const auto& [k, v] : params_) {
    if (it->first != k || it->second.shape != v.shape || it->second.data != v.data) return false;
    ++it;
  }
  return true;
}

MountedParams::MountedParams(ad::Tape& tape, const ParamStore& store, bool trainable)
    : tape_(&tape), trainable_(trainable) {
  for (const auto& [name, tensor] : store.raw()) {
    vars_[name] = trainable ? tape.leaf(tensor, name) : tape.constant(tensor);
  }
}

ad::Var MountedParams::at(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("parameter not mounted: " + name);
  return it->second;
}

std::map<std::string, Tensor> MountedParams::grads() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, var] : vars_) out[name] = tape_->grad_of(var);
  return out;
}

void fill_truncated_normal(Tensor& t, Rng& rng, double stddev) {
  for (double& v : t.data) v = rng.truncated_normal(stddev);
}

double record_and_grad(const ParamStore& params,
                       const std::function<ad::Var(ad::Tape&, const MountedParams&)>& builder,
                       std::map<std::string, Tensor>& grads_out) {
  ad::Tape tape;
  MountedParams mounted(tape, params, /*trainable=*/true);
  const ad::Var loss = builder(tape, mounted);
  tape.backward(loss);
  grads_out = mounted.grads();
  return tape.scalar_value(loss);
}

}  // namespace selfplay
