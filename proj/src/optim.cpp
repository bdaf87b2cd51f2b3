#include "selfplay/optim.hpp"

#include <cmath>
#include <stdexcept>

#include "selfplay/geom.hpp"

namespace selfplay {

double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [k, g] : grads) {
    for (const double x : g.data) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [k, g] : grads) {
      for (double& x : g.data) x *= scale;
    }
  }
  return norm;
}

double lr_at(int step, int total, int warmup, double lr_peak) {
  if (step < 0 || total < 1) throw std::invalid_argument("lr_at: bad step/total");
  if (warmup >= total) throw std::invalid_argument("lr_at: warmup must be < total");
  if (warmup > 0 && step < warmup) return lr_peak * static_cast<double>(step) / warmup;
  const double frac = static_cast<double>(step - warmup) / (total - warmup);
  if (frac >= 1.0) return 0.0;
  return lr_peak * 0.5 * (1.0 + std::cos(kPi * frac));
}

void AdamW::update(ParamStore& params, const std::map<std::string, Tensor>& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params.raw()) {
    Tensor& m = m_.try_emplace(name, Tensor::zeros(p.shape)).first->second;
    Tensor& v = v_.try_emplace(name, Tensor::zeros(p.shape)).first->second;
    if (m.data.size() != p.data.size()) throw std::invalid_argument("optimizer state shape drift");
    const auto git = grads.find(name);
    const Tensor* g = git == grads.end() ? nullptr : &git->second;
    if (g && g->data.size() != p.data.size()) {
      throw std::invalid_argument("gradient shape mismatch for " + name);
    }
    for (size_t i = 0; i < p.data.size(); ++i) {
      const double gi = g ? g->data[i] : 0.0;
      m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi;
      v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      p.data[i] -= lr * cfg_.weight_decay * p.data[i];
    }
  }
}

std::vector<double> AdamW::state_blob() const {
  std::vector<double> out;
  for (const auto& [k, t] : m_) out.insert(out.end(), t.data.begin(), t.data.end());
  for (const auto& [k, t] : v_) out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

void AdamW::load_state_blob(const ParamStore& params, const std::vector<double>& blob, int64_t t) {
  m_.clear();
  v_.clear();
  size_t ofs = 0;
  for (int pass = 0; pass < 2; ++pass) {
    auto& dst = pass == 0 ? m_ : v_;
    for (const auto& [name, p] : params.raw()) {
      Tensor buf = Tensor::zeros(p.shape);
      if (ofs + buf.data.size() > blob.size()) {
        throw std::invalid_argument("optimizer state blob too small");
      }
      std::copy(blob.begin() + static_cast<int64_t>(ofs),
                blob.begin() + static_cast<int64_t>(ofs + buf.data.size()), buf.data.begin());
      ofs += buf.data.size();
      dst.emplace(name, std::move(buf));
    }
  }
  if (ofs != blob.size()) throw std::invalid_argument("optimizer state blob size mismatch");
  t_ = t;
}

}  // namespace selfplay
