#include "facectl/optim.hpp"

#include <cmath>

namespace facectl {

Adam::Adam(std::vector<NamedParameter> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p.var.shape()));
    v_.push_back(Tensor::zeros(p.var.shape()));
  }
}

void Adam::step(double lr) {
  step_[0] += 1.0;
  const double t = step_[0];
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var p = params_[k].var;
    if (!p.has_grad()) continue;
    const Tensor& g = p.node()->grad;
    Tensor& w = p.mutable_value();
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

void Adam::visit(const std::string& prefix, StateVisitor& v) {
  v.buffer(prefix + ".step", step_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    v.buffer(prefix + "." + params_[k].name + ".m", m_[k]);
    v.buffer(prefix + "." + params_[k].name + ".v", v_[k]);
  }
}

}  // namespace facectl
