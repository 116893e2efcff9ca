#pragma once

#include <string>
#include <vector>

#include "facectl/layers.hpp"

namespace facectl {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Parameters that received no gradient in a step
// are left untouched, moments included.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<NamedParameter> params, AdamConfig config);

  void step(double lr);
  void zero_grad();
  void visit(const std::string& prefix, StateVisitor& v);

  const std::vector<NamedParameter>& params() const { return params_; }
  const AdamConfig& config() const { return config_; }
  long steps_taken() const { return static_cast<long>(step_[0]); }

 private:
  std::vector<NamedParameter> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  Tensor step_ = Tensor::scalar(0.0);
  AdamConfig config_;
};

}  // namespace facectl
