#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "facectl/autograd.hpp"
#include "facectl/ops.hpp"

namespace facectl {

// Walks the persistent state of a network. Parameters are trainable leaves;
// buffers are non-trainable tensors (running statistics, power-iteration
// vectors) that still belong in a checkpoint.
class StateVisitor {
 public:
  virtual ~StateVisitor() = default;
  virtual void parameter(const std::string& name, Var& p) = 0;
  virtual void buffer(const std::string& name, Tensor& t) = 0;
  virtual void spectral(const std::string&, const Var&, ops::SpectralState&) {}
};

struct NamedParameter {
  std::string name;
  Var var;
};

// Collects (name, Var) pairs; the Vars alias the network's parameters.
class ParameterCollector : public StateVisitor {
 public:
  void parameter(const std::string& name, Var& p) override { params.push_back({name, p}); }
  void buffer(const std::string&, Tensor&) override {}
  std::vector<NamedParameter> params;
};

// Advances every spectral-norm estimate by one power-iteration step.
class PowerIterationVisitor : public StateVisitor {
 public:
  void parameter(const std::string&, Var&) override {}
  void buffer(const std::string&, Tensor&) override {}
  void spectral(const std::string&, const Var& w, ops::SpectralState& s) override {
    ops::power_iterate(w.value(), s, 1);
    ++touched;
  }
  int touched = 0;
};

// Seeded N(0, std) initializer shared by all layers of one network.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Tensor normal(const Shape& shape, double stddev);
  Tensor he(const Shape& shape, int fan_in) { return normal(shape, std::sqrt(2.0 / fan_in)); }
  std::uint64_t next_seed() { return rng_(); }

 private:
  std::mt19937_64 rng_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride, int pad, bool spectral, Initializer& init, bool bias = true);

  Var forward(const Var& x) const;
  Var effective_weight() const;
  void visit(const std::string& prefix, StateVisitor& v);

  Var weight;
  Var bias;
  int stride = 1;
  int pad = 0;
  bool spectral = false;
  ops::SpectralState sn;
};

// Weight layout Cin x Cout x k x k.
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(int in, int out, int kernel, int stride, int pad, int output_pad, Initializer& init);

  Var forward(const Var& x) const;
  void visit(const std::string& prefix, StateVisitor& v);

  Var weight;
  Var bias;
  int stride = 1;
  int pad = 0;
  int output_pad = 0;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, Initializer& init, double weight_std = -1.0, bool spectral = false);

  Var forward(const Var& x) const;
  void visit(const std::string& prefix, StateVisitor& v);

  Var weight;
  Var bias;
  bool spectral = false;
  ops::SpectralState sn;
};

std::vector<NamedParameter> collect_parameters(const std::function<void(StateVisitor&)>& visit);
void set_trainable(const std::vector<NamedParameter>& params, bool on);
void zero_grads(const std::vector<NamedParameter>& params);
// CRC32 over the raw bytes of every parameter value, in visiting order.
std::uint32_t parameter_hash(const std::vector<NamedParameter>& params);

}  // namespace facectl
