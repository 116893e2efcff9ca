#include "facectl/layers.hpp"

#include <zlib.h>

namespace facectl {

Tensor Initializer::normal(const Shape& shape, double stddev) {
  Tensor t(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng_);
  return t;
}

namespace {

ops::SpectralState warm_spectral_state(const Tensor& w, std::uint64_t seed) {
  ops::SpectralState s = ops::init_spectral_state(w.shape(), seed);
  ops::power_iterate(w, s, 20);
  return s;
}

}  // namespace

Conv2d::Conv2d(int in, int out, int kernel, int stride_, int pad_, bool spectral_, Initializer& init, bool with_bias)
    : stride(stride_), pad(pad_), spectral(spectral_) {
  weight = Var::parameter(init.he({out, in, kernel, kernel}, in * kernel * kernel));
  if (with_bias) bias = Var::parameter(Tensor::zeros({out}));
  if (spectral) sn = warm_spectral_state(weight.value(), init.next_seed());
}

Var Conv2d::effective_weight() const { return spectral ? ops::spectral_normalize(weight, sn) : weight; }

Var Conv2d::forward(const Var& x) const { return ops::conv2d(x, effective_weight(), bias, stride, pad); }

void Conv2d::visit(const std::string& prefix, StateVisitor& v) {
  v.parameter(prefix + ".weight", weight);
  if (bias.defined()) v.parameter(prefix + ".bias", bias);
  if (spectral) {
    v.buffer(prefix + ".sn_u", sn.u);
    v.buffer(prefix + ".sn_v", sn.v);
    v.spectral(prefix, weight, sn);
  }
}

ConvTranspose2d::ConvTranspose2d(int in, int out, int kernel, int stride_, int pad_, int output_pad_, Initializer& init)
    : stride(stride_), pad(pad_), output_pad(output_pad_) {
  // Each output pixel sees roughly in * k^2 / stride^2 taps.
  const int fan_in = std::max(1, in * kernel * kernel / (stride * stride));
  weight = Var::parameter(init.he({in, out, kernel, kernel}, fan_in));
  bias = Var::parameter(Tensor::zeros({out}));
}

Var ConvTranspose2d::forward(const Var& x) const {
  return ops::conv_transpose2d(x, weight, bias, stride, pad, output_pad);
}

void ConvTranspose2d::visit(const std::string& prefix, StateVisitor& v) {
  v.parameter(prefix + ".weight", weight);
  v.parameter(prefix + ".bias", bias);
}

Linear::Linear(int in, int out, Initializer& init, double weight_std, bool spectral_) : spectral(spectral_) {
  weight = Var::parameter(weight_std < 0 ? init.he({out, in}, in) : init.normal({out, in}, weight_std));
  bias = Var::parameter(Tensor::zeros({out}));
  if (spectral) sn = warm_spectral_state(weight.value(), init.next_seed());
}

Var Linear::forward(const Var& x) const {
  return ops::linear(x, spectral ? ops::spectral_normalize(weight, sn) : weight, bias);
}

void Linear::visit(const std::string& prefix, StateVisitor& v) {
  v.parameter(prefix + ".weight", weight);
  v.parameter(prefix + ".bias", bias);
  if (spectral) {
    v.buffer(prefix + ".sn_u", sn.u);
    v.buffer(prefix + ".sn_v", sn.v);
    v.spectral(prefix, weight, sn);
  }
}

std::vector<NamedParameter> collect_parameters(const std::function<void(StateVisitor&)>& visit) {
  ParameterCollector c;
  visit(c);
  return std::move(c.params);
}

void set_trainable(const std::vector<NamedParameter>& params, bool on) {
  for (NamedParameter p : params) p.var.set_requires_grad(on);
}

void zero_grads(const std::vector<NamedParameter>& params) {
  for (NamedParameter p : params) p.var.zero_grad();
}

std::uint32_t parameter_hash(const std::vector<NamedParameter>& params) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& p : params) {
    const Tensor& t = p.var.value();
    crc = crc32(crc, reinterpret_cast<const Bytef*>(t.data()), static_cast<uInt>(t.size() * sizeof(double)));
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace facectl
