#pragma once

#include <cstdint>
#include <span>

#include "facectl/autograd.hpp"
#include "facectl/tensor.hpp"

// Differentiable operations on Var. Feature maps are NCHW; "rows" ops take
// B x D matrices. Shape errors throw std::invalid_argument.
namespace facectl::ops {

// Running statistics of a parameter-free batch normalization.
struct RunningStats {
  Tensor mean;
  Tensor var;
  static RunningStats identity(int channels) {
    return {Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
  }
};

// Persistent singular-vector estimates of a spectrally normalized weight.
struct SpectralState {
  Tensor u;  // length = out dimension
  Tensor v;  // length = product of remaining dimensions
};

// --- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var leaky_relu(const Var& a, double slope = 0.2);
Var relu(const Var& a);
Var tanh(const Var& a);

// --- reductions and reshapes ----------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Shape shape);
Var detach(const Var& a);
// Concatenate / slice along axis 1 (channels for NCHW, columns for B x D).
Var concat_channels(std::span<const Var> parts);
Var slice_channels(const Var& a, int begin, int end);
Var gather_batch(const Var& a, std::span<const int> indices);

// --- layers ----------------------------------------------------------------
// out = x * gamma + beta with gamma, beta of shape B x C broadcast over space.
Var channel_affine(const Var& x, const Var& gamma, const Var& beta);
Var linear(const Var& x, const Var& weight, const Var& bias);
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
// weight: Cin x Cout x k x k. Output size (H-1)*stride - 2*pad + k + output_pad.
Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad, int output_pad);
// Parameter-free batch normalization. Training mode normalizes with batch
// statistics and updates `stats` with `momentum`; eval mode uses `stats`.
Var batch_norm(const Var& x, RunningStats& stats, bool training, double momentum = 0.1, double eps = 1e-5);
Var instance_norm(const Var& x, double eps = 1e-5);
Var upsample_nearest(const Var& x, int factor);
Var avg_pool(const Var& x, int factor);
Var global_avg_pool(const Var& x);
Var l2_normalize_rows(const Var& x, double eps = 1e-12);
Var cosine_similarity_rows(const Var& a, const Var& b, double eps = 1e-12);
// Mean over rows of -log softmax(logits)[label].
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels);

// --- region styles -----------------------------------------------------------
// S[b,n,:] = sum_p F[b,:,p] M[b,n,p] / max(sum_p M[b,n,p], 1).
Var region_average_pool(const Var& features, const Tensor& seg);
// z[b,:,p] = sum_n S[b,n,:] M[b,n,p]  (z_style = S^T x M).
Var broadcast_styles(const Var& styles, const Tensor& seg);
// Equals conv2d(broadcast_styles(styles, seg), weight, bias, 1, pad), computed
// by contracting the weight with the style matrix first so the convolution
// runs over N class channels instead of D style channels.
Var style_conv2d(const Var& styles, const Tensor& seg, const Var& weight, const Var& bias, int pad);

// --- resampling ------------------------------------------------------------
// grid: B x Ho x Wo x 2 holding (x, y) sample positions in input pixel-index
// units (the center of pixel (i, j) is (j, i)). Bilinear; taps outside the
// frame read zero.
Var bilinear_resample(const Var& image, const Tensor& grid);

// --- spectral normalization ------------------------------------------------
SpectralState init_spectral_state(const Shape& weight_shape, std::uint64_t seed);
// One or more power-iteration steps on the 2-D view (out x rest) of `weight`.
void power_iterate(const Tensor& weight, SpectralState& state, int iterations = 1);
double spectral_sigma(const Tensor& weight, const SpectralState& state);
// weight / sigma with sigma = u^T W v, u and v held constant.
Var spectral_normalize(const Var& weight, const SpectralState& state);

// --- non-differentiable tensor helpers -------------------------------------
// Nearest-neighbour resize: output (i, j) reads input (floor(i*H/h), floor(j*W/w)).
Tensor resize_nearest(const Tensor& x, int h, int w);
Tensor avg_pool(const Tensor& x, int factor);

}  // namespace facectl::ops
