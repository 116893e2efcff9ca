#pragma once

#include <span>
#include <string>
#include <vector>

#include "facectl/layers.hpp"
#include "facectl/morphable_model.hpp"

namespace facectl {

// Per-call modulation context shared by every IS normalization of a block.
struct ISContext {
  Var z_id;    // B x id_dim, may be undefined when identity modulation is off
  Var styles;  // B x N x D, may be undefined when style modulation is off
  Tensor seg;  // B x N x h x w at the block's resolution
};

struct ISNormConfig {
  int channels = 0;
  int id_dim = 128;
  int style_dim = 64;
  int hidden = 32;     // width of the shared style head
  int kernel = 3;      // shared hidden conv
  int out_kernel = 1;  // gamma / beta convs
  bool use_identity = true;
  bool use_style = true;
};

// Parameter-free batch norm, then an identity affine (gamma_id, beta_id from
// one FC layer on z_id) and a per-pixel style affine (gamma_s, beta_s from a
// two-conv head on the broadcast style map). Gains are 1 + predicted offset.
class ISNorm {
 public:
  ISNorm() = default;
  ISNorm(const ISNormConfig& config, Initializer& init);

  Var forward(const Var& features, const ISContext& ctx, bool training);
  // B x C gains and offsets of the identity affine.
  std::pair<Var, Var> identity_affine(const Var& z_id) const;
  // B x C x h x w gains and offsets of the style affine.
  std::pair<Var, Var> style_affine(const Var& styles, const Tensor& seg) const;

  void visit(const std::string& prefix, StateVisitor& v);
  const ISNormConfig& config() const { return config_; }

  ops::RunningStats stats;
  Linear id_fc;         // id_dim -> 2C
  Var style_weight;     // hidden x D x k x k, applied to the broadcast style map
  Var style_bias;
  Conv2d gamma_conv;    // hidden -> C
  Conv2d beta_conv;

 private:
  ISNormConfig config_;
};

struct ISBlockConfig {
  int in_channels = 0;
  int out_channels = 0;
  bool upsample = true;
  bool spectral = true;
  ISNormConfig norm;  // channels is filled per normalization
};

// [IS norm -> LReLU -> 3x3 conv] twice plus a skip path (IS norm -> 1x1 conv
// when the channel count changes), then optional 2x nearest upsampling.
class ISBlock {
 public:
  ISBlock() = default;
  ISBlock(const ISBlockConfig& config, Initializer& init);

  Var forward(const Var& x, const ISContext& ctx, bool training);
  void visit(const std::string& prefix, StateVisitor& v);
  const ISBlockConfig& config() const { return config_; }

  ISNorm norm1, norm2, norm_skip;
  Conv2d conv1, conv2, conv_skip;

 private:
  ISBlockConfig config_;
};

enum class ConditioningMode { Render, Fc, Both };
std::string to_string(ConditioningMode m);
ConditioningMode parse_conditioning_mode(const std::string& s);

struct GeneratorConfig {
  int image_size = 64;
  int initial_resolution = 8;
  std::vector<int> channels = {64, 64, 48, 48, 32, 32, 32, 16};  // one entry per block
  std::vector<int> upsample_blocks = {1, 3, 7};
  std::vector<int> background_blocks = {6, 7};
  int num_classes = 8;
  int style_dim = 64;
  int id_dim = 128;
  int conditioning_dim = 77;
  int head_hidden = 32;
  ConditioningMode conditioning = ConditioningMode::Both;
  bool use_identity = true;
  bool use_style = true;
  bool spectral = true;

  // Throws std::invalid_argument describing the first inconsistency.
  void validate() const;
  int block_count() const { return static_cast<int>(channels.size()); }
  int block_resolution(int block) const;  // input resolution of a block
};

struct GeneratorInputs {
  Var conditioning;   // B x conditioning_dim (FC path)
  Tensor render;      // B x 3 x H x W shaded face in [-1, 1] (render path)
  Var z_id;           // B x id_dim
  Var styles;         // B x N x D
  Tensor seg;         // B x N x H x W one-hot
  Tensor background;  // B x 3 x H x W target with the face masked out
};

class Generator {
 public:
  Generator() = default;
  Generator(const GeneratorConfig& config, Initializer& init);

  // B x 3 x H x W in [-1, 1]. Training mode uses batch statistics and
  // updates the running statistics; eval mode reads them.
  Var forward(const GeneratorInputs& in, bool training);

  void visit(const std::string& prefix, StateVisitor& v);
  const GeneratorConfig& config() const { return config_; }
  std::vector<ISBlock>& blocks() { return blocks_; }

 private:
  GeneratorConfig config_;
  Conv2d render_in_;
  Linear fc_in_;
  std::vector<ISBlock> blocks_;
  Conv2d out_;
};

// B x 3 x H x W shaded renders of the coefficient sets, mapped to [-1, 1].
Tensor render_conditioning(const MorphableBasis& basis, std::span<const FaceCoefficients> coeffs, int image_size);
// B x conditioning_size(basis) rows of conditioning_vector.
Tensor conditioning_batch(const MorphableBasis& basis, std::span<const FaceCoefficients> coeffs);
// image * (1 - face_mask); image B x 3 x H x W, mask B x H x W or B x 1 x H x W.
Tensor masked_background(const Tensor& image, const Tensor& face_mask);

struct DiscriminatorConfig {
  std::vector<int> channels = {32, 64, 64, 64};  // stride-2 kernel-4 layers
  int scales = 2;
  int num_classes = 8;
  bool use_segmentation = true;
  bool spectral = true;
};

struct DiscriminatorOutput {
  std::vector<Var> logits;                 // per scale, B x 1 x h x w
  std::vector<std::vector<Var>> features;  // per scale, after each hidden layer
};

// Patch discriminators at full and successively halved resolution.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const DiscriminatorConfig& config, Initializer& init);

  DiscriminatorOutput forward(const Var& image, const Tensor& seg) const;
  void visit(const std::string& prefix, StateVisitor& v);
  const DiscriminatorConfig& config() const { return config_; }

 private:
  DiscriminatorConfig config_;
  std::vector<std::vector<Conv2d>> scales_;  // hidden layers then the logit conv
};

}  // namespace facectl
