#pragma once

#include <Eigen/Dense>

#include <array>
#include <span>
#include <vector>

#include "facectl/layers.hpp"

namespace facectl {

using FivePoints = Eigen::Matrix<double, 5, 2>;

// Canonical 5-point positions (eye centres, nose tip, mouth corners) as
// fractions of the square crop side.
struct AlignmentTemplate {
  int size = 32;
  std::array<std::array<double, 2>, 5> points = {
      {{0.35, 0.40}, {0.65, 0.40}, {0.50, 0.585}, {0.39, 0.735}, {0.61, 0.735}}};
  FivePoints pixels() const;
};

// x' = A x + t with A = [[a, -b], [b, a]].
struct Similarity {
  Eigen::Matrix2d A = Eigen::Matrix2d::Identity();
  Eigen::Vector2d t = Eigen::Vector2d::Zero();
  Eigen::Vector2d apply(const Eigen::Vector2d& p) const { return A * p + t; }
  Similarity inverse() const;
};

// Least-squares similarity taking `from` onto `to`. Throws
// std::invalid_argument when `from` is coincident or collinear.
Similarity fit_similarity(const FivePoints& from, const FivePoints& to);

// Sampling grid (B x s x s x 2, pixel-index units) that pulls each crop pixel
// from the input image through the inverse of the fitted similarity.
Tensor alignment_grid(std::span<const FivePoints> landmarks, const AlignmentTemplate& tmpl);
Var align_faces(const Var& images, std::span<const FivePoints> landmarks, const AlignmentTemplate& tmpl);

struct IdentityEncoderConfig {
  AlignmentTemplate crop;
  std::vector<int> channels = {16, 32, 64, 128};  // last entry is the embedding size
};

// Frozen stand-in for a face-recognition network: seeded conv stack, global
// average pooling, L2 normalization.
class IdentityEncoder {
 public:
  IdentityEncoder() = default;
  IdentityEncoder(const IdentityEncoderConfig& config, std::uint64_t seed);

  // aligned: B x 3 x s x s with s = config.crop.size. Returns B x d_emb rows of unit norm.
  Var embed_aligned(const Var& aligned) const;
  Var embed(const Var& images, std::span<const FivePoints> landmarks) const;
  // Global-average-pooled features before normalization.
  Var pooled_features(const Var& aligned) const;

  int embedding_size() const { return config_.channels.back(); }
  const IdentityEncoderConfig& config() const { return config_; }
  void visit(const std::string& prefix, StateVisitor& v);

 private:
  IdentityEncoderConfig config_;
  std::vector<Conv2d> convs_;
};

struct StyleEncoderConfig {
  std::vector<int> channels = {16, 32, 64};  // full, 1/2 and 1/4 resolution
  int style_dim = 64;
};

// Conv encoder down to 1/4 resolution, transposed convs back up, 1x1
// projection to style_dim with tanh, then region average pooling.
class StyleEncoder {
 public:
  StyleEncoder() = default;
  StyleEncoder(const StyleEncoderConfig& config, Initializer& init);

  Var features(const Var& image) const;  // B x D x H x W
  Var encode(const Var& image, const Tensor& seg) const;  // B x N x D

  int style_dim() const { return config_.style_dim; }
  const StyleEncoderConfig& config() const { return config_; }
  void visit(const std::string& prefix, StateVisitor& v);

 private:
  StyleEncoderConfig config_;
  std::vector<Conv2d> down_;
  std::vector<ConvTranspose2d> up_;
  Conv2d project_;
};

// Throws std::invalid_argument unless every pixel has exactly one class set.
void validate_segmentation(const Tensor& seg);
// B x N x H x W one-hot map from per-pixel labels (one vector of H*W per batch entry).
Tensor one_hot_segmentation(std::span<const std::vector<int>> labels, int num_classes, int height, int width);
// Nearest-neighbour resampling of a one-hot map; output (i, j) reads input
// (floor(i*H/h), floor(j*W/w)), so the one-hot property is preserved.
Tensor downsample_segmentation(const Tensor& seg, int h, int w);

}  // namespace facectl
