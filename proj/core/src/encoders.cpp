#include "facectl/encoders.hpp"

#include <cmath>
#include <stdexcept>

namespace facectl {

FivePoints AlignmentTemplate::pixels() const {
  FivePoints p;
  for (int k = 0; k < 5; ++k) p.row(k) << points[k][0] * size, points[k][1] * size;
  return p;
}

Similarity Similarity::inverse() const {
  Similarity s;
  s.A = A.inverse();
  s.t = -s.A * t;
  return s;
}

Similarity fit_similarity(const FivePoints& from, const FivePoints& to) {
  const Eigen::RowVector2d mf = from.colwise().mean(), mt = to.colwise().mean();
  const Eigen::Matrix<double, 5, 2> f = from.rowwise() - mf, g = to.rowwise() - mt;
  const Eigen::Matrix2d cov = f.transpose() * f / 5.0;
  const Eigen::Vector2d ev = Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d>(cov).eigenvalues();
  if (!from.allFinite() || ev[1] < 1e-9) throw std::invalid_argument("alignment landmarks are coincident");
  if (ev[0] < 1e-6 * ev[1]) throw std::invalid_argument("alignment landmarks are collinear");
  const double norm = f.squaredNorm();
  double a = 0.0, b = 0.0;
  for (int k = 0; k < 5; ++k) {
    a += f(k, 0) * g(k, 0) + f(k, 1) * g(k, 1);
    b += f(k, 0) * g(k, 1) - f(k, 1) * g(k, 0);
  }
  Similarity s;
  s.A << a / norm, -b / norm, b / norm, a / norm;
  s.t = mt.transpose() - s.A * mf.transpose();
  return s;
}

Tensor alignment_grid(std::span<const FivePoints> landmarks, const AlignmentTemplate& tmpl) {
  const int B = static_cast<int>(landmarks.size()), S = tmpl.size;
  const FivePoints dst = tmpl.pixels();
  Tensor grid({B, S, S, 2});
  for (int b = 0; b < B; ++b) {
    const Similarity back = fit_similarity(landmarks[b], dst).inverse();
    for (int i = 0; i < S; ++i)
      for (int j = 0; j < S; ++j) {
        // Continuous coordinates put pixel centres at +0.5; the grid uses indices.
        const Eigen::Vector2d p = back.apply(Eigen::Vector2d(j + 0.5, i + 0.5));
        grid(b, i, j, 0) = p.x() - 0.5;
        grid(b, i, j, 1) = p.y() - 0.5;
      }
  }
  return grid;
}

Var align_faces(const Var& images, std::span<const FivePoints> landmarks, const AlignmentTemplate& tmpl) {
  if (images.shape().size() != 4 || static_cast<int>(landmarks.size()) != images.dim(0)) {
    throw std::invalid_argument("align_faces: need one landmark set per image");
  }
  return ops::bilinear_resample(images, alignment_grid(landmarks, tmpl));
}

IdentityEncoder::IdentityEncoder(const IdentityEncoderConfig& config, std::uint64_t seed) : config_(config) {
  if (config.channels.empty()) throw std::invalid_argument("identity encoder needs at least one layer");
  Initializer init(seed);
  int in = 3;
  for (std::size_t l = 0; l < config.channels.size(); ++l) {
    // Stride 2 everywhere except the last layer, which keeps the final resolution.
    const int stride = l + 1 < config.channels.size() ? 2 : 1;
    convs_.emplace_back(in, config.channels[l], 3, stride, 1, false, init);
    in = config.channels[l];
  }
}

Var IdentityEncoder::pooled_features(const Var& aligned) const {
  const int S = config_.crop.size;
  if (aligned.shape().size() != 4 || aligned.dim(1) != 3 || aligned.dim(2) != S || aligned.dim(3) != S) {
    throw std::invalid_argument("identity encoder expects B x 3 x " + std::to_string(S) + " x " + std::to_string(S) +
                                " input, got " + to_string(aligned.shape()));
  }
  Var h = aligned;
  for (const auto& c : convs_) h = ops::leaky_relu(c.forward(h));
  return ops::global_avg_pool(h);
}

Var IdentityEncoder::embed_aligned(const Var& aligned) const {
  return ops::l2_normalize_rows(pooled_features(aligned));
}

Var IdentityEncoder::embed(const Var& images, std::span<const FivePoints> landmarks) const {
  return embed_aligned(align_faces(images, landmarks, config_.crop));
}

void IdentityEncoder::visit(const std::string& prefix, StateVisitor& v) {
  for (std::size_t l = 0; l < convs_.size(); ++l) convs_[l].visit(prefix + ".conv" + std::to_string(l), v);
}

StyleEncoder::StyleEncoder(const StyleEncoderConfig& config, Initializer& init) : config_(config) {
  if (config.channels.size() < 2) throw std::invalid_argument("style encoder needs at least two stages");
  int in = 3;
  for (std::size_t l = 0; l < config.channels.size(); ++l) {
    down_.emplace_back(in, config.channels[l], 3, l == 0 ? 1 : 2, 1, false, init);
    in = config.channels[l];
  }
  for (std::size_t l = config.channels.size() - 1; l > 0; --l) {
    up_.emplace_back(config.channels[l], config.channels[l - 1], 3, 2, 1, 1, init);
  }
  project_ = Conv2d(config.channels.front(), config.style_dim, 1, 1, 0, false, init);
}

Var StyleEncoder::features(const Var& image) const {
  Var h = image;
  for (const auto& c : down_) h = ops::leaky_relu(ops::instance_norm(c.forward(h)));
  for (const auto& c : up_) h = ops::leaky_relu(ops::instance_norm(c.forward(h)));
  return ops::tanh(project_.forward(h));
}

Var StyleEncoder::encode(const Var& image, const Tensor& seg) const {
  validate_segmentation(seg);
  if (seg.dim(0) != image.dim(0) || seg.dim(2) != image.dim(2) || seg.dim(3) != image.dim(3)) {
    throw std::invalid_argument("style encoder: segmentation " + to_string(seg.shape()) + " does not match image " +
                                to_string(image.shape()));
  }
  return ops::region_average_pool(features(image), seg);
}

void StyleEncoder::visit(const std::string& prefix, StateVisitor& v) {
  for (std::size_t l = 0; l < down_.size(); ++l) down_[l].visit(prefix + ".down" + std::to_string(l), v);
  for (std::size_t l = 0; l < up_.size(); ++l) up_[l].visit(prefix + ".up" + std::to_string(l), v);
  project_.visit(prefix + ".project", v);
}

void validate_segmentation(const Tensor& seg) {
  if (seg.rank() != 4) throw std::invalid_argument("segmentation must be B x N x H x W, got " + to_string(seg.shape()));
  const int B = seg.dim(0), N = seg.dim(1);
  const std::size_t P = static_cast<std::size_t>(seg.dim(2)) * seg.dim(3);
  for (int b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      int ones = 0;
      for (int n = 0; n < N; ++n) {
        const double v = seg[(static_cast<std::size_t>(b) * N + n) * P + p];
        if (v == 1.0) ++ones;
        else if (v != 0.0) throw std::invalid_argument("segmentation is not one-hot (entry " + std::to_string(v) + ")");
      }
      if (ones != 1) throw std::invalid_argument("segmentation pixel has " + std::to_string(ones) + " classes set");
    }
}

Tensor one_hot_segmentation(std::span<const std::vector<int>> labels, int num_classes, int height, int width) {
  const int B = static_cast<int>(labels.size());
  const std::size_t P = static_cast<std::size_t>(height) * width;
  Tensor seg({B, num_classes, height, width});
  for (int b = 0; b < B; ++b) {
    if (labels[b].size() != P) throw std::invalid_argument("label map size does not match height x width");
    for (std::size_t p = 0; p < P; ++p) {
      const int c = labels[b][p];
      if (c < 0 || c >= num_classes) {
        throw std::invalid_argument("label " + std::to_string(c) + " outside [0, " + std::to_string(num_classes) + ")");
      }
      seg[(static_cast<std::size_t>(b) * num_classes + c) * P + p] = 1.0;
    }
  }
  return seg;
}

Tensor downsample_segmentation(const Tensor& seg, int h, int w) { return ops::resize_nearest(seg, h, w); }

}  // namespace facectl
