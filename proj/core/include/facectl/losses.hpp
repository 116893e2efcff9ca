#pragma once

#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "facectl/layers.hpp"
#include "facectl/morphable_model.hpp"

namespace facectl {

struct LossWeights {
  double identity = 10.0;
  double landmark = 10000.0;
  double hm = 100.0;
  double perceptual = 100.0;
  void validate() const;  // throws on negative weights
};

enum class TrainMode { Reconstruction, Generation };
std::string to_string(TrainMode m);

// Which terms enter the total. The adversarial term always does.
struct LossGates {
  bool identity = false;
  bool landmark = false;
  bool hm = false;
  bool perceptual = false;
};
// Reconstruction activates the perceptual term; generation activates identity,
// landmark and histogram matching.
LossGates gates_for(TrainMode mode);

// Undefined members were not computed.
struct LossTerms {
  Var adversarial;
  Var identity;
  Var landmark;
  Var hm;
  Var perceptual;
};

struct LossReport {
  double adversarial = 0.0;
  double identity = 0.0;
  double landmark = 0.0;
  double hm = 0.0;
  double perceptual = 0.0;
  double total = 0.0;
  LossGates active;
};

struct TotalLoss {
  Var total;
  LossReport report;  // inactive terms report 0
};
// Throws if an active term is missing or a weight is negative.
TotalLoss total_loss(const LossTerms& terms, const LossWeights& weights, const LossGates& gates);

// --- perceptual ------------------------------------------------------------------------

struct PerceptualConfig {
  std::vector<int> channels = {16, 32, 32, 64, 64};  // stage 1 keeps resolution, later stages halve it
  std::vector<int> layers = {2, 4};                  // 1-based stage outputs compared by the loss
};

// Frozen, seeded conv pyramid standing in for a pretrained classifier.
class PerceptualExtractor {
 public:
  PerceptualExtractor() = default;
  PerceptualExtractor(const PerceptualConfig& config, std::uint64_t seed);

  std::vector<Var> features(const Var& image) const;  // one map per configured layer
  void visit(const std::string& prefix, StateVisitor& v);

 private:
  PerceptualConfig config_;
  std::vector<Conv2d> stages_;
};

// Sum over layers of 0.5 * mean squared feature difference.
Var perceptual_loss(const Var& target, const Var& generated, const PerceptualExtractor& extractor);

// --- identity --------------------------------------------------------------------------

// 1 - cosine similarity, averaged over the batch. Throws on a zero-norm row.
Var identity_loss(const Var& generated_embedding, const Var& source_embedding);

// --- landmarks -----------------------------------------------------------------------

// Landmarks of the source identity placed with the target's expression and pose.
Eigen::MatrixX2d aligned_landmarks(const FaceCoefficients& source, const FaceCoefficients& target,
                                   const MorphableBasis& basis, int image_size);

struct LandmarkRegressorConfig {
  int image_size = 64;
  int landmarks = 68;
  std::vector<int> channels = {16, 32, 64, 64};  // stride-2 convs
};

// Small conv net predicting K landmarks in [0, 1] image coordinates, laid
// out as x0, y0, x1, y1, ...
class LandmarkRegressor {
 public:
  LandmarkRegressor() = default;
  LandmarkRegressor(const LandmarkRegressorConfig& config, std::uint64_t seed);

  Var forward(const Var& images) const;  // B x 2K
  void visit(const std::string& prefix, StateVisitor& v);
  const LandmarkRegressorConfig& config() const { return config_; }

 private:
  LandmarkRegressorConfig config_;
  std::vector<Conv2d> convs_;
  Linear head_;
};

// B x 2K rows of pixel landmarks divided by the image size.
Tensor normalize_landmarks(std::span<const Eigen::MatrixX2d> landmarks, int image_size);
// 0.5 * mean over points of the squared distance (normalized coordinates).
Var landmark_loss(const Var& predicted, const Tensor& reference);

struct LandmarkBatch {
  Tensor images;     // B x 3 x H x W in [-1, 1]
  Tensor landmarks;  // B x 2K normalized
};
using LandmarkSampler = std::function<LandmarkBatch(std::mt19937_64& rng, int batch)>;

struct LandmarkPretrainConfig {
  int steps = 3000;
  int batch = 16;
  double lr = 1e-3;
  int validation_samples = 256;
  double threshold_px = 2.0;
  std::uint64_t seed = 11;
};
struct LandmarkPretrainReport {
  double validation_error_px = 0.0;  // mean point distance on held-out samples
  int steps = 0;
};
// Trains on sampler batches, measures the held-out error and throws
// std::runtime_error (with the measured error) if it misses the threshold.
LandmarkPretrainReport pretrain_landmark_regressor(LandmarkRegressor& regressor, const LandmarkSampler& sampler,
                                                   const LandmarkPretrainConfig& config);
// Mean point distance in pixels between predictions and normalized references.
double landmark_error_px(const Tensor& predicted, const Tensor& reference, int image_size);

// --- histogram matching -------------------------------------------------------------------

inline constexpr int kHistogramBins = 256;

// Remaps the values of `generated` so that each channel (and region, when a
// B x N x H x W one-hot map is given) follows the value distribution of
// `target`. Both are B x C x H x W in [-1, 1]. The result is a constant.
Tensor histogram_match(const Tensor& target, const Tensor& generated, const Tensor* seg = nullptr);
// Region pixel sets taken from separate maps, for when the generated layout
// differs from the target's. A region empty in either image is left as is.
Tensor histogram_match(const Tensor& target, const Tensor& generated, const Tensor* target_seg,
                       const Tensor* generated_seg);
// 0.5 * mean squared difference; gradient flows into `generated` only.
Var histogram_matching_loss(const Var& generated, const Tensor& remapped);

// --- adversarial -------------------------------------------------------------------------------

// Hinge losses averaged over discriminator scales.
Var discriminator_hinge_loss(std::span<const Var> real_logits, std::span<const Var> fake_logits);
Var generator_hinge_loss(std::span<const Var> fake_logits);
// Mean L1 distance between matching intermediate features, averaged over scales.
Var feature_matching_loss(const std::vector<std::vector<Var>>& real, const std::vector<std::vector<Var>>& fake);

}  // namespace facectl
