#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>

#include "facectl/editing.hpp"

namespace facectl {

// Fraction of rows of `generated` (B x E) whose cosine-nearest row of
// `gallery` (one embedding per identity) is the intended identity.
double identity_retrieval_accuracy(const Tensor& generated, std::span<const int> intended, const Tensor& gallery);

// Landmarks (K x 2 pixels) of a 3 x S x S image.
using LandmarkEstimator = std::function<Eigen::MatrixX2d(const Tensor& image)>;
LandmarkEstimator regressor_estimator(const LandmarkRegressor& regressor);

// Euclidean distance between the rotation angles, in degrees (differences wrapped to (-180, 180]).
double pose_distance_deg(const FaceCoefficients& a, const FaceCoefficients& b);
// Euclidean distance between the expression coefficients, in prior-std units.
double expression_distance(const MorphableBasis& basis, const FaceCoefficients& a, const FaceCoefficients& b);

struct AttributeError {
  bool excluded = false;  // the landmark fit was flagged as unreliable
  double pose_deg = 0.0;
  double expression = 0.0;
};
// Estimates landmarks on `image`, fits coefficients and compares pose and
// expression with `reference`.
AttributeError attribute_error(const Tensor& image, const FaceCoefficients& reference, const MorphableBasis& basis,
                               const LandmarkEstimator& estimator, const FitOptions& fit);

// Mean absolute change inside the mask over the mean absolute change outside
// it; images are 3 x S x S and the mask S x S.
struct LocalityTotals {
  double inside = 0.0, inside_pixels = 0.0, outside = 0.0, outside_pixels = 0.0;
  void add(const Tensor& before, const Tensor& after, const Tensor& mask);
  double ratio() const;
};

// Mean over face regions present in both images of the distance between the
// regions' mean colours. Empty when no face region is shared.
std::optional<double> region_color_distance(const Tensor& generated, const Tensor& generated_seg, const Tensor& reference,
                                            const Tensor& reference_seg);

struct EvalConfig {
  int pairs = 50;
  std::uint64_t seed = 17;
  std::string edit_region = "lips";
};

struct EvalReport {
  int pairs = 0;
  double identity_retrieval = 0.0;
  double source_similarity = 0.0;  // mean cosine of the output embedding to the source's
  double target_similarity = 0.0;  // and to the target's
  double pose_error_deg = 0.0;
  double expression_error = 0.0;
  int fit_excluded = 0;
  double region_color_distance = 0.0;
  double reconstruction_l1 = 0.0;
  double baseline_l1 = 0.0;  // face filled with its mean colour over the true background
  double locality_ratio = 0.0;
  int step = 0;

  std::string to_json() const;
};

// Swaps between fresh renders of the corpus identities (never seen in
// training) and scores them. `estimator` defaults to the model's landmark
// regressor.
EvalReport evaluate_model(ModelBundle& model, const SyntheticCorpus& corpus, const EvalConfig& config,
                          const LandmarkEstimator& estimator = {});

}  // namespace facectl
