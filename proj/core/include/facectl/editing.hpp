#pragma once

#include <string>
#include <vector>

#include "facectl/corpus.hpp"
#include "facectl/training.hpp"

namespace facectl {

// Face inputs on disk are a PNG plus optional sidecars next to it:
//   <stem>.coeffs.json     model coefficients (synthetic inputs)
//   <stem>.landmarks.json  K x 2 pixel landmarks, fitted when coefficients are absent
//   <stem>.seg.png         label image, one class index per pixel
std::string sidecar_path(const std::string& png_path, const std::string& suffix);

std::string coefficients_to_json(const FaceCoefficients& c);
// Checks every block against the basis dimensions.
FaceCoefficients coefficients_from_json(const std::string& text, const MorphableBasis& basis);
std::string landmarks_to_json(const Eigen::MatrixX2d& landmarks);
Eigen::MatrixX2d landmarks_from_json(const std::string& text);

struct LoadedFace {
  FaceRecord record;
  bool fitted = false;  // coefficients came from landmark fitting
  FitResult fit;        // set when fitted
  std::vector<std::string> warnings;
};
// Reads a face input. Without a label image the region map is the render of
// the coefficients. Throws std::invalid_argument naming the missing sidecar
// when there are neither coefficients nor landmarks.
LoadedFace load_face(const std::string& png_path, const MorphableBasis& basis);
// Writes the PNG with coefficient, landmark and label sidecars.
void save_face(const std::string& png_path, const FaceRecord& record);

struct SwapResult {
  Tensor image;  // 3 x S x S
  FaceCoefficients coefficients;
  Tensor seg;  // N x S x S layout of `coefficients`
  FivePoints five_points;
};
// Target with the listed attributes taken from the source; the identity
// embedding always comes from the source, styles and background from the target.
SwapResult swap_face(ModelBundle& model, const FaceRecord& source, const FaceRecord& target, AttributeSet attributes);

// Frames at t = 0, 1/(steps-1), ..., 1 on top of an identity swap, moving the
// listed attributes from the target's values to the source's. When identity
// is listed, shape and embedding both move from the target to the source.
std::vector<Tensor> interpolate_faces(ModelBundle& model, const FaceRecord& source, const FaceRecord& target,
                                      AttributeSet attributes, int steps);

// B x N x D styles with the rows of `regions` copied from `reference`.
Tensor replace_style_rows(const Tensor& styles, const Tensor& reference, const std::vector<int>& regions);

struct RegionEditResult {
  std::vector<Tensor> images;  // one per applied region when progressive, else one
  std::vector<int> applied;
  std::vector<std::string> warnings;  // regions skipped because the reference lacks them
};
// Self-reconstruction of `target` with the named regions' styles taken from
// `reference`. Progressive mode applies the regions cumulatively in order.
RegionEditResult edit_regions(ModelBundle& model, const FaceRecord& target, const FaceRecord& reference,
                              const std::vector<std::string>& regions, bool progressive);

enum class EditOperation { Swap, Interpolate, EditRegion };

struct EditRequest {
  EditOperation operation = EditOperation::Swap;
  std::string source;     // swap, interpolate
  std::string target;
  std::string reference;  // edit-region
  AttributeSet attributes = kIdentity;
  std::vector<std::string> regions;
  int steps = 5;
  bool progressive = false;
  std::string out;
  std::string checkpoint;

  // Throws std::invalid_argument on missing paths, unknown regions or too few steps.
  void validate() const;
};

struct EditOutcome {
  std::vector<std::string> written;
  std::vector<std::string> warnings;
};
// Loads the checkpoint and inputs, runs the operation and writes the results:
// swap writes the image and a coefficient sidecar, interpolate a one-row grid,
// edit-region the edited image (progressive: a grid of the target followed by
// each step, plus one file per step).
EditOutcome run_edit(const EditRequest& request);

}  // namespace facectl
