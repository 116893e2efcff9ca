#pragma once

#include <span>
#include <vector>

#include "facectl/corpus.hpp"
#include "facectl/encoders.hpp"
#include "facectl/generator.hpp"

namespace facectl {

// One generation request: the identity embedding comes from `source`, the
// styles, region layout reference and background from `target`, and the
// face geometry and shading from `coefficients`.
struct SwapPair {
  const FaceRecord* source = nullptr;
  const FaceRecord* target = nullptr;
  FaceCoefficients coefficients;
};
// coefficients = target's with the listed attributes taken from the source.
SwapPair make_swap(const FaceRecord& source, const FaceRecord& target, AttributeSet attributes = kIdentity);

// Batched generator inputs plus what the losses need.
struct SwapBatch {
  Tensor conditioning;         // B x conditioning_size
  Tensor render;               // B x 3 x S x S shaded render of `coefficients`, [-1, 1]
  Tensor z_id;                 // B x E source embeddings
  Tensor target_images;        // B x 3 x S x S
  Tensor target_seg;           // B x N x S x S
  Tensor seg;                  // B x N x S x S layout of the rendered coefficients
  Tensor background;           // B x 3 x S x S target outside both faces
  Tensor landmarks;            // B x 2K normalized projection of `coefficients`
  std::vector<FivePoints> five_points;  // of `coefficients`, for aligning generated images
  std::vector<FaceCoefficients> coefficients;

  int size() const { return static_cast<int>(coefficients.size()); }
};

SwapBatch assemble_swap_batch(const MorphableBasis& basis, std::span<const SwapPair> pairs,
                              const IdentityEncoder& identity_encoder);

// Generator inputs for a batch; `styles` may be undefined when the style
// path is off.
GeneratorInputs generator_inputs(const SwapBatch& batch, const Var& styles);

// Source embeddings of face records (aligned with their own landmarks).
Tensor embed_records(std::span<const FaceRecord* const> records, const IdentityEncoder& encoder);

}  // namespace facectl
