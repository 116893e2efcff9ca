#include "facectl/pipeline.hpp"

#include <algorithm>
#include <stdexcept>

#include "facectl/losses.hpp"

namespace facectl {

SwapPair make_swap(const FaceRecord& source, const FaceRecord& target, AttributeSet attributes) {
  return {&source, &target, remap_coefficients(source.coefficients, target.coefficients, attributes)};
}

Tensor embed_records(std::span<const FaceRecord* const> records, const IdentityEncoder& encoder) {
  if (records.empty()) throw std::invalid_argument("embed_records: no records");
  std::vector<Tensor> images;
  std::vector<FivePoints> points;
  for (const FaceRecord* r : records) {
    images.push_back(r->image);
    points.push_back(five_point_landmarks(r->landmarks));
  }
  NoGradGuard guard;
  return encoder.embed(Var::constant(stack(images)), points).value();
}

SwapBatch assemble_swap_batch(const MorphableBasis& basis, std::span<const SwapPair> pairs,
                              const IdentityEncoder& identity_encoder) {
  if (pairs.empty()) throw std::invalid_argument("assemble_swap_batch: no pairs");
  const int S = pairs[0].target->image_size();
  const std::size_t P = static_cast<std::size_t>(S) * S;
  SwapBatch out;
  std::vector<Tensor> renders, targets, tsegs, segs, backgrounds;
  std::vector<Eigen::MatrixX2d> landmarks;
  std::vector<const FaceRecord*> sources;
  for (const SwapPair& pr : pairs) {
    if (!pr.source || !pr.target) throw std::invalid_argument("assemble_swap_batch: pair without source or target");
    if (pr.target->image_size() != S || pr.source->image_size() != S)
      throw std::invalid_argument("assemble_swap_batch: all images must share one size");
    const RenderedFace r = render_face(basis, pr.coefficients, S);
    Tensor render({3, S, S});
    for (std::size_t i = 0; i < 3 * P; ++i) render[i] = 2.0 * r.image[i] - 1.0;
    renders.push_back(std::move(render));
    targets.push_back(pr.target->image);
    tsegs.push_back(pr.target->region_map);
    segs.push_back(r.region_map);
    // Keep only pixels that are background for both the target and the new face.
    Tensor bg = pr.target->image;
    for (int c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < P; ++p)
        if (pr.target->face_mask[p] > 0.0 || r.face_mask[p] > 0.0) bg[c * P + p] = 0.0;
    backgrounds.push_back(std::move(bg));
    landmarks.push_back(project_landmarks(basis, pr.coefficients, S));
    out.five_points.push_back(five_point_landmarks(landmarks.back()));
    out.coefficients.push_back(pr.coefficients);
    sources.push_back(pr.source);
  }
  out.conditioning = conditioning_batch(basis, out.coefficients);
  out.render = stack(renders);
  out.target_images = stack(targets);
  out.target_seg = stack(tsegs);
  out.seg = stack(segs);
  out.background = stack(backgrounds);
  out.landmarks = normalize_landmarks(landmarks, S);
  out.z_id = embed_records(sources, identity_encoder);
  return out;
}

GeneratorInputs generator_inputs(const SwapBatch& batch, const Var& styles) {
  GeneratorInputs in;
  in.conditioning = Var::constant(batch.conditioning);
  in.render = batch.render;
  in.z_id = Var::constant(batch.z_id);
  in.styles = styles;
  in.seg = batch.seg;
  in.background = batch.background;
  return in;
}

}  // namespace facectl
