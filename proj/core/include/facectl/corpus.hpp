#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "facectl/archive.hpp"
#include "facectl/morphable_model.hpp"

namespace facectl {

// The synthetic basis used throughout, rounded through its archive form so a
// basis rebuilt from a seed and one read back from disk are bit-identical.
MorphableBasis desk_basis(std::uint64_t seed);

// One face image with everything the pipeline needs to know about it.
struct FaceRecord {
  FaceCoefficients coefficients;
  Tensor image;                // 3 x S x S in [-1, 1]
  Tensor face_mask;            // S x S in {0, 1}
  Tensor region_map;           // N x S x S one-hot; class 0 is background
  Eigen::MatrixX2d landmarks;  // K x 2 pixel coordinates

  int image_size() const { return image.dim(2); }
};

// 3 x S x S smooth colour gradient with a faint stripe pattern, in [-1, 1].
Tensor random_background(std::mt19937_64& rng, int image_size);

// Renders `c` and composites the face over `background` (3 x S x S, or empty
// for black).
FaceRecord render_record(const MorphableBasis& basis, const FaceCoefficients& c, int image_size,
                         const Tensor& background);

struct CorpusConfig {
  int identities = 8;
  int samples_per_identity = 32;
  int image_size = 64;
  double texture_jitter = 0.1;  // per-sample texture noise, in units of the texture prior std
  bool backgrounds = true;
  PoseRanges pose;
  void validate() const;
};

struct CorpusSample : FaceRecord {
  int identity = 0;
};

struct SyntheticCorpus {
  CorpusConfig config;
  std::vector<CorpusSample> samples;  // identity-major order

  int identity_count() const { return config.identities; }
  // Sample indices of one identity.
  std::vector<int> indices_of(int identity) const;

  Archive to_archive() const;
  static SyntheticCorpus from_archive(const Archive& a);
};

// Identity (shape and base texture) fixed per identity; expression, lighting,
// pose, background and a small texture jitter drawn per sample.
SyntheticCorpus build_synthetic_corpus(const MorphableBasis& basis, const CorpusConfig& config, std::mt19937_64& rng);

// Shape and mean texture of one corpus identity.
struct IdentityPrototype {
  Eigen::VectorXd alpha;
  Eigen::VectorXd delta;
};
std::vector<IdentityPrototype> identity_prototypes(const SyntheticCorpus& corpus);
// A fresh (held-out) render of an identity: new expression, lighting, pose,
// background and texture jitter drawn as in the corpus.
FaceRecord render_identity(const MorphableBasis& basis, const IdentityPrototype& identity, const CorpusConfig& config,
                           std::mt19937_64& rng);

enum class PairMode { Reconstruction, Generation };
std::string to_string(PairMode m);

struct SamplePair {
  int source = 0;
  int target = 0;
  PairMode mode = PairMode::Generation;
};

// Reconstruction with probability `reconstruction_fraction` (source equals
// target), otherwise source and target from different identities. Throws if
// a generation pair could be requested from a single-identity corpus.
SamplePair sample_pair(const SyntheticCorpus& corpus, std::mt19937_64& rng, double reconstruction_fraction);

}  // namespace facectl
