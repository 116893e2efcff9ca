#pragma once

#include <cstdint>

#include "facectl/corpus.hpp"
#include "facectl/encoders.hpp"
#include "facectl/losses.hpp"

namespace facectl {

// Large-margin cosine fine-tuning of the identity encoder on fresh renders of
// the corpus identities.
struct IdentityFinetuneConfig {
  int steps = 600;
  int per_identity = 4;  // renders per identity per step
  double lr = 1e-3;
  double scale = 16.0;
  double margin = 0.2;
  std::uint64_t seed = 21;
};
struct IdentityFinetuneReport {
  double final_loss = 0.0;
  double heldout_accuracy = 0.0;  // nearest-centroid retrieval on the corpus samples
  int steps = 0;
};
IdentityFinetuneReport finetune_identity_encoder(IdentityEncoder& encoder, const MorphableBasis& basis,
                                                 const SyntheticCorpus& corpus, const IdentityFinetuneConfig& config);

// Nearest-centroid identity retrieval of corpus samples against centroids of
// `gallery` embeddings (B x E rows, labels alongside).
double centroid_retrieval_accuracy(const Tensor& probes, std::span<const int> probe_labels, const Tensor& gallery,
                                   std::span<const int> gallery_labels);

// Fresh random faces over random backgrounds with their normalized landmarks.
LandmarkSampler random_face_sampler(const MorphableBasis& basis, const CorpusConfig& corpus);

struct StandInConfig {
  IdentityEncoderConfig identity;
  std::uint64_t identity_seed = 5;
  IdentityFinetuneConfig finetune;
  LandmarkRegressorConfig landmarks;
  std::uint64_t landmark_seed = 9;
  LandmarkPretrainConfig pretrain;
  PerceptualConfig perceptual;
  std::uint64_t perceptual_seed = 3;
};

// The frozen networks the losses rely on.
struct StandIns {
  IdentityEncoder identity;
  LandmarkRegressor landmarks;
  PerceptualExtractor perceptual;
  IdentityFinetuneReport identity_report;
  LandmarkPretrainReport landmark_report;

  // Freshly initialized (untrained) networks.
  static StandIns initialize(const StandInConfig& config);
  void visit(StateVisitor& v);
  Archive to_archive();
  static StandIns from_archive(const Archive& a, const StandInConfig& config);
};

// Initializes, fine-tunes and pretrains every stand-in, then freezes them.
// Throws std::runtime_error if the landmark regressor misses its threshold.
StandIns prepare_stand_ins(const MorphableBasis& basis, const SyntheticCorpus& corpus, const StandInConfig& config);

}  // namespace facectl
