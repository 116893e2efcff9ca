#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "facectl/corpus.hpp"
#include "facectl/generator.hpp"
#include "facectl/losses.hpp"
#include "facectl/optim.hpp"
#include "facectl/pipeline.hpp"
#include "facectl/standins.hpp"

namespace facectl {

struct TrainConfig {
  static constexpr int kVersion = 1;

  int total_steps = 2000;
  int batch_size = 4;
  double reconstruction_fraction = 0.2;
  int landmark_warmup_steps = -1;  // negative: 2% of total_steps
  double lr_g = 1e-4;
  double lr_d = 4e-4;
  double decay_fraction = 0.2;  // linear decay to 0 over this final share of the run
  std::uint64_t seed = 1;
  std::uint64_t basis_seed = 7;
  std::uint64_t corpus_seed = 1;
  int checkpoint_every = 500;  // 0 disables intermediate checkpoints

  bool use_identity_encoder = true;
  bool use_style_encoder = true;
  bool use_aligned_landmarks = true;
  bool use_hm_loss = true;
  bool feature_matching = false;
  double feature_matching_weight = 10.0;
  ConditioningMode conditioning = ConditioningMode::Both;

  LossWeights weights;
  CorpusConfig corpus;
  StandInConfig stand_ins;
  GeneratorConfig generator;
  StyleEncoderConfig style_encoder;
  DiscriminatorConfig discriminator;

  int warmup_steps() const;
  // Throws std::invalid_argument naming the first bad field.
  void validate() const;
  // Versioned JSON; unknown keys are rejected, missing keys keep defaults.
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
  static TrainConfig load(const std::string& path);
  // CRC32 of the canonical JSON with run-length-only fields (checkpoint_every) removed.
  std::string hash() const;
  // Generator config with the ablation switches applied.
  GeneratorConfig generator_config() const;
};

// lr at `step`: constant, then linear to 0 at total_steps over the decay window.
double scheduled_lr(double base, int step, int total_steps, double decay_fraction);

// Thrown when a step produces a non-finite loss. The trainer state is rolled
// back to what it was before the step.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepMetrics {
  int step = 0;
  int reconstruction = 0;  // rows of the batch in each mode
  int generation = 0;
  LossReport g;
  double d_loss = 0.0;
  double feature_matching = 0.0;
  double lr_g = 0.0;
  double lr_d = 0.0;
  double wall_time = 0.0;  // seconds since the run started

  // One JSON object. `deterministic` leaves out the wall time.
  std::string to_json(bool deterministic = false) const;
};

// The rows of one training batch.
struct TrainingBatch {
  std::vector<SamplePair> pairs;
  SwapBatch swap;
  Tensor naive_landmarks;  // B x 2K target landmarks, used when aligned landmarks are off
};

class Trainer {
 public:
  // `stand_ins` must outlive the trainer.
  Trainer(const TrainConfig& config, const MorphableBasis& basis, const SyntheticCorpus& corpus, StandIns& stand_ins);

  TrainingBatch next_batch();  // draws from the trainer's rng
  TrainingBatch make_batch(const std::vector<SamplePair>& pairs) const;
  StepMetrics train_step(const TrainingBatch& batch);
  StepMetrics train_step() { return train_step(next_batch()); }

  int step() const { return step_; }
  const TrainConfig& config() const { return config_; }
  Generator& generator() { return generator_; }
  StyleEncoder& style_encoder() { return style_encoder_; }
  Discriminator& discriminator() { return discriminator_; }
  StandIns& stand_ins() { return stand_ins_; }

  // Styles of the batch targets, undefined when the style path is off.
  Var encode_styles(const SwapBatch& batch) const;
  // Eval-mode generation for a batch.
  Tensor generate(const SwapBatch& batch, const Tensor* styles_override = nullptr);

  // Generator, style encoder, discriminator, optimizers, step counter and rng.
  void visit_trainable_state(StateVisitor& v);
  // Full checkpoint: trainable state, stand-ins, basis and config.
  void save_checkpoint(const std::string& path);
  // Throws ArchiveError on a corrupt file or a config hash mismatch; the
  // trainer is untouched on failure.
  void load_checkpoint(const std::string& path);

 private:
  TrainConfig config_;
  const MorphableBasis& basis_;
  const SyntheticCorpus& corpus_;
  StandIns& stand_ins_;
  Generator generator_;
  StyleEncoder style_encoder_;
  Discriminator discriminator_;
  Adam adam_g_;
  Adam adam_d_;
  std::vector<NamedParameter> g_params_;
  std::vector<NamedParameter> d_params_;
  std::mt19937_64 rng_;
  int step_ = 0;
};

// A trained model read back from a checkpoint, for the command-line tools.
struct ModelBundle {
  TrainConfig config;
  MorphableBasis basis;
  StandIns stand_ins;
  Generator generator;
  StyleEncoder style_encoder;
  int step = 0;

  static ModelBundle load(const std::string& checkpoint_path);
  Var encode_styles(const Tensor& images, const Tensor& seg) const;
  // Eval-mode generation; `styles` may be undefined when the style path is off.
  Tensor generate(const SwapBatch& batch, const Var& styles);
};

struct RunOptions {
  std::string out_dir;
  std::string resume_from;    // checkpoint to continue from, optional
  std::string stand_ins_path; // reuse prepared stand-ins, optional
  std::function<void(const StepMetrics&)> on_step;
};
struct RunResult {
  std::string final_checkpoint;
  std::string metrics_path;
  int steps = 0;
  double seconds = 0.0;
};

// Builds the basis and corpus from the config seeds, prepares (or loads) the
// stand-ins, trains, and writes metrics.jsonl, config.json and checkpoints
// into out_dir.
RunResult run_training(const TrainConfig& config, const RunOptions& options);

// Same, with a corpus and stand-ins already in memory.
RunResult run_training(const TrainConfig& config, const MorphableBasis& basis, const SyntheticCorpus& corpus,
                       StandIns& stand_ins, const RunOptions& options);

}  // namespace facectl
