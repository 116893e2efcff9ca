#include "facectl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "facectl/optim.hpp"

namespace facectl {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

Var half_mean_square(const Var& diff) { return ops::scale(ops::mean(ops::square(diff)), 0.5); }

}  // namespace

void LossWeights::validate() const {
  for (double w : {identity, landmark, hm, perceptual}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be finite and non-negative");
  }
}

std::string to_string(TrainMode m) { return m == TrainMode::Reconstruction ? "reconstruction" : "generation"; }

LossGates gates_for(TrainMode mode) {
  LossGates g;
  if (mode == TrainMode::Reconstruction) {
    g.perceptual = true;
  } else {
    g.identity = g.landmark = g.hm = true;
  }
  return g;
}

TotalLoss total_loss(const LossTerms& terms, const LossWeights& weights, const LossGates& gates) {
  weights.validate();
  require(terms.adversarial.defined(), "total_loss: the adversarial term is always active");
  TotalLoss out;
  out.report.active = gates;
  out.total = terms.adversarial;
  out.report.adversarial = terms.adversarial.value().item();
  auto add = [&](bool on, const Var& term, double w, double& slot, const char* name) {
    if (!on) return;
    require(term.defined(), std::string("total_loss: active term '") + name + "' was not computed");
    slot = term.value().item();
    out.total = ops::add(out.total, ops::scale(term, w));
  };
  add(gates.identity, terms.identity, weights.identity, out.report.identity, "identity");
  add(gates.landmark, terms.landmark, weights.landmark, out.report.landmark, "landmark");
  add(gates.hm, terms.hm, weights.hm, out.report.hm, "hm");
  add(gates.perceptual, terms.perceptual, weights.perceptual, out.report.perceptual, "perceptual");
  out.report.total = out.total.value().item();
  return out;
}

// --- perceptual ----------------------------------------------------------------------------

PerceptualExtractor::PerceptualExtractor(const PerceptualConfig& config, std::uint64_t seed) : config_(config) {
  require(!config.layers.empty(), "perceptual extractor needs at least one layer");
  const int deepest = *std::max_element(config.layers.begin(), config.layers.end());
  require(*std::min_element(config.layers.begin(), config.layers.end()) >= 1 &&
              deepest <= static_cast<int>(config.channels.size()),
          "perceptual layers must index existing stages (1-based)");
  Initializer init(seed);
  int in = 3;
  for (std::size_t s = 0; s < config.channels.size(); ++s) {
    stages_.emplace_back(in, config.channels[s], 3, s == 0 ? 1 : 2, 1, false, init);
    in = config.channels[s];
  }
}

std::vector<Var> PerceptualExtractor::features(const Var& image) const {
  const int deepest = *std::max_element(config_.layers.begin(), config_.layers.end());
  std::vector<Var> out;
  Var h = image;
  for (int s = 1; s <= deepest; ++s) {
    h = ops::leaky_relu(stages_[s - 1].forward(h));
    if (std::find(config_.layers.begin(), config_.layers.end(), s) != config_.layers.end()) out.push_back(h);
  }
  return out;
}

void PerceptualExtractor::visit(const std::string& prefix, StateVisitor& v) {
  for (std::size_t s = 0; s < stages_.size(); ++s) stages_[s].visit(prefix + ".stage" + std::to_string(s + 1), v);
}

Var perceptual_loss(const Var& target, const Var& generated, const PerceptualExtractor& extractor) {
  require(target.shape() == generated.shape(), "perceptual_loss: images differ in shape");
  const std::vector<Var> ft = extractor.features(target), fg = extractor.features(generated);
  Var total;
  for (std::size_t l = 0; l < ft.size(); ++l) {
    const Var term = half_mean_square(ops::sub(ft[l], fg[l]));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

// --- identity ----------------------------------------------------------------------------------

Var identity_loss(const Var& generated_embedding, const Var& source_embedding) {
  require(generated_embedding.shape() == source_embedding.shape() && generated_embedding.shape().size() == 2,
          "identity_loss: embeddings must be matching B x D matrices");
  for (const Var* e : {&generated_embedding, &source_embedding}) {
    const int B = e->dim(0), D = e->dim(1);
    for (int b = 0; b < B; ++b) {
      double n = 0.0;
      for (int d = 0; d < D; ++d) n += e->value()[b * D + d] * e->value()[b * D + d];
      require(!(n == 0.0), "identity_loss: zero-norm embedding");
    }
  }
  const Var cos = ops::cosine_similarity_rows(generated_embedding, source_embedding);
  return ops::add_scalar(ops::scale(ops::mean(cos), -1.0), 1.0);
}

// --- landmarks ---------------------------------------------------------------------------------

Eigen::MatrixX2d aligned_landmarks(const FaceCoefficients& source, const FaceCoefficients& target,
                                   const MorphableBasis& basis, int image_size) {
  return project_landmarks(basis, remap_coefficients(source, target, kIdentity), image_size);
}

LandmarkRegressor::LandmarkRegressor(const LandmarkRegressorConfig& config, std::uint64_t seed) : config_(config) {
  require(!config.channels.empty() && config.landmarks > 0, "landmark regressor needs layers and landmarks");
  int side = config.image_size;
  for (std::size_t l = 0; l < config.channels.size(); ++l) {
    require(side % 2 == 0, "landmark regressor: image size must stay even through every stride-2 layer");
    side /= 2;
  }
  Initializer init(seed);
  int in = 3;
  for (int c : config.channels) {
    convs_.emplace_back(in, c, 3, 2, 1, false, init);
    in = c;
  }
  head_ = Linear(in * side * side, 2 * config.landmarks, init, 1e-3);
  // Predictions start at the image centre.
  for (double& b : head_.bias.mutable_value().values()) b = 0.5;
}

Var LandmarkRegressor::forward(const Var& images) const {
  const int S = config_.image_size;
  require(images.shape().size() == 4 && images.dim(1) == 3 && images.dim(2) == S && images.dim(3) == S,
          "landmark regressor expects B x 3 x " + std::to_string(S) + " x " + std::to_string(S) + " images, got " +
              to_string(images.shape()));
  Var h = images;
  for (const auto& c : convs_) h = ops::leaky_relu(c.forward(h));
  const int B = images.dim(0);
  return head_.forward(ops::reshape(h, {B, static_cast<int>(h.value().size() / B)}));
}

void LandmarkRegressor::visit(const std::string& prefix, StateVisitor& v) {
  for (std::size_t l = 0; l < convs_.size(); ++l) convs_[l].visit(prefix + ".conv" + std::to_string(l), v);
  head_.visit(prefix + ".head", v);
}

Tensor normalize_landmarks(std::span<const Eigen::MatrixX2d> landmarks, int image_size) {
  require(!landmarks.empty(), "normalize_landmarks: empty batch");
  const int B = static_cast<int>(landmarks.size()), K = static_cast<int>(landmarks[0].rows());
  Tensor out({B, 2 * K});
  for (int b = 0; b < B; ++b) {
    require(landmarks[b].rows() == K, "normalize_landmarks: landmark counts differ");
    for (int k = 0; k < K; ++k) {
      out(b, 2 * k) = landmarks[b](k, 0) / image_size;
      out(b, 2 * k + 1) = landmarks[b](k, 1) / image_size;
    }
  }
  return out;
}

Var landmark_loss(const Var& predicted, const Tensor& reference) {
  require(predicted.shape() == reference.shape() && reference.rank() == 2 && reference.dim(1) % 2 == 0,
          "landmark_loss: prediction " + to_string(predicted.shape()) + " and reference " +
              to_string(reference.shape()) + " must be matching B x 2K matrices");
  // mean over coordinates is half the mean over points of the squared distance.
  const Var d = ops::sub(predicted, Var::constant(reference));
  return ops::mean(ops::square(d));
}

double landmark_error_px(const Tensor& predicted, const Tensor& reference, int image_size) {
  require(predicted.shape() == reference.shape() && reference.rank() == 2, "landmark_error_px: shape mismatch");
  const std::size_t points = reference.size() / 2;
  double total = 0.0;
  for (std::size_t p = 0; p < points; ++p) {
    const double dx = predicted[2 * p] - reference[2 * p], dy = predicted[2 * p + 1] - reference[2 * p + 1];
    total += std::sqrt(dx * dx + dy * dy);
  }
  return total / static_cast<double>(points) * image_size;
}

LandmarkPretrainReport pretrain_landmark_regressor(LandmarkRegressor& regressor, const LandmarkSampler& sampler,
                                                   const LandmarkPretrainConfig& config) {
  require(config.steps > 0 && config.batch > 0 && config.validation_samples > 0, "landmark pretraining: bad config");
  auto params = collect_parameters([&](StateVisitor& v) { regressor.visit("landmarks", v); });
  set_trainable(params, true);
  Adam adam(params, AdamConfig{config.lr, 0.9, 0.999, 1e-8});
  std::mt19937_64 rng(config.seed);
  for (int step = 0; step < config.steps; ++step) {
    const LandmarkBatch batch = sampler(rng, config.batch);
    adam.zero_grad();
    backward(landmark_loss(regressor.forward(Var::constant(batch.images)), batch.landmarks));
    // Cosine decay to zero.
    const double lr = 0.5 * config.lr * (1.0 + std::cos(std::numbers::pi * step / config.steps));
    adam.step(lr);
  }
  set_trainable(params, false);

  std::mt19937_64 val_rng(config.seed ^ 0x5eed5eedULL);
  LandmarkPretrainReport report;
  report.steps = config.steps;
  double err = 0.0;
  int seen = 0;
  NoGradGuard guard;
  while (seen < config.validation_samples) {
    const int n = std::min(config.batch, config.validation_samples - seen);
    const LandmarkBatch batch = sampler(val_rng, n);
    const Tensor pred = regressor.forward(Var::constant(batch.images)).value();
    err += landmark_error_px(pred, batch.landmarks, regressor.config().image_size) * n;
    seen += n;
  }
  report.validation_error_px = err / seen;
  if (!(report.validation_error_px < config.threshold_px)) {
    std::ostringstream msg;
    msg << "landmark regressor reached " << report.validation_error_px << " px mean held-out error after "
        << config.steps << " steps; the threshold is " << config.threshold_px
        << " px (increase the pretraining steps or check the corpus)";
    throw std::runtime_error(msg.str());
  }
  return report;
}

// --- histogram matching ----------------------------------------------------------------------------

namespace {

int bin_of(double v) {
  const double w = 2.0 / kHistogramBins;
  const int b = static_cast<int>(std::floor((std::clamp(v, -1.0, 1.0) + 1.0) / w));
  return std::clamp(b, 0, kHistogramBins - 1);
}

double bin_center(int b) { return -1.0 + (b + 0.5) * (2.0 / kHistogramBins); }

// Matches generated values at `gpix` to the target values at `tpix` within one
// channel plane. Each occupied bin is represented by its mid-rank quantile;
// generated bins are sent through the piecewise-linear inverse of the
// target's quantile-to-centre map.
void match_plane(const double* target, const std::vector<std::size_t>& tpix, const double* generated,
                 const std::vector<std::size_t>& gpix, double* out) {
  std::array<double, kHistogramBins> ht{}, hg{};
  for (std::size_t p : tpix) ht[bin_of(target[p])] += 1.0;
  for (std::size_t p : gpix) hg[bin_of(generated[p])] += 1.0;
  const double nt = static_cast<double>(tpix.size()), ng = static_cast<double>(gpix.size());
  std::vector<double> tq, tx;
  double cum = 0.0;
  for (int b = 0; b < kHistogramBins; ++b) {
    if (ht[b] == 0.0) continue;
    tq.push_back((cum + 0.5 * ht[b]) / nt);
    tx.push_back(bin_center(b));
    cum += ht[b];
  }
  std::array<double, kHistogramBins> mapped{};
  cum = 0.0;
  for (int b = 0; b < kHistogramBins; ++b) {
    if (hg[b] == 0.0) continue;
    const double q = (cum + 0.5 * hg[b]) / ng;
    cum += hg[b];
    if (q <= tq.front()) {
      mapped[b] = tx.front();
    } else if (q >= tq.back()) {
      mapped[b] = tx.back();
    } else {
      const auto hi = static_cast<std::size_t>(std::upper_bound(tq.begin(), tq.end(), q) - tq.begin());
      const std::size_t lo = hi - 1;
      const double a = (q - tq[lo]) / (tq[hi] - tq[lo]);
      mapped[b] = tx[lo] + a * (tx[hi] - tx[lo]);
    }
  }
  for (std::size_t p : gpix) out[p] = mapped[bin_of(generated[p])];
}

void check_seg(const Tensor* seg, const Tensor& image, const char* which) {
  if (!seg) return;
  require(seg->rank() == 4 && seg->dim(0) == image.dim(0) && seg->dim(2) == image.dim(2) &&
              seg->dim(3) == image.dim(3),
          std::string("histogram_match: ") + which + " segmentation does not match the images");
}

std::vector<std::size_t> region_pixels(const Tensor* seg, int b, int n, std::size_t P) {
  std::vector<std::size_t> pixels;
  if (!seg) {
    pixels.resize(P);
    for (std::size_t p = 0; p < P; ++p) pixels[p] = p;
    return pixels;
  }
  const double* m = seg->data() + (static_cast<std::size_t>(b) * seg->dim(1) + n) * P;
  for (std::size_t p = 0; p < P; ++p)
    if (m[p] != 0.0) pixels.push_back(p);
  return pixels;
}

}  // namespace

Tensor histogram_match(const Tensor& target, const Tensor& generated, const Tensor* seg) {
  return histogram_match(target, generated, seg, seg);
}

Tensor histogram_match(const Tensor& target, const Tensor& generated, const Tensor* target_seg,
                       const Tensor* generated_seg) {
  require(target.shape() == generated.shape() && target.rank() == 4,
          "histogram_match: images must share a B x C x H x W shape");
  require((target_seg == nullptr) == (generated_seg == nullptr),
          "histogram_match: give region maps for both images or for neither");
  check_seg(target_seg, target, "target");
  check_seg(generated_seg, generated, "generated");
  require(!target_seg || target_seg->dim(1) == generated_seg->dim(1),
          "histogram_match: region maps disagree on the class count");
  const int B = target.dim(0), C = target.dim(1);
  const std::size_t P = static_cast<std::size_t>(target.dim(2)) * target.dim(3);
  Tensor out = generated;
  const int N = target_seg ? target_seg->dim(1) : 1;
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n) {
      const std::vector<std::size_t> tpix = region_pixels(target_seg, b, n, P);
      const std::vector<std::size_t> gpix = region_pixels(generated_seg, b, n, P);
      if (tpix.empty() || gpix.empty()) continue;  // region absent: keep the generated values
      for (int c = 0; c < C; ++c) {
        const std::size_t off = (static_cast<std::size_t>(b) * C + c) * P;
        match_plane(target.data() + off, tpix, generated.data() + off, gpix, out.data() + off);
      }
    }
  return out;
}

Var histogram_matching_loss(const Var& generated, const Tensor& remapped) {
  require(generated.shape() == remapped.shape(), "histogram_matching_loss: shape mismatch");
  return half_mean_square(ops::sub(generated, Var::constant(remapped)));
}

// --- adversarial ---------------------------------------------------------------------------------

Var discriminator_hinge_loss(std::span<const Var> real_logits, std::span<const Var> fake_logits) {
  require(!real_logits.empty() && real_logits.size() == fake_logits.size(),
          "discriminator_hinge_loss: real and fake logits need the same scales");
  Var total;
  for (std::size_t s = 0; s < real_logits.size(); ++s) {
    const Var real = ops::mean(ops::relu(ops::add_scalar(ops::scale(real_logits[s], -1.0), 1.0)));
    const Var fake = ops::mean(ops::relu(ops::add_scalar(fake_logits[s], 1.0)));
    const Var term = ops::add(real, fake);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return ops::scale(total, 1.0 / static_cast<double>(real_logits.size()));
}

Var generator_hinge_loss(std::span<const Var> fake_logits) {
  require(!fake_logits.empty(), "generator_hinge_loss: no logits");
  Var total;
  for (const Var& f : fake_logits) {
    const Var term = ops::mean(f);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return ops::scale(total, -1.0 / static_cast<double>(fake_logits.size()));
}

Var feature_matching_loss(const std::vector<std::vector<Var>>& real, const std::vector<std::vector<Var>>& fake) {
  require(!real.empty() && real.size() == fake.size(), "feature_matching_loss: scale mismatch");
  Var total;
  for (std::size_t s = 0; s < real.size(); ++s) {
    require(real[s].size() == fake[s].size(), "feature_matching_loss: layer mismatch");
    for (std::size_t l = 0; l < real[s].size(); ++l) {
      const Var d = ops::sub(fake[s][l], ops::detach(real[s][l]));
      // |x| = sqrt(x^2) is not smooth at 0; relu(x) + relu(-x) is exact and piecewise linear.
      const Var term = ops::mean(ops::add(ops::relu(d), ops::relu(ops::scale(d, -1.0))));
      total = total.defined() ? ops::add(total, term) : term;
    }
  }
  return ops::scale(total, 1.0 / static_cast<double>(real.size()));
}

}  // namespace facectl
