#include "facectl/evaluation.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

namespace facectl {

namespace {

double cosine(const Tensor& a, int i, const Tensor& b, int j) {
  const int E = a.dim(1);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int e = 0; e < E; ++e) {
    dot += a(i, e) * b(j, e);
    na += a(i, e) * a(i, e);
    nb += b(j, e) * b(j, e);
  }
  return na > 0.0 && nb > 0.0 ? dot / std::sqrt(na * nb) : 0.0;
}

double wrapped_deg(double radians) {
  const double d = std::remainder(radians, 2.0 * std::numbers::pi);
  return d * 180.0 / std::numbers::pi;
}

}  // namespace

double identity_retrieval_accuracy(const Tensor& generated, std::span<const int> intended, const Tensor& gallery) {
  if (generated.rank() != 2 || gallery.rank() != 2 || generated.dim(1) != gallery.dim(1) ||
      generated.dim(0) != static_cast<int>(intended.size()) || generated.dim(0) == 0)
    throw std::invalid_argument("identity_retrieval_accuracy: shape mismatch");
  int correct = 0;
  for (int i = 0; i < generated.dim(0); ++i) {
    int best = 0;
    double best_sim = -2.0;
    for (int g = 0; g < gallery.dim(0); ++g) {
      const double s = cosine(generated, i, gallery, g);
      if (s > best_sim) {
        best_sim = s;
        best = g;
      }
    }
    correct += best == intended[i];
  }
  return static_cast<double>(correct) / generated.dim(0);
}

LandmarkEstimator regressor_estimator(const LandmarkRegressor& regressor) {
  return [&regressor](const Tensor& image) {
    const int S = image.dim(1);
    NoGradGuard guard;
    const Tensor pred = regressor.forward(Var::constant(image.reshaped({1, 3, S, S}))).value();
    Eigen::MatrixX2d out(pred.dim(1) / 2, 2);
    for (Eigen::Index k = 0; k < out.rows(); ++k) {
      out(k, 0) = pred[2 * k] * S;
      out(k, 1) = pred[2 * k + 1] * S;
    }
    return out;
  };
}

double pose_distance_deg(const FaceCoefficients& a, const FaceCoefficients& b) {
  double s = 0.0;
  for (int i = 0; i < 3; ++i) s += std::pow(wrapped_deg(a.theta[i] - b.theta[i]), 2);
  return std::sqrt(s);
}

double expression_distance(const MorphableBasis& basis, const FaceCoefficients& a, const FaceCoefficients& b) {
  return (a.rho - b.rho).cwiseQuotient(basis.exp_scales).norm();
}

AttributeError attribute_error(const Tensor& image, const FaceCoefficients& reference, const MorphableBasis& basis,
                               const LandmarkEstimator& estimator, const FitOptions& fit) {
  const FitResult r = fit_coefficients(estimator(image), basis, fit);
  AttributeError out;
  out.excluded = !r.converged || !r.coefficients.all_finite();
  if (!out.excluded) {
    out.pose_deg = pose_distance_deg(r.coefficients, reference);
    out.expression = expression_distance(basis, r.coefficients, reference);
  }
  return out;
}

void LocalityTotals::add(const Tensor& before, const Tensor& after, const Tensor& mask) {
  const int S = mask.dim(0), P = S * S;
  if (before.shape() != after.shape() || before.dim(1) != S) throw std::invalid_argument("LocalityTotals: shape mismatch");
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < P; ++p) {
      const double d = std::abs(after[c * P + p] - before[c * P + p]);
      if (mask[p] > 0.5) {
        inside += d;
        inside_pixels += 1.0;
      } else {
        outside += d;
        outside_pixels += 1.0;
      }
    }
}

double LocalityTotals::ratio() const {
  if (inside_pixels == 0.0 || outside_pixels == 0.0) return 0.0;
  const double out = outside / outside_pixels;
  return out > 0.0 ? (inside / inside_pixels) / out : std::numeric_limits<double>::infinity();
}

std::optional<double> region_color_distance(const Tensor& generated, const Tensor& generated_seg, const Tensor& reference,
                                            const Tensor& reference_seg) {
  const int N = generated_seg.dim(0), P = generated.dim(1) * generated.dim(2);
  if (reference_seg.shape() != generated_seg.shape() || reference.shape() != generated.shape())
    throw std::invalid_argument("region_color_distance: shape mismatch");
  auto mean_colour = [&](const Tensor& img, const Tensor& seg, int n, Eigen::Vector3d& out) {
    double area = 0.0;
    out.setZero();
    for (int p = 0; p < P; ++p) {
      const double m = seg[static_cast<std::size_t>(n) * P + p];
      if (m <= 0.5) continue;
      area += 1.0;
      for (int c = 0; c < 3; ++c) out[c] += img[c * P + p];
    }
    if (area > 0.0) out /= area;
    return area > 0.0;
  };
  double total = 0.0;
  int regions = 0;
  for (int n = 1; n < N; ++n) {  // class 0 is background
    Eigen::Vector3d g, r;
    if (!mean_colour(generated, generated_seg, n, g) || !mean_colour(reference, reference_seg, n, r)) continue;
    total += (g - r).norm();
    ++regions;
  }
  if (regions == 0) return std::nullopt;
  return total / regions;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["pairs"] = pairs;
  j["step"] = step;
  j["identity_retrieval"] = identity_retrieval;
  j["source_similarity"] = source_similarity;
  j["target_similarity"] = target_similarity;
  j["pose_error_deg"] = pose_error_deg;
  j["expression_error"] = expression_error;
  j["fit_excluded"] = fit_excluded;
  j["region_color_distance"] = region_color_distance;
  j["reconstruction_l1"] = reconstruction_l1;
  j["baseline_l1"] = baseline_l1;
  j["locality_ratio"] = locality_ratio;
  return j.dump(2);
}

EvalReport evaluate_model(ModelBundle& model, const SyntheticCorpus& corpus, const EvalConfig& config,
                          const LandmarkEstimator& estimator) {
  if (config.pairs < 1) throw std::invalid_argument("evaluation needs at least one pair");
  const int G = corpus.identity_count();
  if (G < 2) throw std::invalid_argument("evaluation needs at least two identities");
  const int S = corpus.config.image_size, P = S * S;
  const LandmarkEstimator estimate = estimator ? estimator : regressor_estimator(model.stand_ins.landmarks);
  const int edit_region = region_index(config.edit_region);
  FitOptions fit;
  fit.image_size = S;

  // One reference embedding per identity: the mean over its corpus samples.
  std::vector<Tensor> centroids;
  for (int g = 0; g < G; ++g) {
    std::vector<const FaceRecord*> records;
    for (int i : corpus.indices_of(g)) records.push_back(&corpus.samples[i]);
    const Tensor emb = embed_records(records, model.stand_ins.identity);
    Tensor mean({emb.dim(1)});
    for (int i = 0; i < emb.dim(0); ++i)
      for (int e = 0; e < emb.dim(1); ++e) mean[e] += emb(i, e);
    centroids.push_back(std::move(mean));
  }
  const Tensor gallery = stack(centroids);

  const std::vector<IdentityPrototype> protos = identity_prototypes(corpus);
  std::mt19937_64 rng(config.seed);
  EvalReport report;
  report.pairs = config.pairs;
  report.step = model.step;
  std::vector<Tensor> generated_embeddings;
  std::vector<int> intended;
  double color_total = 0.0, rec_total = 0.0, base_total = 0.0;
  int color_count = 0, fit_count = 0;
  LocalityTotals locality;

  for (int k = 0; k < config.pairs; ++k) {
    const int src = std::uniform_int_distribution<int>(0, G - 1)(rng);
    int tgt = std::uniform_int_distribution<int>(0, G - 2)(rng);
    if (tgt >= src) ++tgt;
    const FaceRecord source = render_identity(model.basis, protos[src], corpus.config, rng);
    const FaceRecord target = render_identity(model.basis, protos[tgt], corpus.config, rng);

    const SwapResult swap = swap_face(model, source, target, kIdentity);
    {
      NoGradGuard guard;
      const Tensor z = model.stand_ins.identity
                           .embed(Var::constant(swap.image.reshaped({1, 3, S, S})), std::span(&swap.five_points, 1))
                           .value();
      const FaceRecord* ends[2] = {&source, &target};
      const Tensor refs = embed_records(ends, model.stand_ins.identity);
      report.source_similarity += cosine(z, 0, refs, 0);
      report.target_similarity += cosine(z, 0, refs, 1);
      generated_embeddings.push_back(z.reshaped({z.dim(1)}));
      intended.push_back(src);
    }

    const AttributeError err = attribute_error(swap.image, swap.coefficients, model.basis, estimate, fit);
    if (err.excluded) {
      ++report.fit_excluded;
    } else {
      report.pose_error_deg += err.pose_deg;
      report.expression_error += err.expression;
      ++fit_count;
    }

    if (auto d = region_color_distance(swap.image, swap.seg, target.image, target.region_map)) {
      color_total += *d;
      ++color_count;
    }

    const SwapResult rec = swap_face(model, target, target, 0u);
    Eigen::Vector3d face_mean = Eigen::Vector3d::Zero();
    double area = 0.0;
    for (int p = 0; p < P; ++p)
      if (target.face_mask[p] > 0.5) {
        area += 1.0;
        for (int c = 0; c < 3; ++c) face_mean[c] += target.image[c * P + p];
      }
    if (area > 0.0) face_mean /= area;
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < P; ++p) {
        rec_total += std::abs(rec.image[c * P + p] - target.image[c * P + p]);
        const double base = target.face_mask[p] > 0.5 ? face_mean[c] : target.image[c * P + p];
        base_total += std::abs(base - target.image[c * P + p]);
      }

    if (model.config.use_style_encoder) {
      const RegionEditResult edited = edit_regions(model, target, source, {config.edit_region}, false);
      if (!edited.applied.empty()) {
        Tensor mask({S, S});
        for (int p = 0; p < P; ++p) mask[p] = target.region_map[static_cast<std::size_t>(edit_region) * P + p];
        locality.add(rec.image, edited.images[0], mask);
      }
    }
  }

  report.identity_retrieval = identity_retrieval_accuracy(stack(generated_embeddings), intended, gallery);
  report.source_similarity /= config.pairs;
  report.target_similarity /= config.pairs;
  if (fit_count > 0) {
    report.pose_error_deg /= fit_count;
    report.expression_error /= fit_count;
  }
  report.region_color_distance = color_count > 0 ? color_total / color_count : 0.0;
  report.reconstruction_l1 = rec_total / (3.0 * P * config.pairs);
  report.baseline_l1 = base_total / (3.0 * P * config.pairs);
  report.locality_ratio = locality.ratio();
  return report;
}

}  // namespace facectl
