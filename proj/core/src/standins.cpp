#include "facectl/standins.hpp"

#include <stdexcept>

#include "facectl/optim.hpp"
#include "facectl/pipeline.hpp"
#include "facectl/state.hpp"

namespace facectl {

namespace {

Tensor embed_corpus(const SyntheticCorpus& corpus, const IdentityEncoder& encoder, std::vector<int>& labels) {
  std::vector<const FaceRecord*> records;
  for (const CorpusSample& s : corpus.samples) {
    records.push_back(&s);
    labels.push_back(s.identity);
  }
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < records.size(); b += 32) {
    const std::size_t e = std::min(records.size(), b + 32);
    parts.push_back(embed_records(std::span(records).subspan(b, e - b), encoder));
  }
  // Concatenate along the batch axis.
  const int E = parts[0].dim(1);
  Tensor out({static_cast<int>(records.size()), E});
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.data() + off);
    off += p.size();
  }
  return out;
}

}  // namespace

double centroid_retrieval_accuracy(const Tensor& probes, std::span<const int> probe_labels, const Tensor& gallery,
                                   std::span<const int> gallery_labels) {
  if (probes.dim(0) != static_cast<int>(probe_labels.size()) ||
      gallery.dim(0) != static_cast<int>(gallery_labels.size()) || probes.dim(1) != gallery.dim(1))
    throw std::invalid_argument("centroid_retrieval_accuracy: shape mismatch");
  const int E = probes.dim(1);
  const int G = *std::max_element(gallery_labels.begin(), gallery_labels.end()) + 1;
  Eigen::MatrixXd centroids = Eigen::MatrixXd::Zero(G, E);
  for (int i = 0; i < gallery.dim(0); ++i)
    for (int d = 0; d < E; ++d) centroids(gallery_labels[i], d) += gallery(i, d);
  for (int g = 0; g < G; ++g) {
    const double n = centroids.row(g).norm();
    if (n > 0.0) centroids.row(g) /= n;
  }
  int correct = 0;
  for (int i = 0; i < probes.dim(0); ++i) {
    Eigen::VectorXd p(E);
    for (int d = 0; d < E; ++d) p[d] = probes(i, d);
    Eigen::Index best = 0;
    (centroids * p).maxCoeff(&best);
    correct += static_cast<int>(best) == probe_labels[i];
  }
  return static_cast<double>(correct) / probes.dim(0);
}

IdentityFinetuneReport finetune_identity_encoder(IdentityEncoder& encoder, const MorphableBasis& basis,
                                                 const SyntheticCorpus& corpus, const IdentityFinetuneConfig& config) {
  if (config.steps < 0 || config.per_identity < 1) throw std::invalid_argument("identity fine-tuning: bad config");
  const std::vector<IdentityPrototype> protos = identity_prototypes(corpus);
  const int G = static_cast<int>(protos.size());
  std::mt19937_64 rng(config.seed);
  Initializer init(rng());
  Var classes = Var::parameter(init.normal({G, encoder.embedding_size()}, 1.0));
  auto params = collect_parameters([&](StateVisitor& v) { encoder.visit("identity", v); });
  set_trainable(params, true);
  std::vector<NamedParameter> all = params;
  all.push_back({"classes", classes});
  Adam adam(all, AdamConfig{config.lr, 0.9, 0.999, 1e-8});

  IdentityFinetuneReport report;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<FaceRecord> records;
    std::vector<int> labels;
    for (int g = 0; g < G; ++g)
      for (int k = 0; k < config.per_identity; ++k) {
        records.push_back(render_identity(basis, protos[g], corpus.config, rng));
        labels.push_back(g);
      }
    std::vector<Tensor> images;
    std::vector<FivePoints> points;
    for (const FaceRecord& r : records) {
      images.push_back(r.image);
      points.push_back(five_point_landmarks(r.landmarks));
    }
    const Var z = encoder.embed(Var::constant(stack(images)), points);
    const Var cosines = ops::linear(z, ops::l2_normalize_rows(classes), Var());
    Tensor margins({static_cast<int>(labels.size()), G});
    for (std::size_t i = 0; i < labels.size(); ++i) margins(static_cast<int>(i), labels[i]) = config.margin;
    const Var loss = ops::softmax_cross_entropy(
        ops::scale(ops::sub(cosines, Var::constant(margins)), config.scale), labels);
    adam.zero_grad();
    backward(loss);
    adam.step(config.lr);
    report.final_loss = loss.value().item();
  }
  set_trainable(params, false);
  report.steps = config.steps;

  // Held out: the corpus samples themselves were never trained on. Each is
  // scored against centroids of the other identities' and its own remaining samples.
  std::vector<int> labels;
  const Tensor emb = embed_corpus(corpus, encoder, labels);
  int correct = 0;
  const int M = emb.dim(0), E = emb.dim(1);
  for (int i = 0; i < M; ++i) {
    Eigen::MatrixXd centroids = Eigen::MatrixXd::Zero(G, E);
    for (int j = 0; j < M; ++j) {
      if (j == i) continue;
      for (int d = 0; d < E; ++d) centroids(labels[j], d) += emb(j, d);
    }
    Eigen::VectorXd p(E);
    for (int d = 0; d < E; ++d) p[d] = emb(i, d);
    for (int g = 0; g < G; ++g) centroids.row(g).normalize();
    Eigen::Index best = 0;
    (centroids * p).maxCoeff(&best);
    correct += static_cast<int>(best) == labels[i];
  }
  report.heldout_accuracy = static_cast<double>(correct) / M;
  return report;
}

LandmarkSampler random_face_sampler(const MorphableBasis& basis, const CorpusConfig& corpus) {
  return [&basis, corpus](std::mt19937_64& rng, int batch) {
    std::vector<Tensor> images;
    std::vector<Eigen::MatrixX2d> landmarks;
    for (int b = 0; b < batch; ++b) {
      const FaceCoefficients c = sample_random_face(basis, rng, corpus.pose);
      const Tensor bg = corpus.backgrounds ? random_background(rng, corpus.image_size) : Tensor();
      FaceRecord r = render_record(basis, c, corpus.image_size, bg);
      images.push_back(std::move(r.image));
      landmarks.push_back(std::move(r.landmarks));
    }
    return LandmarkBatch{stack(images), normalize_landmarks(landmarks, corpus.image_size)};
  };
}

StandIns StandIns::initialize(const StandInConfig& config) {
  StandIns s;
  s.identity = IdentityEncoder(config.identity, config.identity_seed);
  s.landmarks = LandmarkRegressor(config.landmarks, config.landmark_seed);
  s.perceptual = PerceptualExtractor(config.perceptual, config.perceptual_seed);
  return s;
}

void StandIns::visit(StateVisitor& v) {
  identity.visit("identity", v);
  landmarks.visit("landmarks", v);
  perceptual.visit("perceptual", v);
}

Archive StandIns::to_archive() {
  Archive a;
  a.set_meta("kind", "stand_ins");
  a.set_meta("identity_accuracy", std::to_string(identity_report.heldout_accuracy));
  a.set_meta("identity_steps", std::to_string(identity_report.steps));
  a.set_meta("landmark_error_px", std::to_string(landmark_report.validation_error_px));
  a.set_meta("landmark_steps", std::to_string(landmark_report.steps));
  save_state(a, [&](StateVisitor& v) { visit(v); });
  return a;
}

StandIns StandIns::from_archive(const Archive& a, const StandInConfig& config) {
  if (!a.has_meta("kind") || a.meta("kind") != "stand_ins") throw ArchiveError("archive does not hold stand-in networks");
  StandIns s = initialize(config);
  load_state(a, [&](StateVisitor& v) { s.visit(v); });
  s.identity_report.heldout_accuracy = std::stod(a.meta("identity_accuracy"));
  s.identity_report.steps = std::stoi(a.meta("identity_steps"));
  s.landmark_report.validation_error_px = std::stod(a.meta("landmark_error_px"));
  s.landmark_report.steps = std::stoi(a.meta("landmark_steps"));
  set_trainable(collect_parameters([&](StateVisitor& v) { s.visit(v); }), false);
  return s;
}

StandIns prepare_stand_ins(const MorphableBasis& basis, const SyntheticCorpus& corpus, const StandInConfig& config) {
  StandIns s = StandIns::initialize(config);
  s.identity_report = finetune_identity_encoder(s.identity, basis, corpus, config.finetune);
  LandmarkRegressorConfig lm = config.landmarks;
  if (lm.image_size != corpus.config.image_size || lm.landmarks != basis.landmark_count())
    throw std::invalid_argument("landmark regressor must match the corpus image size and landmark count");
  s.landmark_report = pretrain_landmark_regressor(s.landmarks, random_face_sampler(basis, corpus.config), config.pretrain);
  set_trainable(collect_parameters([&](StateVisitor& v) { s.visit(v); }), false);
  return s;
}

}  // namespace facectl
