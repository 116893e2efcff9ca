#include "facectl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace facectl {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

int meta_int(const Archive& a, const std::string& key) { return std::stoi(a.meta(key)); }
double meta_double(const Archive& a, const std::string& key) { return std::stod(a.meta(key)); }

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Tensor rows_of(const std::vector<CorpusSample>& samples, Eigen::VectorXd FaceCoefficients::*field) {
  const int M = static_cast<int>(samples.size()), D = static_cast<int>((samples[0].coefficients.*field).size());
  Tensor t({M, D});
  for (int m = 0; m < M; ++m)
    for (int d = 0; d < D; ++d) t(m, d) = (samples[m].coefficients.*field)[d];
  return t;
}

Eigen::VectorXd row(const Tensor& t, int m) {
  Eigen::VectorXd v(t.dim(1));
  for (int d = 0; d < t.dim(1); ++d) v[d] = t(m, d);
  return v;
}

}  // namespace

MorphableBasis desk_basis(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return MorphableBasis::from_archive(make_synthetic_basis(BasisConfig{}, rng).to_archive());
}

Tensor random_background(std::mt19937_64& rng, int image_size) {
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  std::array<double, 3> c0{}, c1{};
  for (int c = 0; c < 3; ++c) {
    c0[c] = uniform(-0.9, 0.6);
    c1[c] = uniform(-0.9, 0.6);
  }
  const double angle = uniform(0.0, 2.0 * std::numbers::pi);
  const double dx = std::cos(angle), dy = std::sin(angle);
  const double stripe_amp = uniform(0.0, 0.12), stripe_freq = uniform(1.0, 5.0), phase = uniform(0.0, 6.3);
  const double stripe_angle = uniform(0.0, std::numbers::pi);
  const double sx = std::cos(stripe_angle), sy = std::sin(stripe_angle);
  const int S = image_size;
  Tensor out({3, S, S});
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j) {
      const double u = (j + 0.5) / S - 0.5, v = (i + 0.5) / S - 0.5;
      const double t = std::clamp(0.5 + dx * u + dy * v, 0.0, 1.0);
      const double stripe = stripe_amp * std::sin(2.0 * std::numbers::pi * stripe_freq * (sx * u + sy * v) + phase);
      for (int c = 0; c < 3; ++c) out(c, i, j) = std::clamp(c0[c] + t * (c1[c] - c0[c]) + stripe, -1.0, 1.0);
    }
  return out;
}

FaceRecord render_record(const MorphableBasis& basis, const FaceCoefficients& c, int image_size,
                         const Tensor& background) {
  const int S = image_size;
  require(background.empty() || background.shape() == Shape({3, S, S}), "render_record: background must be 3 x S x S");
  RenderedFace r = render_face(basis, c, S);
  FaceRecord rec;
  rec.coefficients = c;
  rec.image = Tensor({3, S, S});
  const std::size_t P = static_cast<std::size_t>(S) * S;
  for (int ch = 0; ch < 3; ++ch)
    for (std::size_t p = 0; p < P; ++p) {
      const double face = 2.0 * r.image[ch * P + p] - 1.0;
      const double bg = background.empty() ? -1.0 : background[ch * P + p];
      rec.image[ch * P + p] = r.face_mask[p] > 0.0 ? face : bg;
    }
  rec.face_mask = std::move(r.face_mask);
  rec.region_map = std::move(r.region_map);
  rec.landmarks = project_landmarks(basis, c, S);
  return rec;
}

void CorpusConfig::validate() const {
  require(identities >= 1 && samples_per_identity >= 1, "corpus needs at least one identity and one sample each");
  require(image_size >= 8, "corpus image size must be at least 8");
  require(texture_jitter >= 0.0, "texture jitter must be non-negative");
}

std::vector<int> SyntheticCorpus::indices_of(int identity) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].identity == identity) out.push_back(static_cast<int>(i));
  return out;
}

SyntheticCorpus build_synthetic_corpus(const MorphableBasis& basis, const CorpusConfig& config, std::mt19937_64& rng) {
  config.validate();
  SyntheticCorpus corpus;
  corpus.config = config;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int id = 0; id < config.identities; ++id) {
    const FaceCoefficients base = sample_random_face(basis, rng, config.pose);
    for (int k = 0; k < config.samples_per_identity; ++k) {
      FaceCoefficients c = sample_random_face(basis, rng, config.pose);
      c.alpha = base.alpha;
      for (int j = 0; j < basis.d_tex(); ++j)
        c.delta[j] = base.delta[j] + config.texture_jitter * basis.tex_scales[j] * normal(rng);
      const Tensor bg = config.backgrounds ? random_background(rng, config.image_size) : Tensor();
      CorpusSample s;
      static_cast<FaceRecord&>(s) = render_record(basis, c, config.image_size, bg);
      s.identity = id;
      corpus.samples.push_back(std::move(s));
    }
  }
  return corpus;
}

Archive SyntheticCorpus::to_archive() const {
  require(!samples.empty(), "cannot archive an empty corpus");
  Archive a;
  a.set_meta("kind", "synthetic_corpus");
  a.set_meta("identities", std::to_string(config.identities));
  a.set_meta("samples_per_identity", std::to_string(config.samples_per_identity));
  a.set_meta("image_size", std::to_string(config.image_size));
  a.set_meta("texture_jitter", exact(config.texture_jitter));
  a.set_meta("backgrounds", config.backgrounds ? "1" : "0");
  a.set_meta("pose_rx_deg", exact(config.pose.rx_deg));
  a.set_meta("pose_ry_deg", exact(config.pose.ry_deg));
  a.set_meta("pose_rz_deg", exact(config.pose.rz_deg));
  a.set_meta("pose_translation", exact(config.pose.translation));
  a.set_meta("num_regions", std::to_string(samples[0].region_map.dim(0)));

  const int M = static_cast<int>(samples.size()), S = config.image_size;
  const int K = static_cast<int>(samples[0].landmarks.rows());
  const std::size_t P = static_cast<std::size_t>(S) * S;
  Tensor images({M, 3, S, S}), masks({M, S, S}), landmarks({M, K, 2});
  std::vector<int> labels(M * P), ids(M);
  for (int m = 0; m < M; ++m) {
    const CorpusSample& s = samples[m];
    std::copy(s.image.values().begin(), s.image.values().end(), images.data() + m * 3 * P);
    std::copy(s.face_mask.values().begin(), s.face_mask.values().end(), masks.data() + m * P);
    const int N = s.region_map.dim(0);
    for (int n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p)
        if (s.region_map[n * P + p] != 0.0) labels[m * P + p] = n;
    for (int k = 0; k < K; ++k) {
      landmarks(m, k, 0) = s.landmarks(k, 0);
      landmarks(m, k, 1) = s.landmarks(k, 1);
    }
    ids[m] = s.identity;
  }
  a.put("images", images);
  a.put("face_masks", masks, DType::Float32);
  a.put_ints("labels", labels, {M, S, S});
  a.put("landmarks", landmarks);
  a.put_ints("identities", ids, {M});
  a.put("alpha", rows_of(samples, &FaceCoefficients::alpha));
  a.put("rho", rows_of(samples, &FaceCoefficients::rho));
  a.put("delta", rows_of(samples, &FaceCoefficients::delta));
  a.put("kappa", rows_of(samples, &FaceCoefficients::kappa));
  a.put("theta", rows_of(samples, &FaceCoefficients::theta));
  return a;
}

SyntheticCorpus SyntheticCorpus::from_archive(const Archive& a) {
  if (!a.has_meta("kind") || a.meta("kind") != "synthetic_corpus")
    throw ArchiveError("archive does not hold a synthetic corpus");
  SyntheticCorpus c;
  c.config.identities = meta_int(a, "identities");
  c.config.samples_per_identity = meta_int(a, "samples_per_identity");
  c.config.image_size = meta_int(a, "image_size");
  c.config.texture_jitter = meta_double(a, "texture_jitter");
  c.config.backgrounds = a.meta("backgrounds") == "1";
  c.config.pose = {meta_double(a, "pose_rx_deg"), meta_double(a, "pose_ry_deg"), meta_double(a, "pose_rz_deg"),
                   meta_double(a, "pose_translation")};
  const int N = meta_int(a, "num_regions");

  const Tensor images = a.get("images"), masks = a.get("face_masks"), landmarks = a.get("landmarks");
  const std::vector<int> labels = a.get_ints("labels"), ids = a.get_ints("identities");
  const Tensor alpha = a.get("alpha"), rho = a.get("rho"), delta = a.get("delta"), kappa = a.get("kappa"),
               theta = a.get("theta");
  const int M = images.dim(0), S = c.config.image_size, K = landmarks.dim(1);
  if (M != c.config.identities * c.config.samples_per_identity || images.dim(2) != S)
    throw ArchiveError("corpus arrays disagree with the corpus metadata");
  const std::size_t P = static_cast<std::size_t>(S) * S;
  for (int m = 0; m < M; ++m) {
    CorpusSample s;
    s.coefficients = {row(alpha, m), row(rho, m), row(delta, m), row(kappa, m), row(theta, m)};
    s.image = Tensor({3, S, S}, std::vector<double>(images.data() + m * 3 * P, images.data() + (m + 1) * 3 * P));
    s.face_mask = Tensor({S, S}, std::vector<double>(masks.data() + m * P, masks.data() + (m + 1) * P));
    s.region_map = Tensor({N, S, S});
    for (std::size_t p = 0; p < P; ++p) {
      const int l = labels[m * P + p];
      if (l < 0 || l >= N) throw ArchiveError("corpus label out of range");
      s.region_map[l * P + p] = 1.0;
    }
    s.landmarks.resize(K, 2);
    for (int k = 0; k < K; ++k) {
      s.landmarks(k, 0) = landmarks(m, k, 0);
      s.landmarks(k, 1) = landmarks(m, k, 1);
    }
    s.identity = ids[m];
    c.samples.push_back(std::move(s));
  }
  return c;
}

std::string to_string(PairMode m) { return m == PairMode::Reconstruction ? "reconstruction" : "generation"; }

SamplePair sample_pair(const SyntheticCorpus& corpus, std::mt19937_64& rng, double reconstruction_fraction) {
  require(!corpus.samples.empty(), "sample_pair: empty corpus");
  require(reconstruction_fraction >= 0.0 && reconstruction_fraction <= 1.0,
          "sample_pair: reconstruction fraction must lie in [0, 1]");
  require(reconstruction_fraction == 1.0 || corpus.identity_count() >= 2,
          "sample_pair: generation pairs need at least two identities");
  const int M = static_cast<int>(corpus.samples.size());
  std::uniform_int_distribution<int> pick(0, M - 1);
  SamplePair p;
  p.source = pick(rng);
  if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < reconstruction_fraction) {
    p.target = p.source;
    p.mode = PairMode::Reconstruction;
    return p;
  }
  // Uniform over samples of the other identities.
  const int src_id = corpus.samples[p.source].identity;
  std::vector<int> others;
  others.reserve(M);
  for (int i = 0; i < M; ++i)
    if (corpus.samples[i].identity != src_id) others.push_back(i);
  p.target = others[std::uniform_int_distribution<int>(0, static_cast<int>(others.size()) - 1)(rng)];
  p.mode = PairMode::Generation;
  return p;
}


std::vector<IdentityPrototype> identity_prototypes(const SyntheticCorpus& corpus) {
  std::vector<IdentityPrototype> out(corpus.identity_count());
  for (int id = 0; id < corpus.identity_count(); ++id) {
    const std::vector<int> idx = corpus.indices_of(id);
    if (idx.empty()) throw std::invalid_argument("corpus identity " + std::to_string(id) + " has no samples");
    out[id].alpha = corpus.samples[idx[0]].coefficients.alpha;
    out[id].delta = Eigen::VectorXd::Zero(corpus.samples[idx[0]].coefficients.delta.size());
    for (int i : idx) out[id].delta += corpus.samples[i].coefficients.delta;
    out[id].delta /= static_cast<double>(idx.size());
  }
  return out;
}

FaceRecord render_identity(const MorphableBasis& basis, const IdentityPrototype& identity, const CorpusConfig& config,
                           std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  FaceCoefficients c = sample_random_face(basis, rng, config.pose);
  c.alpha = identity.alpha;
  for (int j = 0; j < basis.d_tex(); ++j)
    c.delta[j] = identity.delta[j] + config.texture_jitter * basis.tex_scales[j] * normal(rng);
  const Tensor bg = config.backgrounds ? random_background(rng, config.image_size) : Tensor();
  return render_record(basis, c, config.image_size, bg);
}

}  // namespace facectl
