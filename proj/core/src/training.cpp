#include "facectl/training.hpp"

#include <zlib.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "facectl/state.hpp"

namespace facectl {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Reads a JSON object field by field and rejects keys nobody asked for.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw std::invalid_argument("config: '" + path_ + "' must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: '" + where(key) + "' has the wrong type (" + e.what() + ")");
    }
  }

  void object(const std::string& key, const std::function<void(Reader&)>& f) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    Reader sub(j_.at(key), where(key));
    f(sub);
    sub.finish();
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw std::invalid_argument("config: unknown key '" + where(key) + "'");
  }

 private:
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json config_json(const TrainConfig& c) {
  json j;
  j["version"] = TrainConfig::kVersion;
  j["total_steps"] = c.total_steps;
  j["batch_size"] = c.batch_size;
  j["reconstruction_fraction"] = c.reconstruction_fraction;
  j["landmark_warmup_steps"] = c.landmark_warmup_steps;
  j["lr_g"] = c.lr_g;
  j["lr_d"] = c.lr_d;
  j["decay_fraction"] = c.decay_fraction;
  j["seed"] = c.seed;
  j["basis_seed"] = c.basis_seed;
  j["corpus_seed"] = c.corpus_seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["ablation"] = {{"use_identity_encoder", c.use_identity_encoder},
                   {"use_style_encoder", c.use_style_encoder},
                   {"use_aligned_landmarks", c.use_aligned_landmarks},
                   {"use_hm_loss", c.use_hm_loss},
                   {"conditioning_mode", to_string(c.conditioning)}};
  j["feature_matching"] = c.feature_matching;
  j["feature_matching_weight"] = c.feature_matching_weight;
  j["weights"] = {{"identity", c.weights.identity},
                  {"landmark", c.weights.landmark},
                  {"hm", c.weights.hm},
                  {"perceptual", c.weights.perceptual}};
  j["corpus"] = {{"identities", c.corpus.identities},
                 {"samples_per_identity", c.corpus.samples_per_identity},
                 {"image_size", c.corpus.image_size},
                 {"texture_jitter", c.corpus.texture_jitter},
                 {"backgrounds", c.corpus.backgrounds},
                 {"pose",
                  {{"rx_deg", c.corpus.pose.rx_deg},
                   {"ry_deg", c.corpus.pose.ry_deg},
                   {"rz_deg", c.corpus.pose.rz_deg},
                   {"translation", c.corpus.pose.translation}}}};
  const StandInConfig& s = c.stand_ins;
  j["stand_ins"] = {{"identity_channels", s.identity.channels},
                    {"identity_crop", s.identity.crop.size},
                    {"identity_seed", s.identity_seed},
                    {"finetune",
                     {{"steps", s.finetune.steps},
                      {"per_identity", s.finetune.per_identity},
                      {"lr", s.finetune.lr},
                      {"scale", s.finetune.scale},
                      {"margin", s.finetune.margin},
                      {"seed", s.finetune.seed}}},
                    {"landmark_channels", s.landmarks.channels},
                    {"landmark_seed", s.landmark_seed},
                    {"pretrain",
                     {{"steps", s.pretrain.steps},
                      {"batch", s.pretrain.batch},
                      {"lr", s.pretrain.lr},
                      {"validation_samples", s.pretrain.validation_samples},
                      {"threshold_px", s.pretrain.threshold_px},
                      {"seed", s.pretrain.seed}}},
                    {"perceptual_channels", s.perceptual.channels},
                    {"perceptual_layers", s.perceptual.layers},
                    {"perceptual_seed", s.perceptual_seed}};
  j["generator"] = {{"initial_resolution", c.generator.initial_resolution},
                    {"channels", c.generator.channels},
                    {"upsample_blocks", c.generator.upsample_blocks},
                    {"background_blocks", c.generator.background_blocks},
                    {"head_hidden", c.generator.head_hidden},
                    {"spectral", c.generator.spectral}};
  j["style_encoder"] = {{"channels", c.style_encoder.channels}, {"style_dim", c.style_encoder.style_dim}};
  j["discriminator"] = {{"channels", c.discriminator.channels},
                        {"scales", c.discriminator.scales},
                        {"use_segmentation", c.discriminator.use_segmentation},
                        {"spectral", c.discriminator.spectral}};
  return j;
}

std::uint32_t crc_of(const std::string& s) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

bool finite(double v) { return std::isfinite(v); }

std::string breakdown(const LossReport& r, double d_loss) {
  std::ostringstream os;
  os << "adversarial=" << r.adversarial << " identity=" << r.identity << " landmark=" << r.landmark
     << " hm=" << r.hm << " perceptual=" << r.perceptual << " total=" << r.total << " d_loss=" << d_loss;
  return os.str();
}

// Forwards every call with a name prefix.
class PrefixVisitor : public StateVisitor {
 public:
  PrefixVisitor(StateVisitor& inner, std::string prefix) : inner_(inner), prefix_(std::move(prefix)) {}
  void parameter(const std::string& name, Var& p) override { inner_.parameter(prefix_ + name, p); }
  void buffer(const std::string& name, Tensor& t) override { inner_.buffer(prefix_ + name, t); }
  void spectral(const std::string& name, const Var& w, ops::SpectralState& s) override {
    inner_.spectral(prefix_ + name, w, s);
  }

 private:
  StateVisitor& inner_;
  std::string prefix_;
};

constexpr const char* kCheckpointKind = "facectl_checkpoint";
constexpr const char* kCheckpointVersion = "1";

Archive read_checkpoint(const std::string& path) {
  Archive a = Archive::load(path);
  if (!a.has_meta("kind") || a.meta("kind") != kCheckpointKind)
    throw ArchiveError("'" + path + "' is not a facectl checkpoint");
  if (a.meta("checkpoint_version") != kCheckpointVersion)
    throw ArchiveError("'" + path + "' has checkpoint version " + a.meta("checkpoint_version") +
                       "; this build reads version " + kCheckpointVersion);
  return a;
}

}  // namespace

// --- config ------------------------------------------------------------------------------

int TrainConfig::warmup_steps() const {
  return landmark_warmup_steps >= 0 ? landmark_warmup_steps : static_cast<int>(std::lround(0.02 * total_steps));
}

GeneratorConfig TrainConfig::generator_config() const {
  GeneratorConfig g = generator;
  g.image_size = corpus.image_size;
  g.id_dim = stand_ins.identity.channels.back();
  g.style_dim = style_encoder.style_dim;
  g.conditioning = conditioning;
  g.use_identity = use_identity_encoder;
  g.use_style = use_style_encoder;
  return g;
}

void TrainConfig::validate() const {
  require(total_steps > 0, "config: total_steps must be positive");
  require(batch_size > 0, "config: batch_size must be positive");
  require(reconstruction_fraction >= 0.0 && reconstruction_fraction <= 1.0,
          "config: reconstruction_fraction must lie in [0, 1]");
  require(decay_fraction >= 0.0 && decay_fraction <= 1.0, "config: decay_fraction must lie in [0, 1]");
  require(lr_g >= 0.0 && lr_d >= 0.0, "config: learning rates must be non-negative");
  require(checkpoint_every >= 0, "config: checkpoint_every must be non-negative");
  require(feature_matching_weight >= 0.0, "config: feature_matching_weight must be non-negative");
  require(reconstruction_fraction == 1.0 || corpus.identities >= 2,
          "config: generation pairs need a corpus with at least two identities");
  weights.validate();
  corpus.validate();
  generator_config().validate();
}

std::string TrainConfig::to_json() const { return config_json(*this).dump(2); }

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: not valid JSON (") + e.what() + ")");
  }
  TrainConfig c;
  Reader r(j, "");
  int version = kVersion;
  r.get("version", version);
  if (version != kVersion)
    throw std::invalid_argument("config: version " + std::to_string(version) + " is not supported (expected " +
                                std::to_string(kVersion) + ")");
  r.get("total_steps", c.total_steps);
  r.get("batch_size", c.batch_size);
  r.get("reconstruction_fraction", c.reconstruction_fraction);
  r.get("landmark_warmup_steps", c.landmark_warmup_steps);
  r.get("lr_g", c.lr_g);
  r.get("lr_d", c.lr_d);
  r.get("decay_fraction", c.decay_fraction);
  r.get("seed", c.seed);
  r.get("basis_seed", c.basis_seed);
  r.get("corpus_seed", c.corpus_seed);
  r.get("checkpoint_every", c.checkpoint_every);
  r.object("ablation", [&](Reader& a) {
    a.get("use_identity_encoder", c.use_identity_encoder);
    a.get("use_style_encoder", c.use_style_encoder);
    a.get("use_aligned_landmarks", c.use_aligned_landmarks);
    a.get("use_hm_loss", c.use_hm_loss);
    std::string mode = to_string(c.conditioning);
    a.get("conditioning_mode", mode);
    c.conditioning = parse_conditioning_mode(mode);
  });
  r.get("feature_matching", c.feature_matching);
  r.get("feature_matching_weight", c.feature_matching_weight);
  r.object("weights", [&](Reader& w) {
    w.get("identity", c.weights.identity);
    w.get("landmark", c.weights.landmark);
    w.get("hm", c.weights.hm);
    w.get("perceptual", c.weights.perceptual);
  });
  r.object("corpus", [&](Reader& k) {
    k.get("identities", c.corpus.identities);
    k.get("samples_per_identity", c.corpus.samples_per_identity);
    k.get("image_size", c.corpus.image_size);
    k.get("texture_jitter", c.corpus.texture_jitter);
    k.get("backgrounds", c.corpus.backgrounds);
    k.object("pose", [&](Reader& p) {
      p.get("rx_deg", c.corpus.pose.rx_deg);
      p.get("ry_deg", c.corpus.pose.ry_deg);
      p.get("rz_deg", c.corpus.pose.rz_deg);
      p.get("translation", c.corpus.pose.translation);
    });
  });
  r.object("stand_ins", [&](Reader& s) {
    StandInConfig& sc = c.stand_ins;
    s.get("identity_channels", sc.identity.channels);
    s.get("identity_crop", sc.identity.crop.size);
    s.get("identity_seed", sc.identity_seed);
    s.object("finetune", [&](Reader& f) {
      f.get("steps", sc.finetune.steps);
      f.get("per_identity", sc.finetune.per_identity);
      f.get("lr", sc.finetune.lr);
      f.get("scale", sc.finetune.scale);
      f.get("margin", sc.finetune.margin);
      f.get("seed", sc.finetune.seed);
    });
    s.get("landmark_channels", sc.landmarks.channels);
    s.get("landmark_seed", sc.landmark_seed);
    s.object("pretrain", [&](Reader& p) {
      p.get("steps", sc.pretrain.steps);
      p.get("batch", sc.pretrain.batch);
      p.get("lr", sc.pretrain.lr);
      p.get("validation_samples", sc.pretrain.validation_samples);
      p.get("threshold_px", sc.pretrain.threshold_px);
      p.get("seed", sc.pretrain.seed);
    });
    s.get("perceptual_channels", sc.perceptual.channels);
    s.get("perceptual_layers", sc.perceptual.layers);
    s.get("perceptual_seed", sc.perceptual_seed);
  });
  r.object("generator", [&](Reader& g) {
    g.get("initial_resolution", c.generator.initial_resolution);
    g.get("channels", c.generator.channels);
    g.get("upsample_blocks", c.generator.upsample_blocks);
    g.get("background_blocks", c.generator.background_blocks);
    g.get("head_hidden", c.generator.head_hidden);
    g.get("spectral", c.generator.spectral);
  });
  r.object("style_encoder", [&](Reader& s) {
    s.get("channels", c.style_encoder.channels);
    s.get("style_dim", c.style_encoder.style_dim);
  });
  r.object("discriminator", [&](Reader& d) {
    d.get("channels", c.discriminator.channels);
    d.get("scales", c.discriminator.scales);
    d.get("use_segmentation", c.discriminator.use_segmentation);
    d.get("spectral", c.discriminator.spectral);
  });
  r.finish();
  // Sizes that follow from other fields.
  c.stand_ins.landmarks.image_size = c.corpus.image_size;
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return from_json(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

std::string TrainConfig::hash() const {
  json j = config_json(*this);
  j.erase("checkpoint_every");
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", crc_of(j.dump()));
  return buf;
}

double scheduled_lr(double base, int step, int total_steps, double decay_fraction) {
  const int window = static_cast<int>(std::lround(decay_fraction * total_steps));
  const int remaining = total_steps - step;
  if (window <= 0) return remaining > 0 ? base : 0.0;
  return base * std::clamp(static_cast<double>(remaining) / window, 0.0, 1.0);
}

std::string StepMetrics::to_json(bool deterministic) const {
  json j;
  j["step"] = step;
  j["mode"] = {{"reconstruction", reconstruction}, {"generation", generation}};
  j["adversarial"] = g.adversarial;
  j["identity"] = g.identity;
  j["landmark"] = g.landmark;
  j["hm"] = g.hm;
  j["perceptual"] = g.perceptual;
  j["total"] = g.total;
  j["active"] = {{"identity", g.active.identity},
                 {"landmark", g.active.landmark},
                 {"hm", g.active.hm},
                 {"perceptual", g.active.perceptual}};
  j["d_loss"] = d_loss;
  j["feature_matching"] = feature_matching;
  j["lr_g"] = lr_g;
  j["lr_d"] = lr_d;
  if (!deterministic) j["wall_time"] = wall_time;
  return j.dump();
}

// --- trainer -----------------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& config, const MorphableBasis& basis, const SyntheticCorpus& corpus,
                 StandIns& stand_ins)
    : config_(config), basis_(basis), corpus_(corpus), stand_ins_(stand_ins) {
  config_.validate();
  require(corpus.config.image_size == config_.corpus.image_size,
          "trainer: corpus image size differs from the config");
  require(!corpus.samples.empty(), "trainer: empty corpus");
  GeneratorConfig gcfg = config_.generator_config();
  gcfg.num_classes = basis.num_regions;
  require(gcfg.conditioning_dim == conditioning_size(basis), "trainer: conditioning size differs from the basis");
  require(stand_ins.identity.embedding_size() == gcfg.id_dim, "trainer: identity embedding size differs");

  Initializer init(config_.seed);
  generator_ = Generator(gcfg, init);
  style_encoder_ = StyleEncoder(config_.style_encoder, init);
  DiscriminatorConfig dcfg = config_.discriminator;
  dcfg.num_classes = basis.num_regions;
  discriminator_ = Discriminator(dcfg, init);
  g_params_ = collect_parameters([&](StateVisitor& v) {
    generator_.visit("generator", v);
    style_encoder_.visit("style_encoder", v);
  });
  d_params_ = collect_parameters([&](StateVisitor& v) { discriminator_.visit("discriminator", v); });
  set_trainable(g_params_, true);
  set_trainable(d_params_, true);
  adam_g_ = Adam(g_params_, AdamConfig{config_.lr_g, 0.0, 0.999, 1e-8});
  adam_d_ = Adam(d_params_, AdamConfig{config_.lr_d, 0.0, 0.999, 1e-8});
  rng_.seed(init.next_seed());
}

TrainingBatch Trainer::make_batch(const std::vector<SamplePair>& pairs) const {
  TrainingBatch batch;
  batch.pairs = pairs;
  std::vector<SwapPair> swaps;
  std::vector<Eigen::MatrixX2d> naive;
  for (const SamplePair& p : pairs) {
    const CorpusSample& s = corpus_.samples.at(p.source);
    const CorpusSample& t = corpus_.samples.at(p.target);
    swaps.push_back(make_swap(s, t, kIdentity));
    naive.push_back(t.landmarks);
  }
  batch.swap = assemble_swap_batch(basis_, swaps, stand_ins_.identity);
  batch.naive_landmarks = normalize_landmarks(naive, corpus_.config.image_size);
  return batch;
}

TrainingBatch Trainer::next_batch() {
  std::vector<SamplePair> pairs;
  for (int b = 0; b < config_.batch_size; ++b)
    pairs.push_back(sample_pair(corpus_, rng_, config_.reconstruction_fraction));
  return make_batch(pairs);
}

Var Trainer::encode_styles(const SwapBatch& batch) const {
  if (!config_.use_style_encoder) return Var();
  return style_encoder_.encode(Var::constant(batch.target_images), batch.target_seg);
}

Tensor Trainer::generate(const SwapBatch& batch, const Tensor* styles_override) {
  NoGradGuard guard;
  const Var styles = styles_override ? Var::constant(*styles_override) : encode_styles(batch);
  return generator_.forward(generator_inputs(batch, styles), false).value();
}

void Trainer::visit_trainable_state(StateVisitor& v) {
  generator_.visit("generator", v);
  style_encoder_.visit("style_encoder", v);
  discriminator_.visit("discriminator", v);
  adam_g_.visit("adam_g", v);
  adam_d_.visit("adam_d", v);
}

StepMetrics Trainer::train_step(const TrainingBatch& batch) {
  const SwapBatch& sb = batch.swap;
  std::vector<int> rec, gen;
  for (std::size_t i = 0; i < batch.pairs.size(); ++i)
    (batch.pairs[i].mode == PairMode::Reconstruction ? rec : gen).push_back(static_cast<int>(i));

  StateSnapshot snapshot;
  const StateVisit visit = [&](StateVisitor& v) { visit_trainable_state(v); };
  snapshot.capture(visit);

  StepMetrics m;
  m.step = step_;
  m.reconstruction = static_cast<int>(rec.size());
  m.generation = static_cast<int>(gen.size());
  m.lr_g = scheduled_lr(config_.lr_g, step_, config_.total_steps, config_.decay_fraction);
  m.lr_d = scheduled_lr(config_.lr_d, step_, config_.total_steps, config_.decay_fraction);
  const bool landmark_on = !gen.empty() && step_ >= config_.warmup_steps();

  // Generator and style encoder update. The discriminator only passes
  // gradients through, so its weight gradients are skipped.
  set_trainable(d_params_, false);
  Var fake;
  TotalLoss total;
  try {
    const Var styles = encode_styles(sb);
    fake = generator_.forward(generator_inputs(sb, styles), true);
    const DiscriminatorOutput d_fake = discriminator_.forward(fake, sb.seg);
    LossTerms terms;
    terms.adversarial = generator_hinge_loss(d_fake.logits);
    if (config_.feature_matching) {
      const DiscriminatorOutput d_real = discriminator_.forward(Var::constant(sb.target_images), sb.target_seg);
      const Var fm = feature_matching_loss(d_real.features, d_fake.features);
      m.feature_matching = fm.value().item();
      terms.adversarial = ops::add(terms.adversarial, ops::scale(fm, config_.feature_matching_weight));
    }
    if (!rec.empty()) {
      terms.perceptual = perceptual_loss(Var::constant(gather_batch(sb.target_images, rec)),
                                         ops::gather_batch(fake, rec), stand_ins_.perceptual);
    }
    if (!gen.empty()) {
      const Var fake_gen = ops::gather_batch(fake, gen);
      std::vector<FivePoints> points;
      for (int i : gen) points.push_back(sb.five_points[i]);
      terms.identity = identity_loss(stand_ins_.identity.embed(fake_gen, points),
                                     Var::constant(gather_batch(sb.z_id, gen)));
      if (landmark_on) {
        const Tensor& ref = config_.use_aligned_landmarks ? sb.landmarks : batch.naive_landmarks;
        terms.landmark = landmark_loss(stand_ins_.landmarks.forward(fake_gen), gather_batch(ref, gen));
      }
      if (config_.use_hm_loss) {
        const Tensor tseg = gather_batch(sb.target_seg, gen), gseg = gather_batch(sb.seg, gen);
        const Tensor remapped =
            histogram_match(gather_batch(sb.target_images, gen), fake_gen.value(), &tseg, &gseg);
        terms.hm = histogram_matching_loss(fake_gen, remapped);
      }
    }
    const LossGates gates{!gen.empty(), landmark_on, !gen.empty() && config_.use_hm_loss, !rec.empty()};
    total = total_loss(terms, config_.weights, gates);
    m.g = total.report;
    if (!finite(total.report.total)) throw TrainingError("non-finite generator loss at step " +
                                                         std::to_string(step_) + ": " + breakdown(m.g, 0.0));
    zero_grads(g_params_);
    backward(total.total);
    adam_g_.step(m.lr_g);
  } catch (...) {
    set_trainable(d_params_, true);
    snapshot.restore(visit);
    throw;
  }
  set_trainable(d_params_, true);

  // Discriminator update on the pre-update fake images.
  try {
    const DiscriminatorOutput d_real = discriminator_.forward(Var::constant(sb.target_images), sb.target_seg);
    const DiscriminatorOutput d_fake = discriminator_.forward(Var::constant(fake.value()), sb.seg);
    const Var d_loss = discriminator_hinge_loss(d_real.logits, d_fake.logits);
    m.d_loss = d_loss.value().item();
    if (!finite(m.d_loss))
      throw TrainingError("non-finite discriminator loss at step " + std::to_string(step_) + ": " +
                          breakdown(m.g, m.d_loss));
    zero_grads(d_params_);
    backward(d_loss);
    adam_d_.step(m.lr_d);
  } catch (...) {
    snapshot.restore(visit);
    throw;
  }

  PowerIterationVisitor power;
  generator_.visit("generator", power);
  discriminator_.visit("discriminator", power);
  ++step_;
  return m;
}

void Trainer::save_checkpoint(const std::string& path) {
  Archive a;
  a.set_meta("kind", kCheckpointKind);
  a.set_meta("checkpoint_version", kCheckpointVersion);
  a.set_meta("config", config_.to_json());
  a.set_meta("config_hash", config_.hash());
  a.set_meta("step", std::to_string(step_));
  std::ostringstream rng;
  rng << rng_;
  a.set_meta("rng", rng.str());
  save_state(a, [&](StateVisitor& v) { visit_trainable_state(v); });
  merge_archive(a, stand_ins_.to_archive(), "stand_ins/");
  merge_archive(a, basis_.to_archive(), "basis/");
  a.save(path);
}

void Trainer::load_checkpoint(const std::string& path) {
  const Archive a = read_checkpoint(path);
  if (a.meta("config_hash") != config_.hash())
    throw ArchiveError("checkpoint '" + path + "' was written with config hash " + a.meta("config_hash") +
                       ", the current config hashes to " + config_.hash() + "; resume with the original config");
  int step = 0;
  std::mt19937_64 rng;
  try {
    step = std::stoi(a.meta("step"));
    std::istringstream in(a.meta("rng"));
    in >> rng;
    if (!in) throw std::runtime_error("bad rng state");
  } catch (const std::exception& e) {
    throw ArchiveError("checkpoint '" + path + "' has a corrupt step or rng record (" + e.what() + ")");
  }
  load_state(a, [&](StateVisitor& v) {
    visit_trainable_state(v);
    PrefixVisitor prefixed(v, "stand_ins/");
    stand_ins_.visit(prefixed);
  });
  step_ = step;
  rng_ = rng;
}

// --- model bundle ---------------------------------------------------------------------------------

ModelBundle ModelBundle::load(const std::string& checkpoint_path) {
  const Archive a = read_checkpoint(checkpoint_path);
  ModelBundle m;
  m.config = TrainConfig::from_json(a.meta("config"));
  m.basis = MorphableBasis::from_archive(sub_archive(a, "basis/"));
  m.stand_ins = StandIns::from_archive(sub_archive(a, "stand_ins/"), m.config.stand_ins);
  GeneratorConfig gcfg = m.config.generator_config();
  gcfg.num_classes = m.basis.num_regions;
  Initializer init(m.config.seed);
  m.generator = Generator(gcfg, init);
  m.style_encoder = StyleEncoder(m.config.style_encoder, init);
  load_state(a, [&](StateVisitor& v) {
    m.generator.visit("generator", v);
    m.style_encoder.visit("style_encoder", v);
  });
  set_trainable(collect_parameters([&](StateVisitor& v) {
                  m.generator.visit("generator", v);
                  m.style_encoder.visit("style_encoder", v);
                }),
                false);
  m.step = std::stoi(a.meta("step"));
  return m;
}

Var ModelBundle::encode_styles(const Tensor& images, const Tensor& seg) const {
  if (!config.use_style_encoder) return Var();
  NoGradGuard guard;
  return style_encoder.encode(Var::constant(images), seg);
}

Tensor ModelBundle::generate(const SwapBatch& batch, const Var& styles) {
  NoGradGuard guard;
  return generator.forward(generator_inputs(batch, styles), false).value();
}

// --- runs ------------------------------------------------------------------------------------------

RunResult run_training(const TrainConfig& config, const RunOptions& options) {
  config.validate();
  const MorphableBasis basis = desk_basis(config.basis_seed);
  std::mt19937_64 rng(config.corpus_seed);
  const SyntheticCorpus corpus = build_synthetic_corpus(basis, config.corpus, rng);
  StandIns stand_ins;
  if (!options.stand_ins_path.empty() && std::filesystem::exists(options.stand_ins_path)) {
    stand_ins = StandIns::from_archive(Archive::load(options.stand_ins_path), config.stand_ins);
  } else {
    stand_ins = prepare_stand_ins(basis, corpus, config.stand_ins);
    std::filesystem::create_directories(options.out_dir);
    const std::string path =
        options.stand_ins_path.empty() ? options.out_dir + "/stand_ins.fcar" : options.stand_ins_path;
    stand_ins.to_archive().save(path);
  }
  return run_training(config, basis, corpus, stand_ins, options);
}

RunResult run_training(const TrainConfig& config, const MorphableBasis& basis, const SyntheticCorpus& corpus,
                       StandIns& stand_ins, const RunOptions& options) {
  require(!options.out_dir.empty(), "run_training: an output directory is required");
  namespace fs = std::filesystem;
  fs::create_directories(options.out_dir);
  {
    std::ofstream cfg(options.out_dir + "/config.json");
    cfg << config.to_json() << "\n";
  }
  Trainer trainer(config, basis, corpus, stand_ins);
  RunResult result;
  result.metrics_path = options.out_dir + "/metrics.jsonl";
  if (!options.resume_from.empty()) {
    trainer.load_checkpoint(options.resume_from);
    // Drop records past the resume point so the log reads as one run.
    std::vector<std::string> kept;
    std::ifstream in(result.metrics_path);
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      if (json::parse(line).at("step").get<int>() < trainer.step()) kept.push_back(line);
    }
    in.close();
    std::ofstream out(result.metrics_path, std::ios::trunc);
    for (const auto& l : kept) out << l << "\n";
  } else {
    std::ofstream(result.metrics_path, std::ios::trunc);
  }
  std::ofstream log(result.metrics_path, std::ios::app);
  const auto t0 = std::chrono::steady_clock::now();
  while (trainer.step() < config.total_steps) {
    StepMetrics m = trainer.train_step();
    m.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << m.to_json() << "\n";
    log.flush();
    if (options.on_step) options.on_step(m);
    const int done = trainer.step();
    if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.total_steps) {
      char name[32];
      std::snprintf(name, sizeof name, "/ckpt_%06d.fcar", done);
      trainer.save_checkpoint(options.out_dir + name);
    }
  }
  result.final_checkpoint = options.out_dir + "/final.fcar";
  trainer.save_checkpoint(result.final_checkpoint);
  result.steps = trainer.step();
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace facectl
