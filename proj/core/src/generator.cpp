#include "facectl/generator.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "facectl/encoders.hpp"

namespace facectl {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

void shrink_weights(Conv2d& c, double factor) {
  for (double& w : c.weight.mutable_value().values()) w *= factor;
}

}  // namespace

// --- IS normalization ---------------------------------------------------------------

ISNorm::ISNorm(const ISNormConfig& config, Initializer& init) : config_(config) {
  require(config.channels > 0, "IS norm needs a positive channel count");
  stats = ops::RunningStats::identity(config.channels);
  if (config.use_identity) id_fc = Linear(config.id_dim, 2 * config.channels, init);
  if (config.use_style) {
    const int k = config.kernel;
    style_weight = Var::parameter(init.he({config.hidden, config.style_dim, k, k}, config.style_dim * k * k));
    style_bias = Var::parameter(Tensor::zeros({config.hidden}));
    const int ko = config.out_kernel;
    gamma_conv = Conv2d(config.hidden, config.channels, ko, 1, ko / 2, false, init);
    beta_conv = Conv2d(config.hidden, config.channels, ko, 1, ko / 2, false, init);
    // Start close to plain batch norm.
    shrink_weights(gamma_conv, 0.1);
    shrink_weights(beta_conv, 0.1);
  }
}

std::pair<Var, Var> ISNorm::identity_affine(const Var& z_id) const {
  require(z_id.defined() && z_id.shape().size() == 2 && z_id.dim(1) == config_.id_dim,
          "IS norm: identity embedding must be B x " + std::to_string(config_.id_dim));
  const Var out = id_fc.forward(z_id);
  const int C = config_.channels;
  return {ops::add_scalar(ops::slice_channels(out, 0, C), 1.0), ops::slice_channels(out, C, 2 * C)};
}

std::pair<Var, Var> ISNorm::style_affine(const Var& styles, const Tensor& seg) const {
  require(styles.defined() && styles.shape().size() == 3 && styles.dim(2) == config_.style_dim,
          "IS norm: style matrix must be B x N x " + std::to_string(config_.style_dim));
  const Var hidden =
      ops::leaky_relu(ops::style_conv2d(styles, seg, style_weight, style_bias, config_.kernel / 2));
  return {ops::add_scalar(gamma_conv.forward(hidden), 1.0), beta_conv.forward(hidden)};
}

Var ISNorm::forward(const Var& features, const ISContext& ctx, bool training) {
  require(features.shape().size() == 4 && features.dim(1) == config_.channels,
          "IS norm expects " + std::to_string(config_.channels) + " channels, got " + to_string(features.shape()));
  Var h = ops::batch_norm(features, stats, training);
  if (config_.use_identity) {
    auto [gamma, beta] = identity_affine(ctx.z_id);
    require(gamma.dim(0) == features.dim(0), "IS norm: identity batch size mismatch");
    h = ops::channel_affine(h, gamma, beta);
  }
  if (config_.use_style) {
    require(ctx.seg.rank() == 4 && ctx.seg.dim(2) == features.dim(2) && ctx.seg.dim(3) == features.dim(3),
            "IS norm: segmentation " + to_string(ctx.seg.shape()) + " does not match features " +
                to_string(features.shape()));
    auto [gamma, beta] = style_affine(ctx.styles, ctx.seg);
    h = ops::add(ops::mul(h, gamma), beta);
  }
  return h;
}

void ISNorm::visit(const std::string& prefix, StateVisitor& v) {
  v.buffer(prefix + ".running_mean", stats.mean);
  v.buffer(prefix + ".running_var", stats.var);
  if (config_.use_identity) id_fc.visit(prefix + ".id_fc", v);
  if (config_.use_style) {
    v.parameter(prefix + ".style_hidden.weight", style_weight);
    v.parameter(prefix + ".style_hidden.bias", style_bias);
    gamma_conv.visit(prefix + ".style_gamma", v);
    beta_conv.visit(prefix + ".style_beta", v);
  }
}

// --- IS block ------------------------------------------------------------------------

ISBlock::ISBlock(const ISBlockConfig& config, Initializer& init) : config_(config) {
  ISNormConfig n = config.norm;
  n.channels = config.in_channels;
  norm1 = ISNorm(n, init);
  conv1 = Conv2d(config.in_channels, config.out_channels, 3, 1, 1, config.spectral, init);
  n.channels = config.out_channels;
  norm2 = ISNorm(n, init);
  conv2 = Conv2d(config.out_channels, config.out_channels, 3, 1, 1, config.spectral, init);
  if (config.in_channels != config.out_channels) {
    n.channels = config.in_channels;
    norm_skip = ISNorm(n, init);
    conv_skip = Conv2d(config.in_channels, config.out_channels, 1, 1, 0, config.spectral, init, false);
  }
}

Var ISBlock::forward(const Var& x, const ISContext& ctx, bool training) {
  Var h = conv1.forward(ops::leaky_relu(norm1.forward(x, ctx, training)));
  h = conv2.forward(ops::leaky_relu(norm2.forward(h, ctx, training)));
  const Var skip =
      config_.in_channels != config_.out_channels ? conv_skip.forward(norm_skip.forward(x, ctx, training)) : x;
  const Var y = ops::add(h, skip);
  return config_.upsample ? ops::upsample_nearest(y, 2) : y;
}

void ISBlock::visit(const std::string& prefix, StateVisitor& v) {
  norm1.visit(prefix + ".norm1", v);
  conv1.visit(prefix + ".conv1", v);
  norm2.visit(prefix + ".norm2", v);
  conv2.visit(prefix + ".conv2", v);
  if (config_.in_channels != config_.out_channels) {
    norm_skip.visit(prefix + ".norm_skip", v);
    conv_skip.visit(prefix + ".conv_skip", v);
  }
}

// --- generator -------------------------------------------------------------------------

std::string to_string(ConditioningMode m) {
  switch (m) {
    case ConditioningMode::Render: return "render";
    case ConditioningMode::Fc: return "fc";
    case ConditioningMode::Both: return "both";
  }
  return "?";
}

ConditioningMode parse_conditioning_mode(const std::string& s) {
  if (s == "render") return ConditioningMode::Render;
  if (s == "fc") return ConditioningMode::Fc;
  if (s == "both") return ConditioningMode::Both;
  throw std::invalid_argument("unknown conditioning mode '" + s + "' (valid: render, fc, both)");
}

void GeneratorConfig::validate() const {
  require(!channels.empty(), "generator needs at least one block");
  for (int c : channels) require(c > 0, "generator block channels must be positive");
  require(static_cast<int>(background_blocks.size()) <= block_count(),
          "generator has fewer blocks than background-injection points");
  for (const auto* list : {&upsample_blocks, &background_blocks}) {
    for (std::size_t i = 0; i < list->size(); ++i) {
      require((*list)[i] >= 0 && (*list)[i] < block_count(), "generator block index out of range");
      for (std::size_t j = 0; j < i; ++j) require((*list)[i] != (*list)[j], "generator block index repeated");
    }
  }
  require(initial_resolution > 0, "initial resolution must be positive");
  const int expected = initial_resolution << upsample_blocks.size();
  require(image_size == expected, "generator resolution " + std::to_string(image_size) + " does not equal initial " +
                                      std::to_string(initial_resolution) + " x 2^" +
                                      std::to_string(upsample_blocks.size()) + " = " + std::to_string(expected));
  require(image_size % initial_resolution == 0, "image size must be a multiple of the initial resolution");
  require(num_classes > 0 && style_dim > 0 && id_dim > 0 && head_hidden > 0, "generator dimensions must be positive");
  require(conditioning == ConditioningMode::Render || conditioning_dim > 0, "conditioning_dim must be positive");
}

int GeneratorConfig::block_resolution(int block) const {
  int r = initial_resolution;
  for (int u : upsample_blocks)
    if (u < block) r *= 2;
  return r;
}

Generator::Generator(const GeneratorConfig& config, Initializer& init) : config_(config) {
  config.validate();
  const int r = config.initial_resolution, c0 = config.channels.front();
  if (config.conditioning != ConditioningMode::Fc) render_in_ = Conv2d(3, c0, 3, 1, 1, false, init);
  if (config.conditioning != ConditioningMode::Render) fc_in_ = Linear(config.conditioning_dim, c0 * r * r, init);
  ISNormConfig norm;
  norm.id_dim = config.id_dim;
  norm.style_dim = config.style_dim;
  norm.hidden = config.head_hidden;
  norm.use_identity = config.use_identity;
  norm.use_style = config.use_style;
  int in = c0;
  for (int b = 0; b < config.block_count(); ++b) {
    ISBlockConfig bc;
    bc.in_channels = in + (contains(config.background_blocks, b) ? 3 : 0);
    bc.out_channels = config.channels[b];
    bc.upsample = contains(config.upsample_blocks, b);
    bc.spectral = config.spectral;
    bc.norm = norm;
    blocks_.emplace_back(bc, init);
    in = config.channels[b];
  }
  out_ = Conv2d(in, 3, 3, 1, 1, false, init);
}

Var Generator::forward(const GeneratorInputs& in, bool training) {
  const GeneratorConfig& c = config_;
  const int S = c.image_size, r = c.initial_resolution;
  require(in.seg.rank() == 4 && in.seg.dim(1) == c.num_classes && in.seg.dim(2) == S && in.seg.dim(3) == S,
          "generator: segmentation must be B x " + std::to_string(c.num_classes) + " x " + std::to_string(S) + " x " +
              std::to_string(S) + ", got " + to_string(in.seg.shape()));
  const int B = in.seg.dim(0);
  const Shape image_shape{B, 3, S, S};

  Var x;
  if (c.conditioning != ConditioningMode::Fc) {
    require(in.render.shape() == image_shape, "generator: render conditioning must be " + to_string(image_shape));
    x = render_in_.forward(Var::constant(ops::avg_pool(in.render, S / r)));
  }
  if (c.conditioning != ConditioningMode::Render) {
    require(in.conditioning.defined() && in.conditioning.shape() == (Shape{B, c.conditioning_dim}),
            "generator: conditioning vector must be B x " + std::to_string(c.conditioning_dim));
    const Var f = ops::reshape(fc_in_.forward(in.conditioning), {B, c.channels.front(), r, r});
    x = x.defined() ? ops::add(x, f) : f;
  }
  if (!c.background_blocks.empty()) {
    require(in.background.shape() == image_shape, "generator: background must be " + to_string(image_shape));
  }

  ISContext ctx;
  if (c.use_identity) ctx.z_id = in.z_id;
  if (c.use_style) {
    require(in.styles.defined() && in.styles.shape() == (Shape{B, c.num_classes, c.style_dim}),
            "generator: style matrix must be B x " + std::to_string(c.num_classes) + " x " +
                std::to_string(c.style_dim));
    ctx.styles = in.styles;
  }
  std::map<int, Tensor> seg_at;
  int res = r;
  for (int b = 0; b < c.block_count(); ++b) {
    if (contains(c.background_blocks, b)) {
      const Var bg = Var::constant(ops::avg_pool(in.background, S / res));
      x = ops::concat_channels(std::vector<Var>{x, bg});
    }
    if (c.use_style) {
      auto it = seg_at.find(res);
      if (it == seg_at.end()) it = seg_at.emplace(res, downsample_segmentation(in.seg, res, res)).first;
      ctx.seg = it->second;
    }
    x = blocks_[b].forward(x, ctx, training);
    if (blocks_[b].config().upsample) res *= 2;
  }
  return ops::tanh(out_.forward(ops::leaky_relu(x)));
}

void Generator::visit(const std::string& prefix, StateVisitor& v) {
  if (config_.conditioning != ConditioningMode::Fc) render_in_.visit(prefix + ".render_in", v);
  if (config_.conditioning != ConditioningMode::Render) fc_in_.visit(prefix + ".fc_in", v);
  for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].visit(prefix + ".block" + std::to_string(b), v);
  out_.visit(prefix + ".out", v);
}

Tensor render_conditioning(const MorphableBasis& basis, std::span<const FaceCoefficients> coeffs, int image_size) {
  const int B = static_cast<int>(coeffs.size());
  Tensor out({B, 3, image_size, image_size});
  const std::size_t n = 3ull * image_size * image_size;
  for (int b = 0; b < B; ++b) {
    const RenderedFace r = render_face(basis, coeffs[b], image_size);
    for (std::size_t i = 0; i < n; ++i) out[b * n + i] = 2.0 * r.image[i] - 1.0;
  }
  return out;
}

Tensor conditioning_batch(const MorphableBasis& basis, std::span<const FaceCoefficients> coeffs) {
  const int B = static_cast<int>(coeffs.size()), D = conditioning_size(basis);
  Tensor out({B, D});
  for (int b = 0; b < B; ++b) {
    const Eigen::VectorXd v = conditioning_vector(basis, coeffs[b]);
    for (int d = 0; d < D; ++d) out(b, d) = v[d];
  }
  return out;
}

Tensor masked_background(const Tensor& image, const Tensor& face_mask) {
  require(image.rank() == 4 && image.dim(1) == 3, "masked_background: image must be B x 3 x H x W");
  const int B = image.dim(0), H = image.dim(2), W = image.dim(3);
  const std::size_t P = static_cast<std::size_t>(H) * W;
  require(face_mask.size() == B * P, "masked_background: mask must hold B x H x W values");
  Tensor out = image;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < P; ++p) out[(b * 3 + c) * P + p] *= 1.0 - face_mask[b * P + p];
  return out;
}

// --- discriminator ------------------------------------------------------------------------

Discriminator::Discriminator(const DiscriminatorConfig& config, Initializer& init) : config_(config) {
  require(!config.channels.empty() && config.scales >= 1, "discriminator needs layers and at least one scale");
  const int in0 = 3 + (config.use_segmentation ? config.num_classes : 0);
  for (int s = 0; s < config.scales; ++s) {
    std::vector<Conv2d> layers;
    int in = in0;
    for (int c : config.channels) {
      layers.emplace_back(in, c, 4, 2, 1, config.spectral, init);
      in = c;
    }
    layers.emplace_back(in, 1, 3, 1, 1, config.spectral, init);
    scales_.push_back(std::move(layers));
  }
}

DiscriminatorOutput Discriminator::forward(const Var& image, const Tensor& seg) const {
  require(image.shape().size() == 4 && image.dim(1) == 3, "discriminator expects B x 3 x H x W images");
  if (config_.use_segmentation) {
    require(seg.rank() == 4 && seg.dim(0) == image.dim(0) && seg.dim(1) == config_.num_classes,
            "discriminator: segmentation must be B x " + std::to_string(config_.num_classes) + " x H x W");
  }
  DiscriminatorOutput out;
  Var x = image;
  for (int s = 0; s < config_.scales; ++s) {
    if (s > 0) x = ops::avg_pool(x, 2);
    Var h = x;
    if (config_.use_segmentation) {
      const Var m = Var::constant(downsample_segmentation(seg, x.dim(2), x.dim(3)));
      h = ops::concat_channels(std::vector<Var>{x, m});
    }
    std::vector<Var> feats;
    const auto& layers = scales_[s];
    for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
      h = layers[l].forward(h);
      if (l > 0) h = ops::instance_norm(h);
      h = ops::leaky_relu(h);
      feats.push_back(h);
    }
    out.logits.push_back(layers.back().forward(h));
    out.features.push_back(std::move(feats));
  }
  return out;
}

void Discriminator::visit(const std::string& prefix, StateVisitor& v) {
  for (std::size_t s = 0; s < scales_.size(); ++s)
    for (std::size_t l = 0; l < scales_[s].size(); ++l)
      scales_[s][l].visit(prefix + ".scale" + std::to_string(s) + ".conv" + std::to_string(l), v);
}

}  // namespace facectl
