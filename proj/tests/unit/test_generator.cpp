#include <gtest/gtest.h>

#include <Eigen/SVD>

#include "facectl/encoders.hpp"
#include "facectl/generator.hpp"
#include "test_support.hpp"

using namespace facectl;
using facectl::testing::expect_gradients_match;
using facectl::testing::random_tensor;

namespace {

void zero_out(Var& v) {
  for (double& x : v.mutable_value().values()) x = 0.0;
}

// Single-region segmentation: every pixel belongs to class `cls`.
Tensor uniform_seg(int B, int N, int H, int W, int cls) {
  Tensor seg({B, N, H, W});
  for (int b = 0; b < B; ++b)
    for (int p = 0; p < H * W; ++p) seg[(b * N + cls) * H * W + p] = 1.0;
  return seg;
}

Tensor striped_seg(int B, int N, int H, int W) {
  Tensor seg({B, N, H, W});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) seg(b, (i + 2 * j + b) % N, i, j) = 1.0;
  return seg;
}

ISNormConfig small_norm(int channels) {
  ISNormConfig c;
  c.channels = channels;
  c.id_dim = 3;
  c.style_dim = 2;
  c.hidden = 2;
  return c;
}

GeneratorConfig tiny_generator(int size) {
  GeneratorConfig g;
  g.image_size = size;
  g.initial_resolution = size / 4;
  g.channels = {3, 3};
  g.upsample_blocks = {0, 1};
  g.background_blocks = {1};
  g.num_classes = 3;
  g.style_dim = 2;
  g.id_dim = 3;
  g.conditioning_dim = 4;
  g.head_hidden = 2;
  return g;
}

GeneratorInputs tiny_inputs(const GeneratorConfig& g, int B, std::uint64_t seed) {
  GeneratorInputs in;
  const int S = g.image_size;
  in.conditioning = Var::constant(random_tensor({B, g.conditioning_dim}, seed));
  in.render = random_tensor({B, 3, S, S}, seed + 1);
  in.z_id = Var::constant(random_tensor({B, g.id_dim}, seed + 2));
  in.styles = Var::constant(random_tensor({B, g.num_classes, g.style_dim}, seed + 3));
  in.seg = striped_seg(B, g.num_classes, S, S);
  in.background = random_tensor({B, 3, S, S}, seed + 4);
  return in;
}

}  // namespace

// --- IS normalization ---------------------------------------------------------------------

TEST(ISNorm, ForcedIdentityModulationIsBatchNorm) {
  Initializer init(1);
  ISNorm norm(small_norm(4), init);
  zero_out(norm.id_fc.weight);
  zero_out(norm.id_fc.bias);
  for (Conv2d* c : {&norm.gamma_conv, &norm.beta_conv}) {
    zero_out(c->weight);
    zero_out(c->bias);
  }
  const Tensor F = random_tensor({3, 4, 5, 5}, 2);
  ISContext ctx{Var::constant(random_tensor({3, 3}, 3)), Var::constant(random_tensor({3, 4, 2}, 4)),
                striped_seg(3, 4, 5, 5)};
  auto stats = ops::RunningStats::identity(4);
  const Tensor expected = ops::batch_norm(Var::constant(F), stats, true).value();
  EXPECT_EQ(norm.forward(Var::constant(F), ctx, true).value(), expected);
}

TEST(ISNorm, HandArithmeticOneByOneTwoChannels) {
  ISNormConfig cfg;
  cfg.channels = 2;
  cfg.id_dim = 2;
  cfg.style_dim = 1;
  cfg.hidden = 1;
  cfg.kernel = 1;
  Initializer init(5);
  ISNorm norm(cfg, init);
  // id_fc rows: gamma offsets for c0, c1 then betas.
  norm.id_fc.weight.mutable_value() = Tensor({4, 2}, {0.5, -0.25, 0.1, 0.2, -0.3, 0.4, 0.05, 0.0});
  norm.id_fc.bias.mutable_value() = Tensor({4}, {0.1, 0.0, 0.2, -0.1});
  norm.style_weight.mutable_value() = Tensor({1, 1, 1, 1}, {1.5});
  norm.style_bias.mutable_value() = Tensor({1}, {-0.2});
  norm.gamma_conv.weight.mutable_value() = Tensor({2, 1, 1, 1}, {0.4, -0.6});
  norm.gamma_conv.bias.mutable_value() = Tensor({2}, {0.0, 0.1});
  norm.beta_conv.weight.mutable_value() = Tensor({2, 1, 1, 1}, {0.3, 0.2});
  norm.beta_conv.bias.mutable_value() = Tensor({2}, {-0.05, 0.15});

  const double F[2][2] = {{1.0, 3.0}, {-2.0, 0.5}};  // [batch][channel]
  const double z[2][2] = {{0.6, 0.8}, {-1.0, 0.0}};
  const double style[2] = {0.3, -0.4};  // region 0 of a single-region map
  Tensor ft({2, 2, 1, 1}, {F[0][0], F[0][1], F[1][0], F[1][1]});
  ISContext ctx{Var::constant(Tensor({2, 2}, {z[0][0], z[0][1], z[1][0], z[1][1]})),
                Var::constant(Tensor({2, 1, 1}, {style[0], style[1]})), uniform_seg(2, 1, 1, 1, 0)};
  const Tensor out = norm.forward(Var::constant(ft), ctx, true).value();

  const double W[4][2] = {{0.5, -0.25}, {0.1, 0.2}, {-0.3, 0.4}, {0.05, 0.0}};
  const double bfc[4] = {0.1, 0.0, 0.2, -0.1};
  const double gw[2] = {0.4, -0.6}, gb[2] = {0.0, 0.1}, bw[2] = {0.3, 0.2}, bb[2] = {-0.05, 0.15};
  for (int c = 0; c < 2; ++c) {
    const double mean = 0.5 * (F[0][c] + F[1][c]);
    const double var = 0.5 * ((F[0][c] - mean) * (F[0][c] - mean) + (F[1][c] - mean) * (F[1][c] - mean));
    for (int b = 0; b < 2; ++b) {
      const double fbar = (F[b][c] - mean) / std::sqrt(var + 1e-5);
      const double g_id = 1.0 + W[c][0] * z[b][0] + W[c][1] * z[b][1] + bfc[c];
      const double b_id = W[2 + c][0] * z[b][0] + W[2 + c][1] * z[b][1] + bfc[2 + c];
      double hidden = 1.5 * style[b] - 0.2;
      if (hidden < 0) hidden *= 0.2;
      const double g_s = 1.0 + gw[c] * hidden + gb[c];
      const double b_s = bw[c] * hidden + bb[c];
      EXPECT_NEAR(out(b, c, 0, 0), g_s * (g_id * fbar + b_id) + b_s, 1e-12) << b << "," << c;
    }
  }
}

TEST(ISNorm, ConstantStyleGivesConstantModulationAndIdentityReachesEveryPixel) {
  Initializer init(6);
  ISNorm norm(small_norm(3), init);
  const Tensor seg = uniform_seg(2, 4, 6, 6, 1);
  const Var styles = Var::constant(random_tensor({2, 4, 2}, 7));
  auto [gamma, beta] = norm.style_affine(styles, seg);
  // Away from the zero-padded border the modulation is spatially constant.
  for (int c = 0; c < 3; ++c)
    for (int i = 1; i < 5; ++i)
      for (int j = 1; j < 5; ++j) {
        EXPECT_NEAR(gamma.value()(0, c, i, j), gamma.value()(0, c, 1, 1), 1e-14);
        EXPECT_NEAR(beta.value()(0, c, i, j), beta.value()(0, c, 1, 1), 1e-14);
      }
  const Var F = Var::constant(random_tensor({2, 3, 6, 6}, 8));
  const Tensor a = norm.forward(F, {Var::constant(random_tensor({2, 3}, 9)), styles, seg}, true).value();
  const Tensor b = norm.forward(F, {Var::constant(random_tensor({2, 3}, 10)), styles, seg}, true).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NE(a[i], b[i]) << i;
}

TEST(ISNorm, EvalModeIsDeterministicAndBatchSizeInvariant) {
  Initializer init(11);
  ISNorm norm(small_norm(3), init);
  const Tensor seg = striped_seg(4, 4, 5, 5);
  ISContext ctx{Var::constant(random_tensor({4, 3}, 12)), Var::constant(random_tensor({4, 4, 2}, 13)), seg};
  for (int s = 0; s < 3; ++s) norm.forward(Var::constant(random_tensor({4, 3, 5, 5}, 20 + s, -2, 3)), ctx, true);
  const Tensor F = random_tensor({4, 3, 5, 5}, 30);
  const Tensor full = norm.forward(Var::constant(F), ctx, false).value();
  EXPECT_EQ(norm.forward(Var::constant(F), ctx, false).value(), full);
  const std::vector<int> pick = {2};
  ISContext one{ops::gather_batch(ctx.z_id, pick), ops::gather_batch(ctx.styles, pick), slice_batch(seg, 2, 3)};
  const Tensor single = norm.forward(Var::constant(slice_batch(F, 2, 3)), one, false).value();
  for (std::size_t i = 0; i < single.size(); ++i) EXPECT_NEAR(single[i], full[2 * single.size() + i], 1e-12);
}

TEST(ISNorm, RejectsChannelMismatch) {
  Initializer init(14);
  ISNorm norm(small_norm(3), init);
  ISContext ctx{Var::constant(random_tensor({1, 3}, 1)), Var::constant(random_tensor({1, 4, 2}, 2)),
                striped_seg(1, 4, 4, 4)};
  EXPECT_THROW(norm.forward(Var::constant(random_tensor({1, 5, 4, 4}, 3)), ctx, true), std::invalid_argument);
  ctx.seg = striped_seg(1, 4, 3, 3);
  EXPECT_THROW(norm.forward(Var::constant(random_tensor({1, 3, 4, 4}, 3)), ctx, true), std::invalid_argument);
}

TEST(ISNorm, GradientsWithRespectToAllInputs) {
  Initializer init(15);
  ISNorm norm(small_norm(2), init);
  const Tensor seg = striped_seg(2, 4, 3, 3);
  expect_gradients_match(
      [&](const std::vector<Var>& v) { return norm.forward(v[0], {v[1], v[2], seg}, true); },
      {random_tensor({2, 2, 3, 3}, 16), random_tensor({2, 3}, 17), random_tensor({2, 4, 2}, 18)}, 1e-6);
}

// --- IS block ----------------------------------------------------------------------------------

TEST(ISBlock, ZeroInputAndZeroConvWeightsGiveZero) {
  Initializer init(19);
  ISBlockConfig cfg{3, 5, true, false, small_norm(0)};
  ISBlock block(cfg, init);
  for (Conv2d* c : {&block.conv1, &block.conv2, &block.conv_skip}) zero_out(c->weight);
  ISContext ctx{Var::constant(random_tensor({2, 3}, 1)), Var::constant(random_tensor({2, 4, 2}, 2)),
                striped_seg(2, 4, 4, 4)};
  const Tensor out = block.forward(Var::constant(Tensor({2, 3, 4, 4})), ctx, true).value();
  ASSERT_EQ(out.shape(), (Shape{2, 5, 8, 8}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(ISBlock, IdentityGradientMatchesFiniteDifferences) {
  Initializer init(20);
  ISBlock block({3, 2, true, true, small_norm(0)}, init);
  const Tensor seg = striped_seg(2, 4, 3, 3);
  const Var x = Var::constant(random_tensor({2, 3, 3, 3}, 21));
  const Var styles = Var::constant(random_tensor({2, 4, 2}, 22));
  expect_gradients_match([&](const std::vector<Var>& v) { return block.forward(x, {v[0], styles, seg}, true); },
                         {random_tensor({2, 3}, 23)}, 1e-3);
}

// --- generator -----------------------------------------------------------------------------------

TEST(Generator, RejectsInconsistentResolution) {
  GeneratorConfig g;
  g.image_size = 128;
  EXPECT_THROW(g.validate(), std::invalid_argument);
  GeneratorConfig h;
  h.background_blocks = {1, 2, 3, 4, 5, 6, 7, 0, 1};
  EXPECT_THROW(h.validate(), std::invalid_argument);
  EXPECT_NO_THROW(GeneratorConfig{}.validate());
  Initializer init(1);
  g.image_size = 100;
  EXPECT_THROW(Generator(g, init), std::invalid_argument);
}

TEST(Generator, DefaultOutputShapeRangeAndIdentitySensitivity) {
  Initializer init(24);
  GeneratorConfig g;
  Generator gen(g, init);
  const int B = 2;
  GeneratorInputs in;
  in.conditioning = Var::constant(random_tensor({B, g.conditioning_dim}, 1));
  in.render = random_tensor({B, 3, 64, 64}, 2);
  in.z_id = Var::constant(random_tensor({B, g.id_dim}, 3));
  in.styles = Var::constant(random_tensor({B, g.num_classes, g.style_dim}, 4));
  in.seg = striped_seg(B, g.num_classes, 64, 64);
  in.background = random_tensor({B, 3, 64, 64}, 5);
  const Tensor a = gen.forward(in, false).value();
  ASSERT_EQ(a.shape(), (Shape{B, 3, 64, 64}));
  for (double v : a.values()) ASSERT_TRUE(v >= -1.0 && v <= 1.0);
  in.z_id = Var::constant(random_tensor({B, g.id_dim}, 6));
  const Tensor b = gen.forward(in, false).value();
  EXPECT_GT(max_abs_diff(a, b), 0.0);
}

TEST(Generator, IdentityAblationMakesOutputInvariantToEmbedding) {
  GeneratorConfig g = tiny_generator(8);
  g.use_identity = false;
  Initializer init(25);
  Generator gen(g, init);
  GeneratorInputs in = tiny_inputs(g, 2, 26);
  const Tensor a = gen.forward(in, false).value();
  in.z_id = Var::constant(random_tensor({2, 3}, 27));
  EXPECT_EQ(gen.forward(in, false).value(), a);
  in.z_id = Var();
  EXPECT_EQ(gen.forward(in, false).value(), a);
}

TEST(Generator, ConditioningPathGradients) {
  for (int size : {8, 16}) {
    GeneratorConfig g = tiny_generator(size);
    Initializer init(28 + size);
    Generator gen(g, init);
    const GeneratorInputs base = tiny_inputs(g, 2, 40 + size);
    expect_gradients_match(
        [&](const std::vector<Var>& v) {
          GeneratorInputs in = base;
          in.z_id = v[0];
          in.styles = v[1];
          in.conditioning = v[2];
          return gen.forward(in, true);
        },
        {base.z_id.value(), base.styles.value(), base.conditioning.value()}, 1e-3);
  }
}

TEST(Generator, ConditioningModesSelectTheirInputs) {
  for (ConditioningMode m : {ConditioningMode::Render, ConditioningMode::Fc, ConditioningMode::Both}) {
    GeneratorConfig g = tiny_generator(8);
    g.conditioning = m;
    Initializer init(50);
    Generator gen(g, init);
    GeneratorInputs in = tiny_inputs(g, 2, 51);
    const Tensor a = gen.forward(in, false).value();
    GeneratorInputs r = in;
    r.render = random_tensor({2, 3, 8, 8}, 152);
    GeneratorInputs f = in;
    f.conditioning = Var::constant(random_tensor({2, 4}, 153));
    EXPECT_EQ(max_abs_diff(gen.forward(r, false).value(), a) == 0.0, m == ConditioningMode::Fc) << to_string(m);
    EXPECT_EQ(max_abs_diff(gen.forward(f, false).value(), a) == 0.0, m == ConditioningMode::Render) << to_string(m);
  }
  EXPECT_THROW(parse_conditioning_mode("image"), std::invalid_argument);
}

TEST(Generator, BackgroundReachesOutput) {
  GeneratorConfig g = tiny_generator(8);
  Initializer init(54);
  Generator gen(g, init);
  GeneratorInputs in = tiny_inputs(g, 2, 55);
  const Tensor a = gen.forward(in, false).value();
  in.background = random_tensor({2, 3, 8, 8}, 56);
  EXPECT_GT(max_abs_diff(gen.forward(in, false).value(), a), 0.0);
}

TEST(Generator, MaskedBackgroundZerosTheFace) {
  Tensor img = random_tensor({1, 3, 2, 2}, 57);
  Tensor mask({1, 2, 2}, {1, 0, 0, 1});
  const Tensor bg = masked_background(img, mask);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(bg(0, c, 0, 0), 0.0);
    EXPECT_EQ(bg(0, c, 0, 1), img(0, c, 0, 1));
  }
}

// --- discriminator ----------------------------------------------------------------------------------

TEST(Discriminator, LogitShapesFollowStrideArithmetic) {
  Initializer init(60);
  Discriminator d(DiscriminatorConfig{}, init);
  // Four stride-2 kernel-4 pad-1 layers halve the side each time; the logit
  // conv (kernel 3, pad 1) keeps it.
  auto side = [](int s) {
    for (int l = 0; l < 4; ++l) s = (s + 2 * 1 - 4) / 2 + 1;
    return s;
  };
  const Tensor seg = striped_seg(1, 8, 128, 128);
  const auto out = d.forward(Var::constant(random_tensor({1, 3, 128, 128}, 61)), seg);
  ASSERT_EQ(out.logits.size(), 2u);
  EXPECT_EQ(out.logits[0].shape(), (Shape{1, 1, side(128), side(128)}));
  EXPECT_EQ(out.logits[1].shape(), (Shape{1, 1, side(64), side(64)}));
  EXPECT_EQ(side(128), 8);
  EXPECT_EQ(out.features[0].size(), 4u);
  const auto again = d.forward(Var::constant(random_tensor({1, 3, 128, 128}, 61)), seg);
  EXPECT_EQ(again.logits[0].value(), out.logits[0].value());
  EXPECT_EQ(again.logits[1].value(), out.logits[1].value());
}

TEST(Discriminator, StripesShiftedByOneCellShiftTheLogits) {
  Initializer init(62);
  DiscriminatorConfig cfg;
  cfg.scales = 1;
  cfg.use_segmentation = false;
  Discriminator d(cfg, init);
  // Vertical stripes of period 32 on a wide strip; shifting by 16 px (the
  // stack's total stride) moves the logit grid by one cell. The zero-padded
  // border still nudges the instance-norm statistics, hence the tolerance.
  const int H = 64, W = 2048;
  auto stripes = [&](int shift) {
    Tensor t({1, 3, H, W});
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) t(0, c, i, j) = std::sin(2 * std::numbers::pi * (j + shift) / 32.0 + c);
    return t;
  };
  const Tensor a = d.forward(Var::constant(stripes(0)), {}).logits[0].value();
  const Tensor b = d.forward(Var::constant(stripes(16)), {}).logits[0].value();
  ASSERT_EQ(a.shape(), (Shape{1, 1, H / 16, W / 16}));
  double scale = 0.0;
  for (double v : a.values()) scale = std::max(scale, std::abs(v));
  // Cells within the receptive field (about 80 px) of the left or right edge are skipped.
  double worst = 0.0, unshifted = 0.0;
  for (int i = 0; i < H / 16; ++i)
    for (int j = 6; j < W / 16 - 7; ++j) {
      worst = std::max(worst, std::abs(b(0, 0, i, j) - a(0, 0, i, j + 1)));
      unshifted = std::max(unshifted, std::abs(b(0, 0, i, j) - a(0, 0, i, j)));
    }
  EXPECT_LT(worst, 0.05 * scale);
  EXPECT_GT(unshifted, 0.3 * scale);
  // The stripe period spans two cells, so unshifted logits repeat every two cells.
  EXPECT_NEAR(a(0, 0, 1, 10), a(0, 0, 1, 12), 1e-9);
}

// --- spectral normalization -------------------------------------------------------------------------

TEST(SpectralNormalize, DiagonalAndIdentityCases) {
  const Tensor diag({2, 2}, {3.0, 0.0, 0.0, 1.0});
  auto s = ops::init_spectral_state(diag.shape(), 63);
  ops::power_iterate(diag, s, 50);
  EXPECT_NEAR(ops::spectral_sigma(diag, s), 3.0, 1e-3);
  const Tensor dn = ops::spectral_normalize(Var::constant(diag), s).value();
  EXPECT_NEAR(dn(0, 0), 1.0, 1e-3);
  const Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto e = ops::init_spectral_state(eye.shape(), 64);
  ops::power_iterate(eye, e, 1);
  EXPECT_LT(max_abs_diff(ops::spectral_normalize(Var::constant(eye), e).value(), eye), 1e-12);
}

TEST(SpectralNormalize, NormalizedConvWeightHasUnitTopSingularValue) {
  Initializer init(65);
  Conv2d conv(16, 24, 3, 1, 1, true, init);
  for (int i = 0; i < 50; ++i) ops::power_iterate(conv.weight.value(), conv.sn, 1);
  const Tensor w = conv.effective_weight().value();
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(w.data(), 24,
                                                                                                 16 * 9);
  const double top = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()[0];
  EXPECT_LE(top, 1.01);
  EXPECT_GT(top, 0.99);
}
