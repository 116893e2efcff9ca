#include <gtest/gtest.h>

#include <numbers>

#include "facectl/encoders.hpp"
#include "facectl/morphable_model.hpp"
#include "test_support.hpp"

using namespace facectl;
using facectl::testing::expect_gradients_match;
using facectl::testing::random_tensor;

namespace {

Tensor random_one_hot(int B, int N, int H, int W, std::mt19937_64& rng, bool allow_empty = true) {
  Tensor seg({B, N, H, W});
  for (int b = 0; b < B; ++b) {
    // Restrict each sample to a random subset of classes so some regions are empty.
    std::vector<int> allowed;
    for (int n = 0; n < N; ++n)
      if (!allow_empty || rng() % 3 != 0) allowed.push_back(n);
    if (allowed.empty()) allowed.push_back(0);
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) seg(b, allowed[rng() % allowed.size()], i, j) = 1.0;
  }
  return seg;
}

double smooth_field(double x, double y, int c) {
  return 0.5 * std::sin(0.11 * x + 0.07 * y + c) + 0.3 * std::cos(0.05 * x - 0.13 * y + 2.0 * c);
}

}  // namespace

// --- alignment -----------------------------------------------------------------------

TEST(Alignment, SimilarityFitRecoversKnownTransform) {
  Similarity s;
  s.A << 0.8, -0.3, 0.3, 0.8;
  s.t << 4.0, -2.0;
  FivePoints from;
  from << 10, 12, 20, 12, 15, 18, 11, 24, 19, 24;
  FivePoints to;
  for (int k = 0; k < 5; ++k) to.row(k) = s.apply(from.row(k).transpose()).transpose();
  const Similarity fit = fit_similarity(from, to);
  EXPECT_LT((fit.A - s.A).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((fit.t - s.t).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Alignment, DegenerateLandmarksAreRejected) {
  FivePoints same = FivePoints::Constant(3.0);
  EXPECT_THROW(fit_similarity(same, same), std::invalid_argument);
  FivePoints line;
  line << 0, 0, 1, 1, 2, 2, 3, 3, 4, 4;
  EXPECT_THROW(fit_similarity(line, AlignmentTemplate{}.pixels()), std::invalid_argument);
}

TEST(Alignment, TemplateLandmarksGiveIdentityResample) {
  AlignmentTemplate tmpl;
  const Tensor img = random_tensor({1, 3, tmpl.size, tmpl.size}, 1);
  const FivePoints lm[] = {tmpl.pixels()};
  const Tensor out = align_faces(Var::constant(img), lm, tmpl).value();
  EXPECT_LT(max_abs_diff(out, img), 1e-12);
}

TEST(Alignment, RotatedPairAlignsToTheSameCrop) {
  // A smooth image and a copy rotated by 10 degrees about (32, 32), with the
  // landmarks rotated along; both crops must agree up to interpolation error.
  const int S = 64;
  const double ang = 10.0 * std::numbers::pi / 180.0, c = std::cos(ang), s = std::sin(ang);
  Tensor a({1, 3, S, S}), b({1, 3, S, S});
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < S; ++i)
      for (int j = 0; j < S; ++j) {
        const double x = j + 0.5 - 32, y = i + 0.5 - 32;
        a(0, ch, i, j) = smooth_field(x, y, ch);
        // b(p) = a(R^-1 p)
        b(0, ch, i, j) = smooth_field(c * x + s * y, -s * x + c * y, ch);
      }
  FivePoints la;
  la << 24.7, 26.6, 39.3, 26.6, 32.0, 35.6, 26.6, 42.9, 37.4, 42.9;
  FivePoints lb;
  for (int k = 0; k < 5; ++k) {
    const double x = la(k, 0) - 32, y = la(k, 1) - 32;
    lb.row(k) << c * x - s * y + 32, s * x + c * y + 32;
  }
  AlignmentTemplate tmpl;
  const FivePoints l1[] = {la}, l2[] = {lb};
  const Tensor ca = align_faces(Var::constant(a), l1, tmpl).value();
  const Tensor cb = align_faces(Var::constant(b), l2, tmpl).value();
  double mse = 0;
  for (std::size_t i = 0; i < ca.size(); ++i) mse += (ca[i] - cb[i]) * (ca[i] - cb[i]);
  mse /= static_cast<double>(ca.size());
  const double psnr = 10.0 * std::log10(4.0 / mse);  // peak-to-peak range 2
  EXPECT_GT(psnr, 30.0);
}

TEST(Alignment, GradientsMatchFiniteDifferences) {
  AlignmentTemplate tmpl;
  tmpl.size = 6;
  FivePoints lm;
  lm << 2.5, 3.0, 5.5, 3.2, 4.0, 4.6, 2.9, 6.0, 5.2, 6.1;
  expect_gradients_match(
      [&](const std::vector<Var>& v) {
        const FivePoints l[] = {lm};
        return ops::mean(align_faces(v[0], l, tmpl));
      },
      {random_tensor({1, 2, 8, 8}, 2)});
}

// --- identity encoder -------------------------------------------------------------------

TEST(IdentityEncoder, UnitNormDeterministicAndBatchInvariant) {
  IdentityEncoder enc(IdentityEncoderConfig{}, 7);
  const Tensor x = random_tensor({3, 3, 32, 32}, 3);
  const Tensor z = enc.embed_aligned(Var::constant(x)).value();
  ASSERT_EQ(z.shape(), (Shape{3, 128}));
  for (int b = 0; b < 3; ++b) {
    double n = 0;
    for (int d = 0; d < 128; ++d) n += z(b, d) * z(b, d);
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  }
  EXPECT_EQ(enc.embed_aligned(Var::constant(x)).value(), z);
  const Tensor single = enc.embed_aligned(Var::constant(slice_batch(x, 1, 2))).value();
  for (int d = 0; d < 128; ++d) EXPECT_NEAR(single(0, d), z(1, d), 1e-12);
  EXPECT_THROW(enc.embed_aligned(Var::constant(Tensor({1, 3, 16, 16}))), std::invalid_argument);
}

TEST(IdentityEncoder, GradientsWithRespectToInput) {
  IdentityEncoderConfig cfg;
  cfg.crop.size = 8;
  cfg.channels = {4, 6};
  IdentityEncoder enc(cfg, 8);
  expect_gradients_match([&](const std::vector<Var>& v) { return enc.embed_aligned(v[0]); },
                         {random_tensor({2, 3, 8, 8}, 4)});
}

// --- style encoder -------------------------------------------------------------------------

TEST(StyleEncoder, ShapeAndAbsentRegions) {
  Initializer init(9);
  StyleEncoder enc(StyleEncoderConfig{}, init);
  Tensor seg({2, 8, 16, 16});
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) seg(b, 3, i, j) = 1.0;
  const Tensor img = Tensor::full({2, 3, 16, 16}, 0.25);
  const Tensor S = enc.encode(Var::constant(img), seg).value();
  ASSERT_EQ(S.shape(), (Shape{2, 8, 64}));
  double row_abs = 0;
  for (int n = 0; n < 8; ++n)
    for (int d = 0; d < 64; ++d) {
      if (n != 3) EXPECT_EQ(S(0, n, d), 0.0);
      else row_abs += std::abs(S(0, n, d));
    }
  EXPECT_GT(row_abs, 0.0);
  EXPECT_EQ(enc.encode(Var::constant(img), seg).value(), S);
}

TEST(StyleEncoder, ClassPermutationPermutesRows) {
  Initializer init(10);
  StyleEncoder enc(StyleEncoderConfig{{4, 6}, 5}, init);
  std::mt19937_64 rng(11);
  const Tensor seg = random_one_hot(1, 4, 8, 8, rng);
  const int perm[4] = {2, 0, 3, 1};
  Tensor pseg(seg.shape());
  for (int n = 0; n < 4; ++n)
    for (int p = 0; p < 64; ++p) pseg[perm[n] * 64 + p] = seg[n * 64 + p];
  const Var img = Var::constant(random_tensor({1, 3, 8, 8}, 12));
  const Tensor a = enc.encode(img, seg).value(), b = enc.encode(img, pseg).value();
  for (int n = 0; n < 4; ++n)
    for (int d = 0; d < 5; ++d) EXPECT_EQ(b(0, perm[n], d), a(0, n, d));
}

TEST(StyleEncoder, RejectsNonOneHotAndChecksGradients) {
  Initializer init(13);
  StyleEncoder enc(StyleEncoderConfig{{3, 4}, 3}, init);
  Tensor bad = Tensor::full({1, 2, 4, 4}, 0.5);
  EXPECT_THROW(enc.encode(Var::constant(random_tensor({1, 3, 4, 4}, 1)), bad), std::invalid_argument);
  std::mt19937_64 rng(14);
  const Tensor seg = random_one_hot(1, 3, 4, 4, rng, false);
  expect_gradients_match([&](const std::vector<Var>& v) { return enc.encode(v[0], seg); },
                         {random_tensor({1, 3, 4, 4}, 15)}, 1e-5);
}

// --- pooling and broadcast -----------------------------------------------------------------

TEST(RegionPool, HandBuiltTwoByTwo) {
  Tensor F({1, 1, 2, 2}, {1.0, 2.0, 3.0, 5.0});
  Tensor seg({1, 2, 2, 2}, {1, 0, 0, 1, 0, 1, 1, 0});  // region 0: pixels 0, 3; region 1: pixels 1, 2
  const Tensor S = ops::region_average_pool(Var::constant(F), seg).value();
  EXPECT_DOUBLE_EQ(S(0, 0, 0), 3.0);
  EXPECT_DOUBLE_EQ(S(0, 1, 0), 2.5);
}

TEST(RegionPool, HandBroadcastProduct) {
  // 2 classes, 2 x 1 image, D = 2: pixel 0 is class 1, pixel 1 is class 0.
  Tensor S({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor seg({1, 2, 2, 1}, {0, 1, 1, 0});
  const Tensor z = ops::broadcast_styles(Var::constant(S), seg).value();
  EXPECT_EQ(z, Tensor({1, 2, 2, 1}, {3.0, 1.0, 4.0, 2.0}));
}

TEST(RegionPool, PoolOfBroadcastIsExactOnNonEmptyRegions) {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 200; ++trial) {
    const int B = 1 + trial % 3, N = 2 + trial % 7, D = 1 + trial % 5, H = 3 + trial % 6, W = 2 + trial % 5;
    const Tensor S = random_tensor({B, N, D}, 1000 + trial);
    const Tensor seg = random_one_hot(B, N, H, W, rng);
    const Tensor back =
        ops::region_average_pool(ops::broadcast_styles(Var::constant(S), seg), seg).value();
    const std::size_t P = static_cast<std::size_t>(H) * W;
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < N; ++n) {
        double count = 0;
        for (std::size_t p = 0; p < P; ++p) count += seg[(b * N + n) * P + p];
        for (int d = 0; d < D; ++d) ASSERT_EQ(back(b, n, d), count > 0 ? S(b, n, d) : 0.0) << trial;
      }
  }
}

TEST(RegionPool, BroadcastIsExactlyLinear) {
  std::mt19937_64 rng(17);
  const Tensor seg = random_one_hot(2, 5, 6, 7, rng);
  const Tensor s1 = random_tensor({2, 5, 3}, 18), s2 = random_tensor({2, 5, 3}, 19);
  const double a = 0.37, c = -1.9;
  const Tensor lhs = ops::broadcast_styles(Var::constant(s1 * a + s2 * c), seg).value();
  const Tensor rhs = ops::broadcast_styles(Var::constant(s1), seg).value() * a +
                     ops::broadcast_styles(Var::constant(s2), seg).value() * c;
  EXPECT_EQ(lhs, rhs);
}

TEST(RegionPool, SingleNonZeroRowLightsOnlyItsRegion) {
  std::mt19937_64 rng(20);
  const Tensor seg = random_one_hot(1, 4, 5, 5, rng, false);
  Tensor S({1, 4, 2});
  S(0, 2, 0) = 1.0;
  S(0, 2, 1) = -2.0;
  const Tensor z = ops::broadcast_styles(Var::constant(S), seg).value();
  for (int p = 0; p < 25; ++p) EXPECT_EQ(z[p] != 0.0, seg[2 * 25 + p] == 1.0);
}

// --- segmentation helpers --------------------------------------------------------------------

TEST(Segmentation, OneHotFromLabelsAndValidation) {
  const std::vector<std::vector<int>> labels = {{0, 1, 2, 1}};
  const Tensor seg = one_hot_segmentation(labels, 3, 2, 2);
  EXPECT_NO_THROW(validate_segmentation(seg));
  EXPECT_EQ(seg(0, 1, 0, 1), 1.0);
  EXPECT_THROW(one_hot_segmentation(std::vector<std::vector<int>>{{0, 5, 0, 0}}, 3, 2, 2), std::invalid_argument);
  Tensor two = seg;
  two(0, 0, 0, 1) = 1.0;
  EXPECT_THROW(validate_segmentation(two), std::invalid_argument);
}

TEST(Segmentation, DownsampleKeepsOneHotAndPicksCorners) {
  // 4 x 4 checkerboard of two classes: output (i, j) reads input (2i, 2j).
  std::vector<int> lab(16);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) lab[i * 4 + j] = (i + j) % 2;
  const Tensor seg = one_hot_segmentation(std::vector<std::vector<int>>{lab}, 2, 4, 4);
  const Tensor d = downsample_segmentation(seg, 2, 2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) EXPECT_EQ(d(0, lab[(2 * i) * 4 + 2 * j], i, j), 1.0);
  EXPECT_NO_THROW(validate_segmentation(d));
  EXPECT_EQ(downsample_segmentation(seg, 4, 4), seg);
  EXPECT_NO_THROW(validate_segmentation(downsample_segmentation(seg, 7, 5)));
}
