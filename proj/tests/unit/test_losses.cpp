#include <gtest/gtest.h>

#include <algorithm>

#include "facectl/losses.hpp"
#include "test_support.hpp"

using namespace facectl;
using facectl::testing::expect_gradients_match;
using facectl::testing::random_tensor;

namespace {

const MorphableBasis& basis() {
  static const MorphableBasis b = [] {
    std::mt19937_64 rng(1234);
    return make_synthetic_basis(BasisConfig{}, rng);
  }();
  return b;
}

FaceCoefficients random_coeffs(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_random_face(basis(), rng);
}

Var scalar(double v) { return Var::constant(Tensor::scalar(v)); }

LossTerms unit_terms() { return {scalar(1), scalar(1), scalar(1), scalar(1), scalar(1)}; }

LossGates all_gates() { return {true, true, true, true}; }

// Sorted values of one channel plane.
std::vector<double> sorted_plane(const Tensor& t, int b, int c) {
  const std::size_t P = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
  const double* p = t.data() + (static_cast<std::size_t>(b) * t.dim(1) + c) * P;
  std::vector<double> v(p, p + P);
  std::sort(v.begin(), v.end());
  return v;
}

LandmarkRegressorConfig tiny_regressor() {
  LandmarkRegressorConfig c;
  c.image_size = 8;
  c.landmarks = 1;
  c.channels = {4, 4};
  return c;
}

// 8x8 images with one bright pixel; the landmark is that pixel's centre.
LandmarkBatch dot_batch(std::mt19937_64& rng, int batch) {
  std::uniform_int_distribution<int> pos(1, 6);
  LandmarkBatch out{Tensor({batch, 3, 8, 8}, -1.0), Tensor({batch, 2})};
  for (int b = 0; b < batch; ++b) {
    const int x = pos(rng), y = pos(rng);
    for (int c = 0; c < 3; ++c) out.images(b, c, y, x) = 1.0;
    out.landmarks(b, 0) = (x + 0.5) / 8.0;
    out.landmarks(b, 1) = (y + 0.5) / 8.0;
  }
  return out;
}

}  // namespace

// --- total ------------------------------------------------------------------------------

TEST(TotalLoss, UnitTermsWithDefaultWeightsSumTo10211) {
  const TotalLoss t = total_loss(unit_terms(), LossWeights{}, all_gates());
  EXPECT_DOUBLE_EQ(t.report.total, 10211.0);
  EXPECT_DOUBLE_EQ(t.total.value().item(), 10211.0);
}

TEST(TotalLoss, ModeGatingFollowsTrainingPhase) {
  const LossGates gen = gates_for(TrainMode::Generation);
  EXPECT_TRUE(gen.identity && gen.landmark && gen.hm);
  EXPECT_FALSE(gen.perceptual);
  const LossGates rec = gates_for(TrainMode::Reconstruction);
  EXPECT_TRUE(rec.perceptual);
  EXPECT_FALSE(rec.identity || rec.landmark || rec.hm);

  const TotalLoss g = total_loss(unit_terms(), LossWeights{}, gen);
  EXPECT_DOUBLE_EQ(g.report.total, 1 + 10 + 10000 + 100);
  EXPECT_EQ(g.report.perceptual, 0.0);
  const TotalLoss r = total_loss(unit_terms(), LossWeights{}, rec);
  EXPECT_DOUBLE_EQ(r.report.total, 1 + 100);
}

TEST(TotalLoss, ZeroWeightsLeaveTheAdversarialTerm) {
  LossTerms terms = unit_terms();
  terms.adversarial = scalar(0.37);
  const TotalLoss t = total_loss(terms, LossWeights{0, 0, 0, 0}, all_gates());
  EXPECT_DOUBLE_EQ(t.report.total, 0.37);
}

TEST(TotalLoss, RejectsNegativeWeightsAndMissingActiveTerms) {
  EXPECT_THROW(total_loss(unit_terms(), LossWeights{-1, 0, 0, 0}, all_gates()), std::invalid_argument);
  LossTerms terms = unit_terms();
  terms.hm = Var();
  EXPECT_THROW(total_loss(terms, LossWeights{}, all_gates()), std::invalid_argument);
  EXPECT_NO_THROW(total_loss(terms, LossWeights{}, gates_for(TrainMode::Reconstruction)));
}

TEST(TotalLoss, ReportSatisfiesItsSumInvariantAndBackpropagates) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    LossTerms terms;
    std::vector<Var> leaves;
    for (Var* v : {&terms.adversarial, &terms.identity, &terms.landmark, &terms.hm, &terms.perceptual}) {
      *v = Var::parameter(Tensor::scalar(u(rng)));
      leaves.push_back(*v);
    }
    const LossWeights w{u(rng), u(rng) * 1e4, u(rng) * 100, u(rng) * 100};
    const LossGates g{trial % 2 == 0, trial % 3 == 0, trial % 5 != 0, trial % 2 == 1};
    const TotalLoss t = total_loss(terms, w, g);
    const LossReport& r = t.report;
    const double expected = r.adversarial + (g.identity ? w.identity * r.identity : 0) +
                            (g.landmark ? w.landmark * r.landmark : 0) + (g.hm ? w.hm * r.hm : 0) +
                            (g.perceptual ? w.perceptual * r.perceptual : 0);
    EXPECT_NEAR(r.total, expected, 1e-6);
    backward(t.total);
    EXPECT_DOUBLE_EQ(leaves[0].grad().item(), 1.0);
    EXPECT_DOUBLE_EQ(leaves[4].grad().item(), g.perceptual ? w.perceptual : 0.0);
  }
}

// --- perceptual ---------------------------------------------------------------------------

TEST(Perceptual, IdenticalImagesGiveZero) {
  const PerceptualExtractor ex(PerceptualConfig{}, 3);
  const Var img = Var::constant(random_tensor({2, 3, 16, 16}, 1));
  EXPECT_EQ(perceptual_loss(img, img, ex).value().item(), 0.0);
}

TEST(Perceptual, ExtractorIsSeedDeterministic) {
  const PerceptualExtractor a(PerceptualConfig{}, 3), b(PerceptualConfig{}, 3), c(PerceptualConfig{}, 4);
  const Var img = Var::constant(random_tensor({1, 3, 16, 16}, 1));
  const auto fa = a.features(img), fb = b.features(img), fc = c.features(img);
  ASSERT_EQ(fa.size(), 2u);
  EXPECT_EQ(fa[0].value(), fb[0].value());
  EXPECT_EQ(fa[1].value(), fb[1].value());
  EXPECT_GT(max_abs_diff(fa[1].value(), fc[1].value()), 0.0);
  // Stage 1 keeps resolution, the rest halve it: layer 2 at 8, layer 4 at 2.
  EXPECT_EQ(fa[0].shape(), (Shape{1, 32, 8, 8}));
  EXPECT_EQ(fa[1].shape(), (Shape{1, 64, 2, 2}));
}

TEST(Perceptual, GradientMatchesFiniteDifferences) {
  const PerceptualExtractor ex(PerceptualConfig{}, 3);
  const Tensor target = random_tensor({1, 3, 8, 8}, 7);
  expect_gradients_match(
      [&](const std::vector<Var>& in) { return perceptual_loss(Var::constant(target), in[0], ex); },
      {random_tensor({1, 3, 8, 8}, 8)}, 1e-6);
}

TEST(Perceptual, GrowsWithNoiseAmplitude) {
  const PerceptualExtractor ex(PerceptualConfig{}, 3);
  for (int i = 0; i < 10; ++i) {
    const Tensor img = random_tensor({1, 3, 16, 16}, 100 + i);
    const Tensor noise = random_tensor({1, 3, 16, 16}, 200 + i, -0.05, 0.05);
    const double small = perceptual_loss(Var::constant(img), Var::constant(img + noise), ex).value().item();
    const double large = perceptual_loss(Var::constant(img), Var::constant(img + noise * 2.0), ex).value().item();
    EXPECT_GT(small, 0.0);
    EXPECT_GT(large, small) << "image " << i;
  }
}

TEST(Perceptual, RejectsBadLayersAndShapes) {
  EXPECT_THROW(PerceptualExtractor(PerceptualConfig{{8, 8}, {3}}, 1), std::invalid_argument);
  EXPECT_THROW(PerceptualExtractor(PerceptualConfig{{8, 8}, {0}}, 1), std::invalid_argument);
  const PerceptualExtractor ex(PerceptualConfig{}, 3);
  EXPECT_THROW(perceptual_loss(Var::constant(Tensor({1, 3, 8, 8})), Var::constant(Tensor({1, 3, 16, 16})), ex),
               std::invalid_argument);
}

// --- identity ------------------------------------------------------------------------------

TEST(IdentityLoss, EqualEmbeddingsGiveZero) {
  const Var e = ops::l2_normalize_rows(Var::constant(random_tensor({4, 16}, 3)));
  EXPECT_NEAR(identity_loss(e, e).value().item(), 0.0, 1e-12);
}

TEST(IdentityLoss, AntipodalEmbeddingsGiveTwo) {
  Tensor a({2, 5}), b({2, 5});
  a(0, 1) = 1.0;
  b(0, 1) = -1.0;
  a(1, 4) = 0.6;
  a(1, 2) = 0.8;
  b(1, 4) = -0.6;
  b(1, 2) = -0.8;
  EXPECT_NEAR(identity_loss(Var::constant(a), Var::constant(b)).value().item(), 2.0, 1e-12);
}

TEST(IdentityLoss, StaysWithinZeroAndTwo) {
  for (int i = 0; i < 50; ++i) {
    const double v = identity_loss(Var::constant(random_tensor({3, 8}, 10 + i)),
                                   Var::constant(random_tensor({3, 8}, 500 + i)))
                         .value()
                         .item();
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 2.0);
  }
}

TEST(IdentityLoss, RejectsZeroNormAndShapeMismatch) {
  Tensor zero({2, 4});
  EXPECT_THROW(identity_loss(Var::constant(zero), Var::constant(random_tensor({2, 4}, 1))), std::invalid_argument);
  EXPECT_THROW(identity_loss(Var::constant(random_tensor({2, 4}, 1)), Var::constant(random_tensor({2, 5}, 1))),
               std::invalid_argument);
}

TEST(IdentityLoss, GradientMatchesFiniteDifferences) {
  expect_gradients_match([](const std::vector<Var>& in) { return identity_loss(in[0], in[1]); },
                         {random_tensor({3, 6}, 4), random_tensor({3, 6}, 5)}, 1e-7);
}

// --- aligned landmarks -------------------------------------------------------------------------

TEST(AlignedLandmarks, SelfPairGivesOwnProjection) {
  const FaceCoefficients s = random_coeffs(1);
  const Eigen::MatrixX2d own = project_landmarks(basis(), s, 64);
  EXPECT_EQ(aligned_landmarks(s, s, basis(), 64), own);
}

TEST(AlignedLandmarks, CarrySourceIdentityWithTargetPoseAndExpression) {
  const FaceCoefficients s = random_coeffs(1), t = random_coeffs(2);
  ASSERT_NE(s.alpha, t.alpha);
  const Eigen::MatrixX2d aligned = aligned_landmarks(s, t, basis(), 64);
  // Differs from the naive target landmarks because the identities differ.
  EXPECT_GT((aligned - project_landmarks(basis(), t, 64)).cwiseAbs().maxCoeff(), 1e-3);

  FaceCoefficients expected = t;
  expected.alpha = s.alpha;
  EXPECT_EQ(aligned, project_landmarks(basis(), expected, 64));

  // With the target's expression and pose replaced by the source's, the
  // result is exactly the source projection.
  FaceCoefficients t_like_s = t;
  t_like_s.rho = s.rho;
  t_like_s.theta = s.theta;
  EXPECT_EQ(aligned_landmarks(s, t_like_s, basis(), 64), project_landmarks(basis(), s, 64));
}

TEST(AlignedLandmarks, IdentityShapesTheLandmarks) {
  const FaceCoefficients s = random_coeffs(3);
  FaceCoefficients t = s;
  t.alpha = random_coeffs(4).alpha;
  EXPECT_GT((aligned_landmarks(s, t, basis(), 64) - project_landmarks(basis(), t, 64)).cwiseAbs().maxCoeff(), 1e-3);
}

// --- landmark loss and regressor ---------------------------------------------------------------

TEST(LandmarkLoss, OwnOutputGivesZeroAndUniformShiftGivesHalfSquaredShift) {
  const LandmarkRegressor reg(LandmarkRegressorConfig{}, 9);
  const Var img = Var::constant(random_tensor({2, 3, 64, 64}, 2));
  const Var pred = reg.forward(img);
  EXPECT_EQ(pred.shape(), (Shape{2, 136}));
  EXPECT_EQ(landmark_loss(pred, pred.value()).value().item(), 0.0);
  Tensor shifted = pred.value();
  for (std::size_t i = 0; i < shifted.size(); i += 2) shifted[i] += 0.1;
  EXPECT_NEAR(landmark_loss(pred, shifted).value().item(), 0.005, 1e-15);
}

TEST(LandmarkLoss, RejectsShapeMismatch) {
  EXPECT_THROW(landmark_loss(Var::constant(Tensor({2, 6})), Tensor({2, 4})), std::invalid_argument);
  EXPECT_THROW(landmark_loss(Var::constant(Tensor({2, 5})), Tensor({2, 5})), std::invalid_argument);
}

TEST(LandmarkLoss, GradientThroughRegressorMatchesFiniteDifferences) {
  LandmarkRegressorConfig cfg = tiny_regressor();
  cfg.landmarks = 3;
  const LandmarkRegressor reg(cfg, 9);
  const Tensor ref = random_tensor({2, 6}, 3, 0.0, 1.0);
  expect_gradients_match([&](const std::vector<Var>& in) { return landmark_loss(reg.forward(in[0]), ref); },
                         {random_tensor({2, 3, 8, 8}, 4)}, 1e-6);
}

TEST(LandmarkRegressor, ZeroImageGivesFiniteOutputAndBadShapesAreRejected) {
  const LandmarkRegressor reg(LandmarkRegressorConfig{}, 9);
  EXPECT_TRUE(reg.forward(Var::constant(Tensor({1, 3, 64, 64}))).value().all_finite());
  EXPECT_THROW(reg.forward(Var::constant(Tensor({1, 3, 32, 32}))), std::invalid_argument);
  LandmarkRegressorConfig odd;
  odd.image_size = 12;
  odd.channels = {4, 4, 4};
  EXPECT_THROW(LandmarkRegressor(odd, 1), std::invalid_argument);
}

TEST(NormalizeLandmarks, DividesByImageSizeInterleaved) {
  Eigen::MatrixX2d a(2, 2);
  a << 8, 16, 32, 64;
  const std::vector<Eigen::MatrixX2d> batch{a};
  const Tensor t = normalize_landmarks(batch, 64);
  EXPECT_EQ(t.shape(), (Shape{1, 4}));
  EXPECT_DOUBLE_EQ(t(0, 0), 0.125);
  EXPECT_DOUBLE_EQ(t(0, 1), 0.25);
  EXPECT_DOUBLE_EQ(t(0, 2), 0.5);
  EXPECT_DOUBLE_EQ(t(0, 3), 1.0);
  EXPECT_DOUBLE_EQ(landmark_error_px(t, Tensor({1, 4}, {0.125, 0.25 + 3.0 / 64, 0.5 + 4.0 / 64, 1.0}), 64), 3.5);
}

TEST(LandmarkPretrain, IsDeterministicUnderAFixedSeed) {
  LandmarkPretrainConfig cfg;
  cfg.steps = 30;
  cfg.batch = 8;
  cfg.validation_samples = 32;
  cfg.threshold_px = 100.0;
  LandmarkRegressor a(tiny_regressor(), 5), b(tiny_regressor(), 5);
  const LandmarkPretrainReport ra = pretrain_landmark_regressor(a, dot_batch, cfg);
  const LandmarkPretrainReport rb = pretrain_landmark_regressor(b, dot_batch, cfg);
  EXPECT_EQ(ra.validation_error_px, rb.validation_error_px);
  auto hash = [](LandmarkRegressor& r) {
    return parameter_hash(collect_parameters([&](StateVisitor& v) { r.visit("lm", v); }));
  };
  EXPECT_EQ(hash(a), hash(b));
  // Frozen afterwards.
  for (const auto& p : collect_parameters([&](StateVisitor& v) { a.visit("lm", v); }))
    EXPECT_FALSE(p.var.requires_grad()) << p.name;
}

TEST(LandmarkPretrain, LearnsTheDotTask) {
  LandmarkPretrainConfig cfg;
  cfg.steps = 400;
  cfg.batch = 16;
  cfg.lr = 3e-3;
  cfg.validation_samples = 64;
  cfg.threshold_px = 0.75;
  LandmarkRegressor reg(tiny_regressor(), 5);
  const LandmarkPretrainReport r = pretrain_landmark_regressor(reg, dot_batch, cfg);
  EXPECT_LT(r.validation_error_px, 0.75);
  EXPECT_EQ(r.steps, 400);
}

TEST(LandmarkPretrain, MissingTheThresholdAbortsWithTheMeasuredError) {
  LandmarkPretrainConfig cfg;
  cfg.steps = 2;
  cfg.batch = 4;
  cfg.validation_samples = 8;
  cfg.threshold_px = 1e-9;
  LandmarkRegressor reg(tiny_regressor(), 5);
  try {
    pretrain_landmark_regressor(reg, dot_batch, cfg);
    FAIL() << "expected a threshold failure";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("px mean held-out error"), std::string::npos) << e.what();
  }
}

// --- histogram matching ------------------------------------------------------------------------

TEST(HistogramMatch, SelfMatchingIsWithinOneBin) {
  const Tensor img = random_tensor({2, 3, 16, 16}, 6);
  const Tensor re = histogram_match(img, img);
  EXPECT_LE(max_abs_diff(re, img), 2.0 / 256);
}

TEST(HistogramMatch, ConstantImagesMapToTheTargetConstant) {
  const Tensor re = histogram_match(Tensor({1, 3, 8, 8}, 0.5), Tensor({1, 3, 8, 8}, 0.0));
  for (double v : re.values()) EXPECT_NEAR(v, 0.5, 2.0 / 256);
}

TEST(HistogramMatch, FourPixelsAreRankMatched) {
  const Tensor gen({1, 1, 2, 2}, {0.4, 0.0, 0.6, 0.2});
  const Tensor tgt({1, 1, 2, 2}, {0.7, 0.1, 0.3, 0.5});
  // Sort-based oracle: the k-th smallest generated value takes the k-th smallest target value.
  std::vector<std::size_t> order{0, 1, 2, 3};
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return gen[i] < gen[j]; });
  std::vector<double> sorted_t(tgt.values().begin(), tgt.values().end());
  std::sort(sorted_t.begin(), sorted_t.end());
  const Tensor re = histogram_match(tgt, gen);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(re[order[k]], sorted_t[k], 2.0 / 256) << k;
}

TEST(HistogramMatch, QuantilesFollowTheTargetOnRandomImages) {
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    Tensor tgt = random_tensor({1, 3, 32, 32}, 1000 + i);
    for (double& v : tgt.values()) v = v * std::abs(v);  // skewed towards 0
    const Tensor gen = random_tensor({1, 3, 32, 32}, 2000 + i, -0.8, 0.3);
    const Tensor re = histogram_match(tgt, gen);
    for (int c = 0; c < 3; ++c) {
      const auto a = sorted_plane(re, 0, c), b = sorted_plane(tgt, 0, c);
      double w1 = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) w1 += std::abs(a[k] - b[k]);
      worst = std::max(worst, w1 / static_cast<double>(a.size()));
    }
  }
  EXPECT_LT(worst, 2.0 / 256);
}

TEST(HistogramMatch, PreservesTheGeneratedOrdering) {
  const Tensor tgt = random_tensor({1, 2, 16, 16}, 8);
  const Tensor gen = random_tensor({1, 2, 16, 16}, 9);
  const Tensor re = histogram_match(tgt, gen);
  for (std::size_t i = 0; i < 256; ++i)
    for (std::size_t j = 0; j < 256; ++j)
      if (gen[i] < gen[j]) ASSERT_LE(re[i], re[j]);
}

TEST(HistogramMatch, WorksPerRegionAndCopiesEmptyRegions) {
  // Left half is region 0, right half region 1; region 2 is absent.
  const int S = 8;
  Tensor seg({1, 3, S, S});
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j) seg(0, j < S / 2 ? 0 : 1, i, j) = 1.0;
  Tensor tgt({1, 1, S, S}), gen = random_tensor({1, 1, S, S}, 3);
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j) tgt(0, 0, i, j) = j < S / 2 ? -0.5 : 0.75;
  const Tensor re = histogram_match(tgt, gen, &seg);
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j) EXPECT_NEAR(re(0, 0, i, j), j < S / 2 ? -0.5 : 0.75, 2.0 / 256);

  // A region covering nothing leaves the image untouched.
  Tensor empty_seg({1, 3, S, S});
  EXPECT_EQ(histogram_match(tgt, gen, &empty_seg), gen);
}

TEST(HistogramMatch, SeparateRegionMapsPairRegionsByClass) {
  // Target: region 0 is the top row band, region 1 the rest. Generated: the
  // same classes on a different layout, with different pixel counts.
  const int S = 8;
  Tensor tseg({1, 2, S, S}), gseg({1, 2, S, S}), tgt({1, 1, S, S});
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j) {
      tseg(0, i < 2 ? 0 : 1, i, j) = 1.0;
      tgt(0, 0, i, j) = i < 2 ? 0.9 : -0.3;
      gseg(0, j < 5 ? 0 : 1, i, j) = 1.0;
    }
  const Tensor gen = random_tensor({1, 1, S, S}, 4);
  const Tensor re = histogram_match(tgt, gen, &tseg, &gseg);
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j) EXPECT_NEAR(re(0, 0, i, j), j < 5 ? 0.9 : -0.3, 2.0 / 256);
  EXPECT_THROW(histogram_match(tgt, gen, &tseg, nullptr), std::invalid_argument);
}

TEST(HistogramMatch, RejectsMismatchedShapes) {
  EXPECT_THROW(histogram_match(Tensor({1, 3, 8, 8}), Tensor({1, 3, 8, 4})), std::invalid_argument);
  const Tensor seg({1, 2, 4, 4});
  EXPECT_THROW(histogram_match(Tensor({1, 3, 8, 8}), Tensor({1, 3, 8, 8}), &seg), std::invalid_argument);
}

TEST(HistogramMatchingLoss, ConstantOffsetGivesHalfSquare) {
  const Tensor re = random_tensor({2, 3, 8, 8}, 1);
  EXPECT_EQ(histogram_matching_loss(Var::constant(re), re).value().item(), 0.0);
  const Tensor shifted = re + Tensor(re.shape(), 0.3);
  EXPECT_NEAR(histogram_matching_loss(Var::constant(shifted), re).value().item(), 0.5 * 0.09, 1e-15);
}

TEST(HistogramMatchingLoss, GradientMatchesFiniteDifferences) {
  const Tensor tgt = random_tensor({1, 3, 8, 8}, 11);
  const Tensor gen = random_tensor({1, 3, 8, 8}, 12);
  const Tensor re = histogram_match(tgt, gen);
  expect_gradients_match([&](const std::vector<Var>& in) { return histogram_matching_loss(in[0], re); }, {gen},
                         1e-8);
}

// --- adversarial ----------------------------------------------------------------------------------

TEST(Hinge, SatisfiedMarginsGiveZero) {
  const std::vector<Var> real{Var::constant(Tensor({2, 1, 4, 4}, 2.0)), Var::constant(Tensor({2, 1, 2, 2}, 2.0))};
  const std::vector<Var> fake{Var::constant(Tensor({2, 1, 4, 4}, -2.0)), Var::constant(Tensor({2, 1, 2, 2}, -2.0))};
  EXPECT_EQ(discriminator_hinge_loss(real, fake).value().item(), 0.0);
}

TEST(Hinge, ZeroFakeLogitsGiveZeroGeneratorLoss) {
  const std::vector<Var> fake{Var::constant(Tensor({2, 1, 4, 4})), Var::constant(Tensor({2, 1, 2, 2}))};
  EXPECT_EQ(generator_hinge_loss(fake).value().item(), 0.0);
}

TEST(Hinge, TwoPatchHandCase) {
  const std::vector<Var> real{Var::constant(Tensor({1, 1, 1, 2}, {0.5, 1.5}))};
  const std::vector<Var> fake{Var::constant(Tensor({1, 1, 1, 2}, {-0.5, -1.5}))};
  EXPECT_DOUBLE_EQ(discriminator_hinge_loss(real, fake).value().item(), 0.5);
  EXPECT_DOUBLE_EQ(generator_hinge_loss(fake).value().item(), 1.0);
}

TEST(Hinge, AveragesOverScales) {
  const std::vector<Var> real{Var::constant(Tensor({1, 1, 2, 2}, 0.0)), Var::constant(Tensor({1, 1, 1, 1}, 2.0))};
  const std::vector<Var> fake{Var::constant(Tensor({1, 1, 2, 2}, 0.0)), Var::constant(Tensor({1, 1, 1, 1}, -3.0))};
  // Scale 0: 1 + 1, scale 1: 0 + 0.
  EXPECT_DOUBLE_EQ(discriminator_hinge_loss(real, fake).value().item(), 1.0);
  EXPECT_DOUBLE_EQ(generator_hinge_loss(fake).value().item(), 1.5);
  EXPECT_THROW(discriminator_hinge_loss(real, std::span<const Var>(fake).first(1)), std::invalid_argument);
}

TEST(Hinge, GradientsMatchFiniteDifferences) {
  // Keep logits away from the hinge kinks at +-1.
  Tensor r = random_tensor({2, 1, 3, 3}, 1, -0.9, 0.9), f = random_tensor({2, 1, 3, 3}, 2, -0.9, 0.9);
  r[0] = 1.5;
  f[1] = -1.5;
  expect_gradients_match(
      [](const std::vector<Var>& in) {
        const std::vector<Var> real{in[0]}, fake{in[1]};
        return ops::add(discriminator_hinge_loss(real, fake), generator_hinge_loss(fake));
      },
      {r, f}, 1e-8);
}

TEST(FeatureMatching, IsMeanAbsoluteDifferenceAveragedOverScales) {
  const std::vector<std::vector<Var>> real{{Var::constant(Tensor({1, 1, 1, 2}, {0.0, 1.0}))},
                                           {Var::constant(Tensor({1, 1, 1, 1}, 2.0))}};
  const std::vector<std::vector<Var>> fake{{Var::constant(Tensor({1, 1, 1, 2}, {0.5, 0.0}))},
                                           {Var::constant(Tensor({1, 1, 1, 1}, 2.0))}};
  // Scale 0: (0.5 + 1) / 2, scale 1: 0.
  EXPECT_DOUBLE_EQ(feature_matching_loss(real, fake).value().item(), 0.375);
  EXPECT_EQ(feature_matching_loss(real, real).value().item(), 0.0);
}

TEST(FeatureMatching, GradientReachesFakeFeaturesOnly) {
  const Var real = Var::parameter(random_tensor({1, 2, 3, 3}, 1));
  const Var fake = Var::parameter(random_tensor({1, 2, 3, 3}, 2));
  backward(feature_matching_loss({{real}}, {{fake}}));
  EXPECT_FALSE(real.has_grad());
  const Tensor g = fake.grad();
  for (std::size_t i = 0; i < g.size(); ++i)
    EXPECT_DOUBLE_EQ(g[i], (fake.value()[i] > real.value()[i] ? 1.0 : -1.0) / 18.0);
}
