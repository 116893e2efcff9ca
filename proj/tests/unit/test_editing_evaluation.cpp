#include <gtest/gtest.h>

#include <filesystem>
#include <numbers>

#include "facectl/evaluation.hpp"
#include "facectl/image_io.hpp"
#include "test_support.hpp"
#include "tiny_world.hpp"

using namespace facectl;
namespace ft = facectl::testing;

namespace {

namespace fs = std::filesystem;

constexpr double kDeg = std::numbers::pi / 180.0;

struct Fixture {
  ft::TinyWorld world{32};
  ModelBundle model;

  Fixture() {
    const fs::path dir = fs::temp_directory_path() / "facectl_test_editing";
    fs::create_directories(dir);
    Trainer t(world.config, world.basis, world.corpus, world.stand_ins);
    t.train_step();
    t.train_step();
    t.save_checkpoint((dir / "model.fcar").string());
    model = ModelBundle::load((dir / "model.fcar").string());
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

const CorpusSample& sample(int i) { return fixture().world.corpus.samples[i]; }

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("facectl_test_editing_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double region_area(const FaceRecord& r, int region) {
  const int P = r.image_size() * r.image_size();
  double a = 0.0;
  for (int p = 0; p < P; ++p) a += r.region_map[static_cast<std::size_t>(region) * P + p];
  return a;
}

// Index of a corpus sample that shows every region.
int sample_with_all_regions() {
  const auto& samples = fixture().world.corpus.samples;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    bool all = true;
    for (int n = 0; n < static_cast<int>(region_names().size()); ++n) all = all && region_area(samples[i], n) > 0.0;
    if (all) return static_cast<int>(i);
  }
  return -1;
}

// Generator output with every style row taken from `reference`.
Tensor wholesale_oracle(const FaceRecord& target, const FaceRecord& reference) {
  ModelBundle& m = fixture().model;
  const SwapPair pair = make_swap(target, target, 0u);
  SwapBatch batch = assemble_swap_batch(m.basis, std::span(&pair, 1), m.stand_ins.identity);
  const int S = reference.image_size(), N = reference.region_map.dim(0);
  const Var styles = m.encode_styles(reference.image.reshaped({1, 3, S, S}), reference.region_map.reshaped({1, N, S, S}));
  return m.generate(batch, styles).reshaped({3, S, S});
}

}  // namespace

// --- sidecars and inputs ---------------------------------------------------------------------------

TEST(Sidecars, PathsSitNextToTheImage) {
  EXPECT_EQ(sidecar_path("/a/b/face.png", ".coeffs.json"), "/a/b/face.coeffs.json");
  EXPECT_EQ(sidecar_path("face.png", ".seg.png"), "face.seg.png");
}

TEST(Sidecars, CoefficientsRoundTripExactlyAndAreChecked) {
  const MorphableBasis& basis = fixture().world.basis;
  const FaceCoefficients& c = sample(3).coefficients;
  EXPECT_EQ(coefficients_from_json(coefficients_to_json(c), basis), c);
  FaceCoefficients short_rho = c;
  short_rho.rho.conservativeResize(c.rho.size() - 1);
  try {
    coefficients_from_json(coefficients_to_json(short_rho), basis);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("'rho'"), std::string::npos);
  }
  EXPECT_THROW(coefficients_from_json("{not json", basis), std::invalid_argument);
  EXPECT_THROW(coefficients_from_json(R"({"alpha": []})", basis), std::invalid_argument);
  const Eigen::MatrixX2d lm = sample(1).landmarks;
  EXPECT_EQ(landmarks_from_json(landmarks_to_json(lm)), lm);
}

TEST(FaceInput, SaveLoadKeepsCoefficientsLayoutAndPixels) {
  const fs::path dir = fresh_dir("io");
  const CorpusSample& s = sample(2);
  const std::string png = (dir / "face.png").string();
  save_face(png, s);
  const LoadedFace f = load_face(png, fixture().world.basis);
  EXPECT_FALSE(f.fitted);
  EXPECT_EQ(f.record.coefficients, s.coefficients);
  EXPECT_EQ(f.record.region_map, s.region_map);
  EXPECT_EQ(f.record.face_mask, s.face_mask);
  EXPECT_LE(max_abs_diff(f.record.image, s.image), 1.0 / 255.0 + 1e-12);
  EXPECT_TRUE(f.record.landmarks.isApprox(s.landmarks));
}

TEST(FaceInput, MissingCoefficientsAndLandmarksNameTheNeededFiles) {
  const fs::path dir = fresh_dir("bare");
  const std::string png = (dir / "photo.png").string();
  write_png(png, sample(0).image);
  try {
    load_face(png, fixture().world.basis);
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("photo.coeffs.json"), std::string::npos) << msg;
    EXPECT_NE(msg.find("photo.landmarks.json"), std::string::npos) << msg;
  }
}

TEST(FaceInput, LandmarksAloneAreFittedAndLabelsAreUsed) {
  const fs::path dir = fresh_dir("fit");
  const CorpusSample& s = sample(5);
  const std::string png = (dir / "photo.png").string();
  save_face(png, s);
  fs::remove(dir / "photo.coeffs.json");
  const LoadedFace f = load_face(png, fixture().world.basis);
  EXPECT_TRUE(f.fitted);
  EXPECT_TRUE(f.fit.converged);
  EXPECT_LT(pose_distance_deg(f.record.coefficients, s.coefficients), 2.0);
  EXPECT_EQ(f.record.region_map, s.region_map);  // from the label image, not the fitted render
  fs::remove(dir / "photo.seg.png");
  const LoadedFace g = load_face(png, fixture().world.basis);
  EXPECT_EQ(g.record.region_map, render_face(fixture().world.basis, g.record.coefficients, 32).region_map);
}

// --- swap ----------------------------------------------------------------------------------------

TEST(Swap, IsDeterministicAndRemapsOnlyTheRequestedAttributes) {
  ModelBundle& m = fixture().model;
  const SwapResult a = swap_face(m, sample(0), sample(6), kIdentity);
  const SwapResult b = swap_face(m, sample(0), sample(6), kIdentity);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.image.shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(a.coefficients.alpha, sample(0).coefficients.alpha);
  EXPECT_EQ(a.coefficients.rho, sample(6).coefficients.rho);
  EXPECT_EQ(a.coefficients.theta, sample(6).coefficients.theta);
  EXPECT_TRUE(a.image.all_finite());
}

TEST(Swap, SelfSwapOfEveryAttributeIsTheReconstructionPath) {
  ModelBundle& m = fixture().model;
  const SwapResult all = swap_face(m, sample(4), sample(4), kAllAttributes);
  const SwapResult none = swap_face(m, sample(4), sample(4), 0u);
  EXPECT_EQ(all.coefficients, sample(4).coefficients);
  EXPECT_EQ(all.image, none.image);
}

TEST(Swap, RejectsInputsOfTheWrongSize) {
  const ft::TinyWorld small(16);
  EXPECT_THROW(swap_face(fixture().model, small.corpus.samples[0], sample(0), kIdentity), std::invalid_argument);
}

// --- interpolation ----------------------------------------------------------------------------------

TEST(Interpolate, TwoStepsReproduceTheEndpointSwaps) {
  ModelBundle& m = fixture().model;
  const CorpusSample &s = sample(1), &t = sample(9);
  const auto frames = interpolate_faces(m, s, t, kExpression, 2);
  ASSERT_EQ(frames.size(), 2u);
  EXPECT_EQ(frames[0], swap_face(m, s, t, kIdentity).image);
  EXPECT_EQ(frames[1], swap_face(m, s, t, kIdentity | kExpression).image);

  const auto id_frames = interpolate_faces(m, s, t, kIdentity, 3);
  ASSERT_EQ(id_frames.size(), 3u);
  EXPECT_EQ(id_frames[0], swap_face(m, t, t, 0u).image);
  EXPECT_EQ(id_frames[2], swap_face(m, s, t, kIdentity).image);
  EXPECT_NE(id_frames[1], id_frames[0]);
}

TEST(Interpolate, EqualExpressionsGiveIdenticalFrames) {
  ModelBundle& m = fixture().model;
  CorpusSample s = sample(2);
  s.coefficients.rho = sample(7).coefficients.rho;
  const auto frames = interpolate_faces(m, s, sample(7), kExpression, 4);
  for (const Tensor& f : frames) EXPECT_EQ(f, frames[0]);
}

TEST(Interpolate, RejectsBadRequests) {
  ModelBundle& m = fixture().model;
  EXPECT_THROW(interpolate_faces(m, sample(0), sample(5), kPose, 1), std::invalid_argument);
  EXPECT_THROW(interpolate_faces(m, sample(0), sample(5), 0u, 3), std::invalid_argument);
}

TEST(Interpolate, BrightnessFollowsTheLightingMonotonically) {
  const MorphableBasis& basis = fixture().world.basis;
  FaceCoefficients dark = sample(0).coefficients, bright = dark;
  dark.kappa = uniform_light(0.2);
  bright.kappa = uniform_light(1.0);
  bright.kappa[1] = 0.05;  // a weak directional band on top of the DC term
  double prev = -1.0;
  for (int k = 0; k <= 8; ++k) {
    const FaceCoefficients c = interpolate_coefficients(dark, bright, k / 8.0, kIllumination);
    const Tensor img = render_face(basis, c, 32).image;
    const double mean = img.sum() / static_cast<double>(img.size());
    EXPECT_GT(mean, prev);
    prev = mean;
  }
}

// --- region editing --------------------------------------------------------------------------------

TEST(RegionEdit, StyleRowReplacementTouchesOnlyTheNamedRows) {
  const Tensor a = ft::random_tensor({2, 4, 3}, 1), b = ft::random_tensor({2, 4, 3}, 2);
  const Tensor r = replace_style_rows(a, b, {1, 3});
  for (int n = 0; n < 4; ++n)
    for (int d = 0; d < 3; ++d) {
      EXPECT_EQ(r(1, n, d), (n % 2 ? b : a)(1, n, d));
    }
  EXPECT_EQ(replace_style_rows(a, b, {}), a);
  EXPECT_EQ(replace_style_rows(a, b, {0, 1, 2, 3}), b);
  EXPECT_THROW(replace_style_rows(a, b, {4}), std::invalid_argument);
}

TEST(RegionEdit, EmptyListIsSelfReconstruction) {
  ModelBundle& m = fixture().model;
  const RegionEditResult r = edit_regions(m, sample(3), sample(8), {}, false);
  ASSERT_EQ(r.images.size(), 1u);
  EXPECT_EQ(r.images[0], swap_face(m, sample(3), sample(3), 0u).image);
}

TEST(RegionEdit, EveryRegionEqualsWholesaleReplacement) {
  const int ref = sample_with_all_regions();
  ASSERT_GE(ref, 0);
  const RegionEditResult r = edit_regions(fixture().model, sample(0), sample(ref), region_names(), false);
  EXPECT_TRUE(r.warnings.empty());
  EXPECT_EQ(r.images[0], wholesale_oracle(sample(0), sample(ref)));
}

TEST(RegionEdit, ProgressiveEditsComposeInOrder) {
  ModelBundle& m = fixture().model;
  const int ref = sample_with_all_regions();
  ASSERT_GE(ref, 0);
  const RegionEditResult prog = edit_regions(m, sample(1), sample(ref), {"eyes", "lips", "skin"}, true);
  ASSERT_EQ(prog.images.size(), 3u);
  EXPECT_EQ(prog.images[0], edit_regions(m, sample(1), sample(ref), {"eyes"}, false).images[0]);
  EXPECT_EQ(prog.images[1], edit_regions(m, sample(1), sample(ref), {"eyes", "lips"}, false).images[0]);
  EXPECT_EQ(prog.images[2], edit_regions(m, sample(1), sample(ref), {"lips", "skin", "eyes"}, false).images[0]);
}

TEST(RegionEdit, MissingReferenceRegionWarnsAndIsSkipped) {
  ModelBundle& m = fixture().model;
  CorpusSample ref = sample(4);
  const int lips = region_index("lips"), skin = region_index("skin");
  const int P = 32 * 32;
  for (int p = 0; p < P; ++p) {
    ref.region_map[static_cast<std::size_t>(skin) * P + p] += ref.region_map[static_cast<std::size_t>(lips) * P + p];
    ref.region_map[static_cast<std::size_t>(lips) * P + p] = 0.0;
  }
  const RegionEditResult r = edit_regions(m, sample(0), ref, {"lips", "eyes"}, false);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("lips"), std::string::npos);
  EXPECT_EQ(r.applied, std::vector<int>{region_index("eyes")});
  EXPECT_EQ(r.images[0], edit_regions(m, sample(0), ref, {"eyes"}, false).images[0]);
  EXPECT_THROW(edit_regions(m, sample(0), ref, {"ears"}, false), std::invalid_argument);
}

// --- evaluation --------------------------------------------------------------------------------------

TEST(Retrieval, GalleryAgainstItselfIsPerfect) {
  const Tensor g = ft::random_tensor({6, 5}, 3);
  const std::vector<int> labels{0, 1, 2, 3, 4, 5};
  EXPECT_EQ(identity_retrieval_accuracy(g, labels, g), 1.0);
}

TEST(Retrieval, RandomEmbeddingsScoreAtChance) {
  const int G = 5, M = 4000;
  const Tensor gallery = ft::random_tensor({G, 8}, 4);
  const Tensor probes = ft::random_tensor({M, 8}, 5);
  std::mt19937_64 rng(6);
  std::vector<int> labels(M);
  for (int& l : labels) l = std::uniform_int_distribution<int>(0, G - 1)(rng);
  EXPECT_NEAR(identity_retrieval_accuracy(probes, labels, gallery), 1.0 / G, 0.03);
  EXPECT_THROW(identity_retrieval_accuracy(probes, std::span(labels).subspan(1), gallery), std::invalid_argument);
}

TEST(PoseDistance, MeasuresDegreesAndWraps) {
  FaceCoefficients a = sample(0).coefficients, b = a;
  b.theta[1] += 15.0 * kDeg;
  EXPECT_NEAR(pose_distance_deg(a, b), 15.0, 1e-9);
  a.theta[0] = 350.0 * kDeg;
  b.theta = a.theta;
  b.theta[0] = 10.0 * kDeg;
  EXPECT_NEAR(pose_distance_deg(a, b), 20.0, 1e-9);
  b.theta[3] += 1.0;  // translation does not count
  EXPECT_NEAR(pose_distance_deg(a, b), 20.0, 1e-9);
}

class AttributeErrorTest : public ::testing::Test {
 protected:
  const MorphableBasis& basis = fixture().world.basis;
  FitOptions fit;
  // Exact landmarks of whatever coefficients were last rendered.
  FaceCoefficients shown;
  LandmarkEstimator estimator = [this](const Tensor&) { return project_landmarks(basis, shown, 32); };
  AttributeErrorTest() { fit.image_size = 32; }

  AttributeError measure(const FaceCoefficients& rendered, const FaceCoefficients& reference) {
    shown = rendered;
    return attribute_error(render_face(basis, rendered, 32).image, reference, basis, estimator, fit);
  }
};

TEST_F(AttributeErrorTest, MatchingRenderSitsAtTheNoiseFloor) {
  double floor = 0.0;
  for (int i = 0; i < 6; ++i) floor = std::max(floor, measure(sample(i).coefficients, sample(i).coefficients).pose_deg);
  EXPECT_LT(floor, 1.0);
}

TEST_F(AttributeErrorTest, RotatedRenderReportsTheRotation) {
  for (int i = 0; i < 4; ++i) {
    FaceCoefficients rotated = sample(i).coefficients;
    rotated.theta[1] += 15.0 * kDeg;
    const AttributeError e = measure(rotated, sample(i).coefficients);
    ASSERT_FALSE(e.excluded);
    EXPECT_NEAR(e.pose_deg, 15.0, 3.0);
  }
}

TEST_F(AttributeErrorTest, SharedExpressionScoresBelowCrossExpression) {
  double same = 0.0, cross = 0.0;
  for (int i = 0; i < 6; ++i) {
    const FaceCoefficients& ref = sample(i).coefficients;
    FaceCoefficients keep = sample((i + 5) % 12).coefficients, other = keep;
    keep.rho = ref.rho;
    same += measure(keep, ref).expression;
    cross += measure(other, ref).expression;
  }
  EXPECT_LT(same, cross);
}

TEST_F(AttributeErrorTest, UnreliableFitsAreExcluded) {
  LandmarkEstimator scattered = [](const Tensor&) {
    Eigen::MatrixX2d lm(68, 2);
    std::mt19937_64 rng(1);
    for (Eigen::Index k = 0; k < 68; ++k) lm.row(k) << rng() % 32, rng() % 32;
    return lm;
  };
  EXPECT_TRUE(attribute_error(sample(0).image, sample(0).coefficients, basis, scattered, fit).excluded);
}

TEST(Locality, RatioOfMeanChangesInsideAndOutside) {
  Tensor before({3, 2, 2}), after({3, 2, 2}), mask({2, 2});
  mask[0] = 1.0;
  for (int c = 0; c < 3; ++c) {
    after[c * 4 + 0] = 0.6;
    after[c * 4 + 1] = 0.1;
    after[c * 4 + 2] = 0.1;
    after[c * 4 + 3] = 0.1;
  }
  LocalityTotals t;
  t.add(before, after, mask);
  EXPECT_NEAR(t.ratio(), 6.0, 1e-12);
  EXPECT_EQ(LocalityTotals{}.ratio(), 0.0);
}

TEST(ColorDistance, MeasuresShiftsOfRegionMeans) {
  const CorpusSample& s = sample(0);
  EXPECT_EQ(region_color_distance(s.image, s.region_map, s.image, s.region_map).value(), 0.0);
  Tensor shifted = s.image;
  for (double& v : shifted.values()) v += 0.1;
  EXPECT_NEAR(region_color_distance(shifted, s.region_map, s.image, s.region_map).value(), 0.1 * std::sqrt(3.0), 1e-12);
  Tensor background_only = s.region_map;
  background_only.fill(0.0);
  const int P = 32 * 32;
  for (int p = 0; p < P; ++p) background_only[p] = 1.0;
  EXPECT_FALSE(region_color_distance(s.image, background_only, s.image, s.region_map).has_value());
}

TEST(Evaluate, ReportsFiniteDeterministicScores) {
  Fixture& f = fixture();
  EvalConfig cfg;
  cfg.pairs = 4;
  const EvalReport a = evaluate_model(f.model, f.world.corpus, cfg);
  const EvalReport b = evaluate_model(f.model, f.world.corpus, cfg);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_GE(a.identity_retrieval, 0.0);
  EXPECT_LE(a.identity_retrieval, 1.0);
  EXPECT_EQ(a.pairs, 4);
  EXPECT_EQ(a.step, 2);
  for (double v : {a.source_similarity, a.target_similarity, a.region_color_distance, a.reconstruction_l1,
                   a.baseline_l1, a.locality_ratio, a.pose_error_deg, a.expression_error})
    EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(a.reconstruction_l1, 0.0);
  cfg.edit_region = "ears";
  EXPECT_THROW(evaluate_model(f.model, f.world.corpus, cfg), std::invalid_argument);
}
