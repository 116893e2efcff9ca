#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "facectl/archive.hpp"
#include "facectl/tensor.hpp"

namespace facectl {

// V x 3 row-major, so data() is the flat 3v + k layout used by the bases.
using VertexArray = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Triangle = std::array<int, 3>;

inline constexpr int kShCoefficients = 27;
inline constexpr int kPoseParameters = 6;

struct FaceCoefficients {
  Eigen::VectorXd alpha;  // identity
  Eigen::VectorXd rho;    // expression
  Eigen::VectorXd delta;  // texture
  Eigen::VectorXd kappa;  // 9 SH bands per color channel, index 9c + b
  Eigen::VectorXd theta;  // rx, ry, rz (radians), tx, ty, tz (model units)

  static FaceCoefficients zeros(int d_id, int d_exp, int d_tex);
  bool all_finite() const;
  bool operator==(const FaceCoefficients& o) const;
};

// Semantic classes of the desk-scale model. Background is always class 0.
enum class Region : int { Background = 0, Skin, Hair, Brows, Eyes, Nose, Lips, Jaw };
const std::vector<std::string>& region_names();
int region_index(const std::string& name);  // throws on unknown names

struct MorphableBasis {
  VertexArray mean_shape;
  VertexArray mean_texture;  // albedo in [0, 1]
  Eigen::MatrixXd id_basis;  // 3V x d_id
  Eigen::MatrixXd exp_basis;
  Eigen::MatrixXd tex_basis;
  std::vector<Triangle> triangles;
  std::vector<int> landmark_indices;
  Eigen::VectorXd id_scales;
  Eigen::VectorXd exp_scales;
  Eigen::VectorXd tex_scales;
  std::vector<int> region_labels;
  int num_regions = 8;

  int vertex_count() const { return static_cast<int>(mean_shape.rows()); }
  int d_id() const { return static_cast<int>(id_basis.cols()); }
  int d_exp() const { return static_cast<int>(exp_basis.cols()); }
  int d_tex() const { return static_cast<int>(tex_basis.cols()); }
  int landmark_count() const { return static_cast<int>(landmark_indices.size()); }

  // Checks index ranges, dimension agreement and the rank of [id | exp] and
  // tex. Throws std::invalid_argument with the offending field.
  void validate() const;

  Archive to_archive() const;
  static MorphableBasis from_archive(const Archive& a);
};

struct BasisConfig {
  int grid = 50;  // vertices per side
  int d_id = 16;
  int d_exp = 12;
  int d_tex = 16;
  int num_regions = 8;
  int frequencies = 8;  // cosine modes per axis
  double id_std = 0.015;
  double exp_std = 0.012;
  double tex_std = 0.025;
  double decay = 0.92;  // per-component std ratio
};

MorphableBasis make_synthetic_basis(const BasisConfig& config, std::mt19937_64& rng);

void check_dimensions(const MorphableBasis& basis, const FaceCoefficients& c);

VertexArray reconstruct_shape(const MorphableBasis& basis, const FaceCoefficients& c);

struct TextureResult {
  VertexArray albedo;
  int clamped = 0;  // entries clamped into [0, 1]
};
TextureResult reconstruct_texture(const MorphableBasis& basis, const FaceCoefficients& c);

// R = Rz(rz) * Ry(ry) * Rx(rx).
Eigen::Matrix3d rotation_matrix(double rx, double ry, double rz);
// dR/drx, dR/dry, dR/drz.
std::array<Eigen::Matrix3d, 3> rotation_derivatives(double rx, double ry, double rz);
VertexArray apply_pose(const VertexArray& vertices, const Eigen::VectorXd& theta);

struct NormalsResult {
  VertexArray normals;
  int warnings = 0;  // vertices with no non-degenerate neighbour
};
NormalsResult compute_vertex_normals(const VertexArray& vertices, const std::vector<Triangle>& triangles);

// Real SH basis constants (first three bands).
inline constexpr std::array<double, 9> kShConstants = {0.282095, 0.488603, 0.488603, 0.488603, 1.092548,
                                                        1.092548, 0.315392, 1.092548, 0.546274};
std::array<double, 9> sh_basis(const Eigen::Vector3d& n);
VertexArray sh_shade(const VertexArray& normals, const VertexArray& albedo, const Eigen::VectorXd& kappa);
// d(colors)/d(kappa): 3V x 27, zero rows where the output is clamped.
Eigen::MatrixXd sh_shade_kappa_jacobian(const VertexArray& normals, const VertexArray& albedo,
                                        const Eigen::VectorXd& kappa);

// Orthographic camera: x right, y up, z toward the viewer.
inline constexpr double kCameraScale = 0.38;  // pixels per model unit, as a fraction of image size
Eigen::Vector2d project_point(const Eigen::Vector3d& p, int image_size);

struct RenderedFace {
  Tensor image;       // 3 x H x W in [0, 1], zero off the face
  Tensor face_mask;   // H x W in {0, 1}
  Tensor region_map;  // N x H x W one-hot
  Tensor depth;       // H x W, -inf where uncovered
  std::vector<int> labels;  // H x W class indices
  int warnings = 0;
};
RenderedFace rasterize(const VertexArray& vertices, const VertexArray& colors, const MorphableBasis& basis,
                       int image_size);
// reconstruct -> pose -> normals -> shade -> rasterize.
RenderedFace render_face(const MorphableBasis& basis, const FaceCoefficients& c, int image_size);

// K x 2 pixel coordinates (x right, y down).
Eigen::MatrixX2d project_landmarks(const MorphableBasis& basis, const FaceCoefficients& c, int image_size);
// d(landmarks)/d(alpha, rho, theta) as a 2K x (d_id + d_exp + 6) matrix,
// rows ordered x0, y0, x1, y1, ...
Eigen::MatrixXd landmark_jacobian(const MorphableBasis& basis, const FaceCoefficients& c, int image_size);
// Eye centres (means of the two 6-point eye contours), nose tip, mouth corners.
Eigen::Matrix<double, 5, 2> five_point_landmarks(const Eigen::MatrixX2d& landmarks68);

enum Attribute : unsigned {
  kIdentity = 1u << 0,
  kExpression = 1u << 1,
  kTexture = 1u << 2,
  kIllumination = 1u << 3,
  kPose = 1u << 4,
};
using AttributeSet = unsigned;
inline constexpr AttributeSet kAllAttributes = kIdentity | kExpression | kTexture | kIllumination | kPose;
AttributeSet parse_attributes(const std::string& comma_separated);  // throws with the valid list
std::string attribute_list_string(AttributeSet set);

FaceCoefficients remap_coefficients(const FaceCoefficients& source, const FaceCoefficients& target,
                                    AttributeSet attributes);
FaceCoefficients interpolate_coefficients(const FaceCoefficients& a, const FaceCoefficients& b, double t,
                                          AttributeSet attributes);

struct FitOptions {
  int image_size = 64;
  double id_weight = 1e-2;   // on ||alpha / scale||^2
  double exp_weight = 1e-2;  // on ||rho / scale||^2
  double tz_weight = 1.0;    // depth translation is not observable
  int max_iterations = 100;
  double quality_threshold_px = 1.0;  // mean reprojection error
};
struct FitResult {
  FaceCoefficients coefficients;
  double mean_error_px = 0.0;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;  // quality flag: false means do not trust the result
};
FitResult fit_coefficients(const Eigen::MatrixX2d& landmarks, const MorphableBasis& basis, const FitOptions& options);

struct PoseRanges {
  double rx_deg = 15.0;
  double ry_deg = 30.0;
  double rz_deg = 10.0;
  double translation = 0.08;
};
FaceCoefficients sample_random_face(const MorphableBasis& basis, std::mt19937_64& rng, const PoseRanges& ranges = {});
// Uniform white light with the given DC intensity per channel.
Eigen::VectorXd uniform_light(double intensity);

// Coefficients as a flat vector (alpha/s, rho/s, kappa, delta/s, theta) for
// the generator's vector conditioning path.
Eigen::VectorXd conditioning_vector(const MorphableBasis& basis, const FaceCoefficients& c);
int conditioning_size(const MorphableBasis& basis);

Archive coefficients_to_archive(const FaceCoefficients& c);
FaceCoefficients coefficients_from_archive(const Archive& a);

}  // namespace facectl
