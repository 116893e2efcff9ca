#include "facectl/morphable_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

namespace facectl {

namespace {

using std::numbers::pi;

double gauss2(double x, double y, double cx, double cy, double sx, double sy) {
  const double dx = (x - cx) / sx, dy = (y - cy) / sy;
  return std::exp(-0.5 * (dx * dx + dy * dy));
}

bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  const double dx = (x - cx) / rx, dy = (y - cy) / ry;
  return dx * dx + dy * dy <= 1.0;
}

// Canonical face layout in model units (x right, y up).
constexpr double kEyeX = 0.30, kEyeY = 0.22;
constexpr double kBrowY = 0.40;
constexpr double kMouthY = -0.45, kMouthHalfWidth = 0.22;
constexpr double kHairLine = 0.62, kJawLine = -0.62;

Region classify(double X, double Y) {
  for (double s : {-1.0, 1.0}) {
    if (in_ellipse(X, Y, s * kEyeX, kEyeY, 0.13, 0.065)) return Region::Eyes;
    if (in_ellipse(X, Y, s * kEyeX, kBrowY, 0.16, 0.045)) return Region::Brows;
  }
  if (in_ellipse(X, Y, 0.0, kMouthY, kMouthHalfWidth, 0.09)) return Region::Lips;
  if (in_ellipse(X, Y, 0.0, -0.05, 0.10, 0.20)) return Region::Nose;
  if (Y > kHairLine) return Region::Hair;
  if (Y < kJawLine) return Region::Jaw;
  return Region::Skin;
}

Eigen::Vector3d region_albedo(Region r, double X, double Y) {
  switch (r) {
    case Region::Hair: return {0.25, 0.18, 0.12};
    case Region::Brows: return {0.30, 0.22, 0.15};
    case Region::Eyes: {
      const double dx = std::abs(X) - kEyeX, dy = Y - kEyeY;
      if (dx * dx + dy * dy < 0.05 * 0.05) return {0.15, 0.12, 0.10};
      return {0.90, 0.90, 0.92};
    }
    case Region::Nose: return {0.82, 0.60, 0.50};
    case Region::Lips: return {0.75, 0.30, 0.32};
    case Region::Jaw: return {0.76, 0.57, 0.47};
    default: return {0.80, 0.60, 0.50};
  }
}

double face_height(double X, double Y, double xd, double yd) {
  const double r2 = xd * xd + yd * yd;
  double z = 0.45 * std::sqrt(std::max(0.0, 1.0 - 0.85 * r2));
  z += 0.20 * gauss2(X, Y, 0.0, -0.05, 0.07, 0.16);
  z += 0.06 * gauss2(X, Y, 0.0, -0.15, 0.06, 0.05);
  z -= 0.06 * (gauss2(X, Y, -kEyeX, kEyeY, 0.12, 0.07) + gauss2(X, Y, kEyeX, kEyeY, 0.12, 0.07));
  z += 0.03 * (gauss2(X, Y, -kEyeX, kBrowY, 0.14, 0.04) + gauss2(X, Y, kEyeX, kBrowY, 0.14, 0.04));
  z += 0.035 * gauss2(X, Y, 0.0, kMouthY, 0.18, 0.07);
  z += 0.03 * gauss2(X, Y, 0.0, -0.80, 0.25, 0.10);
  return z;
}

// Where expression fields are allowed to move the surface.
double expression_mask(double X, double Y) {
  double m = 1.2 * gauss2(X, Y, 0.0, kMouthY, 0.28, 0.18);
  for (double s : {-1.0, 1.0}) {
    m += gauss2(X, Y, s * kEyeX, kEyeY, 0.16, 0.10);
    m += gauss2(X, Y, s * kEyeX, kBrowY, 0.18, 0.08);
  }
  m += 0.8 * gauss2(X, Y, 0.0, -0.85, 0.35, 0.15);
  return std::min(m, 1.0);
}

// iBUG-style 68-point layout in canonical model coordinates.
std::vector<Eigen::Vector2d> canonical_landmarks() {
  std::vector<Eigen::Vector2d> pts;
  for (int i = 0; i <= 16; ++i) {
    const double phi = pi + pi * i / 16.0;
    pts.emplace_back(0.78 * 0.93 * std::cos(phi), 0.93 * std::sin(phi));
  }
  // Brows run left to right across the image: -0.46 .. -0.14, then 0.14 .. 0.46.
  for (double start : {-0.46, 0.14}) {
    for (int i = 0; i < 5; ++i) {
      const double x = start + 0.08 * i;
      const double u = (std::abs(x) - kEyeX) / 0.16;
      pts.emplace_back(x, kBrowY + 0.03 * (1.0 - u * u));
    }
  }
  for (double y : {0.18, 0.07, -0.04, -0.15}) pts.emplace_back(0.0, y);
  for (double x : {-0.09, -0.045, 0.0, 0.045, 0.09}) pts.emplace_back(x, -0.22);
  const double eye_angles[6] = {180, 120, 60, 0, -60, -120};
  for (double s : {-1.0, 1.0})
    for (double a : eye_angles) {
      const double r = a * pi / 180.0;
      pts.emplace_back(s * kEyeX + 0.12 * std::cos(r), kEyeY + 0.05 * std::sin(r));
    }
  for (int i = 0; i < 12; ++i) {
    const double r = (180.0 - 30.0 * i) * pi / 180.0;
    pts.emplace_back(kMouthHalfWidth * std::cos(r), kMouthY + 0.09 * std::sin(r));
  }
  for (int i = 0; i < 8; ++i) {
    const double r = (180.0 - 45.0 * i) * pi / 180.0;
    pts.emplace_back(0.14 * std::cos(r), kMouthY + 0.035 * std::sin(r));
  }
  return pts;
}

// Modified Gram-Schmidt with one re-orthogonalization pass. Columns of `q`
// before `begin` are already orthonormal.
void orthonormalize(Eigen::MatrixXd& q, int begin, const char* what) {
  for (int j = begin; j < q.cols(); ++j) {
    const double before = q.col(j).norm();
    for (int pass = 0; pass < 2; ++pass)
      for (int i = 0; i < j; ++i) q.col(j) -= q.col(i).dot(q.col(j)) * q.col(i);
    const double after = q.col(j).norm();
    if (!(after > 1e-8 * before)) {
      throw std::invalid_argument(std::string("synthetic ") + what + " basis is rank deficient at column " +
                                  std::to_string(j));
    }
    q.col(j) /= after;
  }
}

double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

template <typename M>
void round_to_f32(M& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = round_f32(m.data()[i]);
}

Tensor matrix_to_tensor_v3d(const Eigen::MatrixXd& b, int V) {
  const int d = static_cast<int>(b.cols());
  Tensor t({V, 3, d});
  for (int r = 0; r < 3 * V; ++r)
    for (int j = 0; j < d; ++j) t[static_cast<std::size_t>(r) * d + j] = b(r, j);
  return t;
}

Eigen::MatrixXd tensor_to_matrix_v3d(const Tensor& t, const char* name) {
  if (t.rank() != 3 || t.dim(1) != 3) throw ArchiveError(std::string(name) + " must have shape V x 3 x d");
  const int V = t.dim(0), d = t.dim(2);
  Eigen::MatrixXd b(3 * V, d);
  for (int r = 0; r < 3 * V; ++r)
    for (int j = 0; j < d; ++j) b(r, j) = t[static_cast<std::size_t>(r) * d + j];
  return b;
}

Tensor vertices_to_tensor(const VertexArray& v) {
  return Tensor({static_cast<int>(v.rows()), 3}, std::vector<double>(v.data(), v.data() + v.size()));
}

VertexArray tensor_to_vertices(const Tensor& t, const char* name) {
  if (t.rank() != 2 || t.dim(1) != 3) throw ArchiveError(std::string(name) + " must have shape V x 3");
  VertexArray v(t.dim(0), 3);
  std::copy(t.data(), t.data() + t.size(), v.data());
  return v;
}

Tensor vector_to_tensor(const Eigen::VectorXd& v) {
  return Tensor({static_cast<int>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
}

Eigen::VectorXd tensor_to_vector(const Tensor& t) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(t.size()));
  for (std::size_t i = 0; i < t.size(); ++i) v[static_cast<Eigen::Index>(i)] = t[i];
  return v;
}

void require_length(const Eigen::VectorXd& v, Eigen::Index n, const char* field) {
  if (v.size() != n) {
    throw std::invalid_argument(std::string("coefficient field '") + field + "' has length " + std::to_string(v.size()) +
                                ", basis expects " + std::to_string(n));
  }
}

double wrap_angle(double d) {
  // Into (-pi, pi].
  d = std::remainder(d, 2.0 * pi);
  if (d <= -pi) d += 2.0 * pi;
  return d;
}

}  // namespace

// --- coefficients ------------------------------------------------------------

FaceCoefficients FaceCoefficients::zeros(int d_id, int d_exp, int d_tex) {
  return {Eigen::VectorXd::Zero(d_id), Eigen::VectorXd::Zero(d_exp), Eigen::VectorXd::Zero(d_tex),
          Eigen::VectorXd::Zero(kShCoefficients), Eigen::VectorXd::Zero(kPoseParameters)};
}

bool FaceCoefficients::all_finite() const {
  return alpha.allFinite() && rho.allFinite() && delta.allFinite() && kappa.allFinite() && theta.allFinite();
}

bool FaceCoefficients::operator==(const FaceCoefficients& o) const {
  auto same = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return a.size() == b.size() && a == b; };
  return same(alpha, o.alpha) && same(rho, o.rho) && same(delta, o.delta) && same(kappa, o.kappa) &&
         same(theta, o.theta);
}

const std::vector<std::string>& region_names() {
  static const std::vector<std::string> names = {"background", "skin", "hair", "brows",
                                                 "eyes",       "nose", "lips", "jaw"};
  return names;
}

int region_index(const std::string& name) {
  const auto& names = region_names();
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) {
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown region '" + name + "' (valid: " + valid + ")");
  }
  return static_cast<int>(it - names.begin());
}

// --- basis -------------------------------------------------------------------

void MorphableBasis::validate() const {
  const int V = vertex_count();
  auto fail = [](const std::string& m) { throw std::invalid_argument("invalid morphable basis: " + m); };
  if (V == 0) fail("no vertices");
  if (mean_texture.rows() != V) fail("mean_texture has " + std::to_string(mean_texture.rows()) + " rows, expected " + std::to_string(V));
  if (id_basis.rows() != 3 * V) fail("id_basis row count");
  if (exp_basis.rows() != 3 * V) fail("exp_basis row count");
  if (tex_basis.rows() != 3 * V) fail("tex_basis row count");
  if (id_scales.size() != d_id()) fail("id scales length");
  if (exp_scales.size() != d_exp()) fail("exp scales length");
  if (tex_scales.size() != d_tex()) fail("tex scales length");
  if (static_cast<int>(region_labels.size()) != V) fail("region_labels length");
  for (const auto& t : triangles)
    for (int i : t)
      if (i < 0 || i >= V) fail("triangle index " + std::to_string(i) + " out of range");
  for (int i : landmark_indices)
    if (i < 0 || i >= V) fail("landmark index " + std::to_string(i) + " out of range");
  for (int r : region_labels)
    if (r < 0 || r >= num_regions) fail("region label " + std::to_string(r) + " out of range");
  Eigen::MatrixXd shape_stack(3 * V, d_id() + d_exp());
  shape_stack << id_basis, exp_basis;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(shape_stack);
  qr.setThreshold(1e-8);
  if (qr.rank() != shape_stack.cols()) fail("identity/expression columns are linearly dependent");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qt(tex_basis);
  qt.setThreshold(1e-8);
  if (qt.rank() != tex_basis.cols()) fail("texture columns are linearly dependent");
}

MorphableBasis make_synthetic_basis(const BasisConfig& cfg, std::mt19937_64& rng) {
  if (cfg.grid < 8) throw std::invalid_argument("basis grid must be at least 8");
  if (cfg.num_regions != static_cast<int>(region_names().size())) {
    throw std::invalid_argument("synthetic basis supports exactly " + std::to_string(region_names().size()) + " regions");
  }
  const int F = cfg.frequencies;
  const int dof = 3 * F * F;
  if (cfg.d_id <= 0 || cfg.d_exp <= 0 || cfg.d_tex <= 0) throw std::invalid_argument("basis dimensions must be positive");
  if (cfg.d_id + cfg.d_exp > dof) {
    throw std::invalid_argument("d_id + d_exp = " + std::to_string(cfg.d_id + cfg.d_exp) +
                                " exceeds the " + std::to_string(dof) + " available shape degrees of freedom");
  }
  if (cfg.d_tex > dof) {
    throw std::invalid_argument("d_tex = " + std::to_string(cfg.d_tex) + " exceeds the " + std::to_string(dof) +
                                " available texture degrees of freedom");
  }

  const int R = cfg.grid;
  const int V = R * R;
  MorphableBasis b;
  b.num_regions = cfg.num_regions;
  b.mean_shape.resize(V, 3);
  b.mean_texture.resize(V, 3);
  b.region_labels.resize(V);
  std::vector<double> us(V), vs(V);
  for (int iy = 0; iy < R; ++iy) {
    for (int ix = 0; ix < R; ++ix) {
      const int k = iy * R + ix;
      const double u = -1.0 + 2.0 * ix / (R - 1), v = -1.0 + 2.0 * iy / (R - 1);
      const double xd = u * std::sqrt(1.0 - 0.5 * v * v), yd = v * std::sqrt(1.0 - 0.5 * u * u);
      const double X = 0.78 * xd, Y = yd;
      us[k] = u;
      vs[k] = v;
      b.mean_shape.row(k) << X, Y, face_height(X, Y, xd, yd);
      const Region r = classify(X, Y);
      b.region_labels[k] = static_cast<int>(r);
      b.mean_texture.row(k) = region_albedo(r, X, Y).transpose();
    }
  }
  for (int iy = 0; iy + 1 < R; ++iy) {
    for (int ix = 0; ix + 1 < R; ++ix) {
      const int a = iy * R + ix, bb = a + 1, c = a + R + 1, d = a + R;
      b.triangles.push_back({a, bb, c});
      b.triangles.push_back({a, c, d});
    }
  }

  // Landmarks: nearest unused vertex to each canonical position.
  std::set<int> used;
  for (const auto& p : canonical_landmarks()) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < V; ++k) {
      if (used.count(k)) continue;
      const double dx = b.mean_shape(k, 0) - p.x(), dy = b.mean_shape(k, 1) - p.y();
      const double d = dx * dx + dy * dy;
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    used.insert(best);
    b.landmark_indices.push_back(best);
  }

  // Cosine modes over the parametric grid.
  Eigen::MatrixXd modes(V, F * F);
  for (int k = 0; k < V; ++k)
    for (int p = 0; p < F; ++p)
      for (int q = 0; q < F; ++q)
        modes(k, p * F + q) = std::cos(p * pi * (us[k] + 1.0) / 2.0) * std::cos(q * pi * (vs[k] + 1.0) / 2.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_field = [&](const Eigen::Vector3d& axis_gain) {
    Eigen::VectorXd col(3 * V);
    for (int axis = 0; axis < 3; ++axis) {
      Eigen::VectorXd w(F * F);
      for (int p = 0; p < F; ++p)
        for (int q = 0; q < F; ++q) w[p * F + q] = normal(rng) / std::pow(1.0 + p + q, 2.0);
      const Eigen::VectorXd f = modes * w * axis_gain[axis];
      for (int k = 0; k < V; ++k) col[3 * k + axis] = f[k];
    }
    return col;
  };

  Eigen::MatrixXd shape(3 * V, cfg.d_id + cfg.d_exp);
  for (int j = 0; j < cfg.d_id; ++j) shape.col(j) = random_field({0.6, 0.6, 1.0});
  for (int j = 0; j < cfg.d_exp; ++j) {
    Eigen::VectorXd f = random_field({0.8, 1.0, 0.6});
    for (int k = 0; k < V; ++k) f.segment<3>(3 * k) *= expression_mask(b.mean_shape(k, 0), b.mean_shape(k, 1));
    shape.col(cfg.d_id + j) = f;
  }
  orthonormalize(shape, 0, "shape");
  Eigen::MatrixXd tex(3 * V, cfg.d_tex);
  // Texture modes share one spatial field across channels with a mostly
  // neutral tint, so samples stay skin-like instead of drifting in hue.
  for (int j = 0; j < cfg.d_tex; ++j) {
    const Eigen::VectorXd f = random_field({1.0, 0.0, 0.0});
    Eigen::Vector3d tint(1.0, 1.0, 1.0);
    for (int ch = 0; ch < 3; ++ch) tint[ch] += 0.25 * normal(rng);
    for (int k = 0; k < V; ++k) tex.col(j).segment<3>(3 * k) = f[3 * k] * tint;
  }
  orthonormalize(tex, 0, "texture");

  // Unit per-entry RMS columns; the coefficient scales carry the magnitudes.
  const double unit = std::sqrt(3.0 * V);
  b.id_basis = shape.leftCols(cfg.d_id) * unit;
  b.exp_basis = shape.rightCols(cfg.d_exp) * unit;
  b.tex_basis = tex * unit;
  auto scales = [&](int d, double s) {
    Eigen::VectorXd v(d);
    for (int j = 0; j < d; ++j) v[j] = s * std::pow(cfg.decay, j);
    return v;
  };
  b.id_scales = scales(cfg.d_id, cfg.id_std);
  b.exp_scales = scales(cfg.d_exp, cfg.exp_std);
  b.tex_scales = scales(cfg.d_tex, cfg.tex_std);

  // Stored as float32 on disk; round now so a saved basis reloads exactly.
  round_to_f32(b.mean_shape);
  round_to_f32(b.mean_texture);
  round_to_f32(b.id_basis);
  round_to_f32(b.exp_basis);
  round_to_f32(b.tex_basis);
  round_to_f32(b.id_scales);
  round_to_f32(b.exp_scales);
  round_to_f32(b.tex_scales);
  b.validate();
  return b;
}

Archive MorphableBasis::to_archive() const {
  Archive a;
  const int V = vertex_count();
  a.set_meta("kind", "morphable_basis");
  a.set_meta("num_regions", std::to_string(num_regions));
  a.put("mean_shape", vertices_to_tensor(mean_shape), DType::Float32);
  a.put("mean_texture", vertices_to_tensor(mean_texture), DType::Float32);
  a.put("id_basis", matrix_to_tensor_v3d(id_basis, V), DType::Float32);
  a.put("exp_basis", matrix_to_tensor_v3d(exp_basis, V), DType::Float32);
  a.put("tex_basis", matrix_to_tensor_v3d(tex_basis, V), DType::Float32);
  std::vector<int> tri;
  for (const auto& t : triangles) tri.insert(tri.end(), t.begin(), t.end());
  a.put_ints("triangles", tri, {static_cast<int>(triangles.size()), 3});
  a.put_ints("landmark_indices", landmark_indices, {landmark_count()});
  a.put("basis_scales_id", vector_to_tensor(id_scales), DType::Float32);
  a.put("basis_scales_exp", vector_to_tensor(exp_scales), DType::Float32);
  a.put("basis_scales_tex", vector_to_tensor(tex_scales), DType::Float32);
  a.put_ints("region_labels", region_labels, {V});
  return a;
}

MorphableBasis MorphableBasis::from_archive(const Archive& a) {
  MorphableBasis b;
  b.num_regions = a.has_meta("num_regions") ? std::stoi(a.meta("num_regions")) : 8;
  b.mean_shape = tensor_to_vertices(a.get("mean_shape"), "mean_shape");
  b.mean_texture = tensor_to_vertices(a.get("mean_texture"), "mean_texture");
  b.id_basis = tensor_to_matrix_v3d(a.get("id_basis"), "id_basis");
  b.exp_basis = tensor_to_matrix_v3d(a.get("exp_basis"), "exp_basis");
  b.tex_basis = tensor_to_matrix_v3d(a.get("tex_basis"), "tex_basis");
  const std::vector<int> tri = a.get_ints("triangles");
  if (tri.size() % 3 != 0) throw ArchiveError("triangles array length is not a multiple of 3");
  for (std::size_t i = 0; i < tri.size(); i += 3) b.triangles.push_back({tri[i], tri[i + 1], tri[i + 2]});
  b.landmark_indices = a.get_ints("landmark_indices");
  b.id_scales = tensor_to_vector(a.get("basis_scales_id"));
  b.exp_scales = tensor_to_vector(a.get("basis_scales_exp"));
  b.tex_scales = tensor_to_vector(a.get("basis_scales_tex"));
  b.region_labels = a.get_ints("region_labels");
  b.validate();
  return b;
}

// --- reconstruction ------------------------------------------------------------

void check_dimensions(const MorphableBasis& basis, const FaceCoefficients& c) {
  require_length(c.alpha, basis.d_id(), "alpha");
  require_length(c.rho, basis.d_exp(), "rho");
  require_length(c.delta, basis.d_tex(), "delta");
  require_length(c.kappa, kShCoefficients, "kappa");
  require_length(c.theta, kPoseParameters, "theta");
}

VertexArray reconstruct_shape(const MorphableBasis& basis, const FaceCoefficients& c) {
  require_length(c.alpha, basis.d_id(), "alpha");
  require_length(c.rho, basis.d_exp(), "rho");
  const Eigen::VectorXd offset = basis.id_basis * c.alpha + basis.exp_basis * c.rho;
  VertexArray v = basis.mean_shape;
  Eigen::Map<Eigen::VectorXd>(v.data(), v.size()) += offset;
  return v;
}

TextureResult reconstruct_texture(const MorphableBasis& basis, const FaceCoefficients& c) {
  require_length(c.delta, basis.d_tex(), "delta");
  TextureResult r{basis.mean_texture, 0};
  Eigen::Map<Eigen::VectorXd> flat(r.albedo.data(), r.albedo.size());
  flat += basis.tex_basis * c.delta;
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    if (flat[i] < 0.0 || flat[i] > 1.0) {
      flat[i] = std::clamp(flat[i], 0.0, 1.0);
      ++r.clamped;
    }
  }
  return r;
}

Eigen::Matrix3d rotation_matrix(double rx, double ry, double rz) {
  return (Eigen::AngleAxisd(rz, Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(ry, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(rx, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

std::array<Eigen::Matrix3d, 3> rotation_derivatives(double rx, double ry, double rz) {
  const Eigen::Matrix3d Rx = Eigen::AngleAxisd(rx, Eigen::Vector3d::UnitX()).toRotationMatrix();
  const Eigen::Matrix3d Ry = Eigen::AngleAxisd(ry, Eigen::Vector3d::UnitY()).toRotationMatrix();
  const Eigen::Matrix3d Rz = Eigen::AngleAxisd(rz, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  Eigen::Matrix3d dRx, dRy, dRz;
  dRx << 0, 0, 0, 0, -std::sin(rx), -std::cos(rx), 0, std::cos(rx), -std::sin(rx);
  dRy << -std::sin(ry), 0, std::cos(ry), 0, 0, 0, -std::cos(ry), 0, -std::sin(ry);
  dRz << -std::sin(rz), -std::cos(rz), 0, std::cos(rz), -std::sin(rz), 0, 0, 0, 0;
  return {Rz * Ry * dRx, Rz * dRy * Rx, dRz * Ry * Rx};
}

VertexArray apply_pose(const VertexArray& vertices, const Eigen::VectorXd& theta) {
  require_length(theta, kPoseParameters, "theta");
  const Eigen::Matrix3d R = rotation_matrix(theta[0], theta[1], theta[2]);
  VertexArray out = vertices * R.transpose();
  out.rowwise() += theta.tail<3>().transpose();
  return out;
}

NormalsResult compute_vertex_normals(const VertexArray& vertices, const std::vector<Triangle>& triangles) {
  NormalsResult r{VertexArray::Zero(vertices.rows(), 3), 0};
  for (const auto& t : triangles) {
    const Eigen::Vector3d a = vertices.row(t[0]), b = vertices.row(t[1]), c = vertices.row(t[2]);
    const Eigen::Vector3d n = (b - a).cross(c - a);  // length = 2 * area
    if (n.norm() < 1e-14) continue;
    for (int i : t) r.normals.row(i) += n.transpose();
  }
  int fallback = 0;
  for (Eigen::Index v = 0; v < r.normals.rows(); ++v) {
    const double len = r.normals.row(v).norm();
    if (len < 1e-14) {
      r.normals.row(v) << 0.0, 0.0, 1.0;
      ++fallback;
    } else {
      r.normals.row(v) /= len;
    }
  }
  r.warnings = fallback > 0 ? 1 : 0;
  return r;
}

std::array<double, 9> sh_basis(const Eigen::Vector3d& n) {
  const double x = n.x(), y = n.y(), z = n.z();
  const auto& k = kShConstants;
  return {k[0],         k[1] * y,     k[2] * z, k[3] * x, k[4] * x * y,
          k[5] * y * z, k[6] * (3.0 * z * z - 1.0), k[7] * x * z, k[8] * (x * x - y * y)};
}

VertexArray sh_shade(const VertexArray& normals, const VertexArray& albedo, const Eigen::VectorXd& kappa) {
  require_length(kappa, kShCoefficients, "kappa");
  if (normals.rows() != albedo.rows()) throw std::invalid_argument("sh_shade: normals and albedo differ in vertex count");
  VertexArray out(albedo.rows(), 3);
  for (Eigen::Index v = 0; v < albedo.rows(); ++v) {
    const auto Y = sh_basis(normals.row(v).transpose());
    for (int c = 0; c < 3; ++c) {
      double irradiance = 0.0;
      for (int b = 0; b < 9; ++b) irradiance += kappa[9 * c + b] * Y[b];
      out(v, c) = std::clamp(albedo(v, c) * irradiance, 0.0, 1.0);
    }
  }
  return out;
}

Eigen::MatrixXd sh_shade_kappa_jacobian(const VertexArray& normals, const VertexArray& albedo,
                                        const Eigen::VectorXd& kappa) {
  require_length(kappa, kShCoefficients, "kappa");
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(3 * albedo.rows(), kShCoefficients);
  for (Eigen::Index v = 0; v < albedo.rows(); ++v) {
    const auto Y = sh_basis(normals.row(v).transpose());
    for (int c = 0; c < 3; ++c) {
      double irradiance = 0.0;
      for (int b = 0; b < 9; ++b) irradiance += kappa[9 * c + b] * Y[b];
      const double value = albedo(v, c) * irradiance;
      if (value <= 0.0 || value >= 1.0) continue;
      for (int b = 0; b < 9; ++b) J(3 * v + c, 9 * c + b) = albedo(v, c) * Y[b];
    }
  }
  return J;
}

Eigen::Vector2d project_point(const Eigen::Vector3d& p, int image_size) {
  const double f = kCameraScale * image_size;
  return {0.5 * image_size + f * p.x(), 0.5 * image_size - f * p.y()};
}

// --- rasterization -------------------------------------------------------------

RenderedFace rasterize(const VertexArray& vertices, const VertexArray& colors, const MorphableBasis& basis,
                       int image_size) {
  if (image_size < 16) throw std::invalid_argument("rasterize: image_size must be at least 16");
  if (colors.rows() != vertices.rows()) throw std::invalid_argument("rasterize: colors and vertices differ in count");
  const int S = image_size;
  const std::size_t P = static_cast<std::size_t>(S) * S;
  const int N = basis.num_regions;
  RenderedFace out;
  out.image = Tensor({3, S, S});
  out.face_mask = Tensor({S, S});
  out.region_map = Tensor({N, S, S});
  out.depth = Tensor::full({S, S}, -std::numeric_limits<double>::infinity());
  out.labels.assign(P, static_cast<int>(Region::Background));

  std::vector<Eigen::Vector2d> px(vertices.rows());
  for (Eigen::Index v = 0; v < vertices.rows(); ++v) px[v] = project_point(vertices.row(v).transpose(), S);

  for (const auto& tri : basis.triangles) {
    int i0 = tri[0], i1 = tri[1], i2 = tri[2];
    Eigen::Vector2d p0 = px[i0], p1 = px[i1], p2 = px[i2];
    const double area2 = (p1.x() - p0.x()) * (p2.y() - p0.y()) - (p1.y() - p0.y()) * (p2.x() - p0.x());
    // Counter-clockwise in model space is clockwise on the y-down pixel grid.
    if (area2 >= 0.0) continue;
    std::swap(i1, i2);
    std::swap(p1, p2);
    const double area = -area2;
    const int l0 = basis.region_labels[tri[0]], l1 = basis.region_labels[tri[1]], l2 = basis.region_labels[tri[2]];
    const int label = (l0 == l1 || l0 == l2) ? l0 : (l1 == l2 ? l1 : l0);

    const double xmin = std::min({p0.x(), p1.x(), p2.x()}), xmax = std::max({p0.x(), p1.x(), p2.x()});
    const double ymin = std::min({p0.y(), p1.y(), p2.y()}), ymax = std::max({p0.y(), p1.y(), p2.y()});
    const int j0 = std::max(0, static_cast<int>(std::ceil(xmin - 0.5))), j1 = std::min(S - 1, static_cast<int>(std::floor(xmax - 0.5)));
    const int r0 = std::max(0, static_cast<int>(std::ceil(ymin - 0.5))), r1 = std::min(S - 1, static_cast<int>(std::floor(ymax - 0.5)));
    for (int i = r0; i <= r1; ++i) {
      const double y = i + 0.5;
      for (int j = j0; j <= j1; ++j) {
        const double x = j + 0.5;
        const double w0 = (p2.x() - p1.x()) * (y - p1.y()) - (p2.y() - p1.y()) * (x - p1.x());
        const double w1 = (p0.x() - p2.x()) * (y - p2.y()) - (p0.y() - p2.y()) * (x - p2.x());
        const double w2 = (p1.x() - p0.x()) * (y - p0.y()) - (p1.y() - p0.y()) * (x - p0.x());
        if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
        const double b0 = w0 / area, b1 = w1 / area, b2 = w2 / area;
        const double z = b0 * vertices(i0, 2) + b1 * vertices(i1, 2) + b2 * vertices(i2, 2);
        const std::size_t p = static_cast<std::size_t>(i) * S + j;
        if (!(z > out.depth[p])) continue;
        out.depth[p] = z;
        out.face_mask[p] = 1.0;
        out.labels[p] = label;
        for (int c = 0; c < 3; ++c) {
          const double col = b0 * colors(i0, c) + b1 * colors(i1, c) + b2 * colors(i2, c);
          out.image[c * P + p] = std::clamp(col, 0.0, 1.0);  // weights can sum to 1 + ulp
        }
      }
    }
  }
  for (std::size_t p = 0; p < P; ++p) out.region_map[static_cast<std::size_t>(out.labels[p]) * P + p] = 1.0;
  if (out.face_mask.sum() == 0.0) out.warnings = 1;
  return out;
}

RenderedFace render_face(const MorphableBasis& basis, const FaceCoefficients& c, int image_size) {
  check_dimensions(basis, c);
  const VertexArray posed = apply_pose(reconstruct_shape(basis, c), c.theta);
  const NormalsResult normals = compute_vertex_normals(posed, basis.triangles);
  const TextureResult tex = reconstruct_texture(basis, c);
  return rasterize(posed, sh_shade(normals.normals, tex.albedo, c.kappa), basis, image_size);
}

// --- landmarks -------------------------------------------------------------------

namespace {

Eigen::Vector3d landmark_vertex(const MorphableBasis& basis, const FaceCoefficients& c, int idx) {
  return basis.mean_shape.row(idx).transpose() + basis.id_basis.middleRows(3 * idx, 3) * c.alpha +
         basis.exp_basis.middleRows(3 * idx, 3) * c.rho;
}

}  // namespace

Eigen::MatrixX2d project_landmarks(const MorphableBasis& basis, const FaceCoefficients& c, int image_size) {
  require_length(c.alpha, basis.d_id(), "alpha");
  require_length(c.rho, basis.d_exp(), "rho");
  require_length(c.theta, kPoseParameters, "theta");
  const Eigen::Matrix3d R = rotation_matrix(c.theta[0], c.theta[1], c.theta[2]);
  const Eigen::Vector3d t = c.theta.tail<3>();
  Eigen::MatrixX2d out(basis.landmark_count(), 2);
  for (int k = 0; k < basis.landmark_count(); ++k) {
    out.row(k) = project_point(R * landmark_vertex(basis, c, basis.landmark_indices[k]) + t, image_size).transpose();
  }
  return out;
}

Eigen::MatrixXd landmark_jacobian(const MorphableBasis& basis, const FaceCoefficients& c, int image_size) {
  const int K = basis.landmark_count(), di = basis.d_id(), de = basis.d_exp();
  const double f = kCameraScale * image_size;
  const Eigen::Matrix3d R = rotation_matrix(c.theta[0], c.theta[1], c.theta[2]);
  const auto dR = rotation_derivatives(c.theta[0], c.theta[1], c.theta[2]);
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(2 * K, di + de + kPoseParameters);
  for (int k = 0; k < K; ++k) {
    const int idx = basis.landmark_indices[k];
    const Eigen::Vector3d s = landmark_vertex(basis, c, idx);
    const Eigen::MatrixXd RI = R * basis.id_basis.middleRows(3 * idx, 3);
    const Eigen::MatrixXd RE = R * basis.exp_basis.middleRows(3 * idx, 3);
    J.block(2 * k, 0, 1, di) = f * RI.row(0);
    J.block(2 * k + 1, 0, 1, di) = -f * RI.row(1);
    J.block(2 * k, di, 1, de) = f * RE.row(0);
    J.block(2 * k + 1, di, 1, de) = -f * RE.row(1);
    for (int a = 0; a < 3; ++a) {
      const Eigen::Vector3d d = dR[a] * s;
      J(2 * k, di + de + a) = f * d.x();
      J(2 * k + 1, di + de + a) = -f * d.y();
    }
    J(2 * k, di + de + 3) = f;
    J(2 * k + 1, di + de + 4) = -f;
  }
  return J;
}

Eigen::Matrix<double, 5, 2> five_point_landmarks(const Eigen::MatrixX2d& lm) {
  if (lm.rows() != 68) throw std::invalid_argument("five_point_landmarks expects the 68-point layout");
  Eigen::Matrix<double, 5, 2> out;
  out.row(0) = lm.middleRows(36, 6).colwise().mean();
  out.row(1) = lm.middleRows(42, 6).colwise().mean();
  out.row(2) = lm.row(30);
  out.row(3) = lm.row(48);
  out.row(4) = lm.row(54);
  return out;
}

// --- attribute editing -------------------------------------------------------------

AttributeSet parse_attributes(const std::string& text) {
  static const std::pair<const char*, Attribute> table[] = {{"identity", kIdentity},
                                                            {"expression", kExpression},
                                                            {"texture", kTexture},
                                                            {"illumination", kIllumination},
                                                            {"pose", kPose}};
  AttributeSet set = 0;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    if (item == "all") {
      set |= kAllAttributes;
      continue;
    }
    bool found = false;
    for (const auto& [name, bit] : table) {
      if (item == name) {
        set |= bit;
        found = true;
      }
    }
    if (!found) {
      throw std::invalid_argument("unknown attribute '" + item +
                                  "' (valid: identity, expression, texture, illumination, pose, all)");
    }
  }
  return set;
}

std::string attribute_list_string(AttributeSet set) {
  std::string out;
  auto add = [&](Attribute a, const char* n) {
    if (set & a) out += (out.empty() ? "" : ",") + std::string(n);
  };
  add(kIdentity, "identity");
  add(kExpression, "expression");
  add(kTexture, "texture");
  add(kIllumination, "illumination");
  add(kPose, "pose");
  return out;
}

FaceCoefficients remap_coefficients(const FaceCoefficients& source, const FaceCoefficients& target,
                                    AttributeSet attributes) {
  auto check = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b, const char* field) {
    if (a.size() != b.size()) throw std::invalid_argument(std::string("remap: '") + field + "' lengths differ");
  };
  check(source.alpha, target.alpha, "alpha");
  check(source.rho, target.rho, "rho");
  check(source.delta, target.delta, "delta");
  check(source.kappa, target.kappa, "kappa");
  check(source.theta, target.theta, "theta");
  FaceCoefficients out = target;
  if (attributes & kIdentity) out.alpha = source.alpha;
  if (attributes & kExpression) out.rho = source.rho;
  if (attributes & kTexture) out.delta = source.delta;
  if (attributes & kIllumination) out.kappa = source.kappa;
  if (attributes & kPose) out.theta = source.theta;
  return out;
}

FaceCoefficients interpolate_coefficients(const FaceCoefficients& a, const FaceCoefficients& b, double t,
                                          AttributeSet attributes) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("interpolation parameter t must lie in [0, 1]");
  if (t == 0.0) return a;
  if (t == 1.0) return remap_coefficients(b, a, attributes);
  FaceCoefficients out = remap_coefficients(a, a, 0);
  auto lerp = [t](const Eigen::VectorXd& x, const Eigen::VectorXd& y) -> Eigen::VectorXd {
    if (x.size() != y.size()) throw std::invalid_argument("interpolate: coefficient lengths differ");
    return x + t * (y - x);  // exact when x == y
  };
  if (attributes & kIdentity) out.alpha = lerp(a.alpha, b.alpha);
  if (attributes & kExpression) out.rho = lerp(a.rho, b.rho);
  if (attributes & kTexture) out.delta = lerp(a.delta, b.delta);
  if (attributes & kIllumination) out.kappa = lerp(a.kappa, b.kappa);
  if (attributes & kPose) {
    out.theta = lerp(a.theta, b.theta);
    for (int i = 0; i < 3; ++i) out.theta[i] = a.theta[i] + t * wrap_angle(b.theta[i] - a.theta[i]);
  }
  return out;
}

// --- fitting -----------------------------------------------------------------------

FitResult fit_coefficients(const Eigen::MatrixX2d& landmarks, const MorphableBasis& basis, const FitOptions& opt) {
  const int K = basis.landmark_count();
  if (landmarks.rows() != K) {
    throw std::invalid_argument("fit_coefficients: got " + std::to_string(landmarks.rows()) + " landmarks, basis has " +
                                std::to_string(K));
  }
  const int di = basis.d_id(), de = basis.d_exp();
  const int n = di + de + kPoseParameters;
  Eigen::VectorXd target(2 * K);
  for (int k = 0; k < K; ++k) target.segment<2>(2 * k) = landmarks.row(k).transpose();

  // Unknowns: alpha / scale, rho / scale, theta.
  Eigen::VectorXd scale = Eigen::VectorXd::Ones(n);
  scale.head(di) = basis.id_scales;
  scale.segment(di, de) = basis.exp_scales;
  Eigen::VectorXd reg = Eigen::VectorXd::Zero(n);
  reg.head(di).setConstant(opt.id_weight);
  reg.segment(di, de).setConstant(opt.exp_weight);
  reg[di + de + 5] = opt.tz_weight;

  FaceCoefficients c = FaceCoefficients::zeros(di, de, basis.d_tex());
  auto unpack = [&](const Eigen::VectorXd& q) {
    c.alpha = q.head(di).cwiseProduct(basis.id_scales);
    c.rho = q.segment(di, de).cwiseProduct(basis.exp_scales);
    c.theta = q.tail(kPoseParameters);
  };
  auto residual = [&](const Eigen::VectorXd& q) {
    unpack(q);
    const Eigen::MatrixX2d lm = project_landmarks(basis, c, opt.image_size);
    Eigen::VectorXd r(2 * K);
    for (int k = 0; k < K; ++k) r.segment<2>(2 * k) = lm.row(k).transpose() - target.segment<2>(2 * k);
    return r;
  };
  auto objective = [&](const Eigen::VectorXd& q, const Eigen::VectorXd& r) {
    return r.squaredNorm() + (reg.array() * q.array().square()).sum();
  };

  Eigen::VectorXd q = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd r = residual(q);
  double cost = objective(q, r);
  double lambda = 1e-3;
  FitResult result;
  for (int it = 0; it < opt.max_iterations; ++it) {
    result.iterations = it + 1;
    unpack(q);
    const Eigen::MatrixXd J = landmark_jacobian(basis, c, opt.image_size) * scale.asDiagonal();
    Eigen::MatrixXd H = J.transpose() * J;
    H.diagonal() += reg;
    const Eigen::VectorXd g = J.transpose() * r + reg.cwiseProduct(q);
    bool improved = false;
    double new_cost = cost;
    for (int attempt = 0; attempt < 10 && !improved; ++attempt) {
      Eigen::MatrixXd A = H;
      A.diagonal() += lambda * (H.diagonal().array() + 1e-9).matrix();
      const Eigen::VectorXd step = A.ldlt().solve(-g);
      const Eigen::VectorXd q_new = q + step;
      const Eigen::VectorXd r_new = residual(q_new);
      new_cost = objective(q_new, r_new);
      if (std::isfinite(new_cost) && new_cost < cost) {
        q = q_new;
        r = r_new;
        improved = true;
        lambda = std::max(lambda / 3.0, 1e-9);
      } else {
        lambda *= 4.0;
      }
    }
    if (!improved) break;
    const double rel = (cost - new_cost) / std::max(cost, 1e-300);
    cost = new_cost;
    if (rel < 1e-12) break;
  }
  unpack(q);
  result.coefficients = c;
  result.objective = cost;
  double err = 0.0;
  for (int k = 0; k < K; ++k) err += r.segment<2>(2 * k).norm();
  result.mean_error_px = err / K;
  result.converged = std::isfinite(result.mean_error_px) && result.mean_error_px <= opt.quality_threshold_px;
  return result;
}

// --- sampling --------------------------------------------------------------------

Eigen::VectorXd uniform_light(double intensity) {
  Eigen::VectorXd k = Eigen::VectorXd::Zero(kShCoefficients);
  for (int c = 0; c < 3; ++c) k[9 * c] = intensity / kShConstants[0];
  return k;
}

FaceCoefficients sample_random_face(const MorphableBasis& basis, std::mt19937_64& rng, const PoseRanges& ranges) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  FaceCoefficients c = FaceCoefficients::zeros(basis.d_id(), basis.d_exp(), basis.d_tex());
  for (int j = 0; j < basis.d_id(); ++j) c.alpha[j] = basis.id_scales[j] * normal(rng);
  for (int j = 0; j < basis.d_exp(); ++j) c.rho[j] = basis.exp_scales[j] * normal(rng);
  for (int j = 0; j < basis.d_tex(); ++j) c.delta[j] = basis.tex_scales[j] * normal(rng);
  const double level = uniform(0.65, 1.0);
  std::array<double, 9> shared{};
  for (int b = 1; b < 9; ++b) shared[b] = b < 4 ? uniform(-0.3, 0.3) : uniform(-0.12, 0.12);
  for (int ch = 0; ch < 3; ++ch) {
    const double dc = level * uniform(0.92, 1.08) / kShConstants[0];
    c.kappa[9 * ch] = dc;
    for (int b = 1; b < 9; ++b) c.kappa[9 * ch + b] = shared[b] * dc;
  }
  const double deg = pi / 180.0;
  c.theta[0] = uniform(-ranges.rx_deg, ranges.rx_deg) * deg;
  c.theta[1] = uniform(-ranges.ry_deg, ranges.ry_deg) * deg;
  c.theta[2] = uniform(-ranges.rz_deg, ranges.rz_deg) * deg;
  c.theta[3] = uniform(-ranges.translation, ranges.translation);
  c.theta[4] = uniform(-ranges.translation, ranges.translation);
  c.theta[5] = 0.0;
  return c;
}

int conditioning_size(const MorphableBasis& basis) {
  return basis.d_id() + basis.d_exp() + kShCoefficients + basis.d_tex() + kPoseParameters;
}

Eigen::VectorXd conditioning_vector(const MorphableBasis& basis, const FaceCoefficients& c) {
  check_dimensions(basis, c);
  Eigen::VectorXd v(conditioning_size(basis));
  v << c.alpha.cwiseQuotient(basis.id_scales), c.rho.cwiseQuotient(basis.exp_scales), c.kappa * kShConstants[0],
      c.delta.cwiseQuotient(basis.tex_scales), c.theta;
  return v;
}

Archive coefficients_to_archive(const FaceCoefficients& c) {
  Archive a;
  a.set_meta("kind", "face_coefficients");
  a.put("alpha", vector_to_tensor(c.alpha), DType::Float32);
  a.put("rho", vector_to_tensor(c.rho), DType::Float32);
  a.put("delta", vector_to_tensor(c.delta), DType::Float32);
  a.put("kappa", vector_to_tensor(c.kappa), DType::Float32);
  a.put("theta", vector_to_tensor(c.theta), DType::Float32);
  return a;
}

FaceCoefficients coefficients_from_archive(const Archive& a) {
  FaceCoefficients c{tensor_to_vector(a.get("alpha")), tensor_to_vector(a.get("rho")), tensor_to_vector(a.get("delta")),
                     tensor_to_vector(a.get("kappa")), tensor_to_vector(a.get("theta"))};
  if (!c.all_finite()) throw ArchiveError("coefficient file contains non-finite values");
  return c;
}

}  // namespace facectl
