#include "facectl/editing.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "facectl/image_io.hpp"

namespace facectl {

namespace {

using nlohmann::json;

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
}

json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from(const json& j, const char* key, Eigen::Index expected) {
  if (!j.contains(key) || !j[key].is_array()) throw std::invalid_argument(std::string("coefficients: missing '") + key + "'");
  const auto values = j[key].get<std::vector<double>>();
  if (static_cast<Eigen::Index>(values.size()) != expected)
    throw std::invalid_argument(std::string("coefficients: '") + key + "' has " + std::to_string(values.size()) +
                                " entries, expected " + std::to_string(expected));
  return Eigen::Map<const Eigen::VectorXd>(values.data(), expected);
}

Tensor single(const Tensor& batch, int i) { return slice_batch(batch, i, i + 1).reshaped({batch.dim(1), batch.dim(2), batch.dim(3)}); }

Var styles_of(ModelBundle& model, const FaceRecord& record) {
  const int N = record.region_map.dim(0), S = record.image_size();
  return model.encode_styles(record.image.reshaped({1, 3, S, S}), record.region_map.reshaped({1, N, S, S}));
}

Tensor generate_one(ModelBundle& model, SwapBatch& batch, const Var& styles) {
  return single(model.generate(batch, styles), 0);
}

SwapBatch batch_for(ModelBundle& model, const SwapPair& pair) {
  const int S = model.config.corpus.image_size;
  if (pair.source->image_size() != S || pair.target->image_size() != S)
    throw std::invalid_argument("inputs must be " + std::to_string(S) + "x" + std::to_string(S) +
                                " to match the checkpoint");
  return assemble_swap_batch(model.basis, std::span(&pair, 1), model.stand_ins.identity);
}

}  // namespace

std::string sidecar_path(const std::string& png_path, const std::string& suffix) {
  std::filesystem::path p(png_path);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

std::string coefficients_to_json(const FaceCoefficients& c) {
  json j;
  j["alpha"] = vector_json(c.alpha);
  j["rho"] = vector_json(c.rho);
  j["delta"] = vector_json(c.delta);
  j["kappa"] = vector_json(c.kappa);
  j["theta"] = vector_json(c.theta);
  return j.dump(2);
}

FaceCoefficients coefficients_from_json(const std::string& text, const MorphableBasis& basis) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("coefficients: ") + e.what());
  }
  FaceCoefficients c;
  c.alpha = vector_from(j, "alpha", basis.d_id());
  c.rho = vector_from(j, "rho", basis.d_exp());
  c.delta = vector_from(j, "delta", basis.d_tex());
  c.kappa = vector_from(j, "kappa", kShCoefficients);
  c.theta = vector_from(j, "theta", kPoseParameters);
  if (!c.all_finite()) throw std::invalid_argument("coefficients: non-finite value");
  return c;
}

std::string landmarks_to_json(const Eigen::MatrixX2d& landmarks) {
  json pts = json::array();
  for (Eigen::Index k = 0; k < landmarks.rows(); ++k) pts.push_back({landmarks(k, 0), landmarks(k, 1)});
  return json{{"landmarks", pts}}.dump();
}

Eigen::MatrixX2d landmarks_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    const auto pts = j.at("landmarks").get<std::vector<std::array<double, 2>>>();
    Eigen::MatrixX2d out(static_cast<Eigen::Index>(pts.size()), 2);
    for (std::size_t k = 0; k < pts.size(); ++k) out.row(static_cast<Eigen::Index>(k)) << pts[k][0], pts[k][1];
    return out;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("landmarks: ") + e.what());
  }
}

LoadedFace load_face(const std::string& png_path, const MorphableBasis& basis) {
  LoadedFace out;
  FaceRecord& r = out.record;
  r.image = read_png(png_path);
  const int S = r.image.dim(1);
  if (r.image.dim(2) != S) throw std::invalid_argument("'" + png_path + "' is not square");

  const std::string coeffs = sidecar_path(png_path, ".coeffs.json");
  const std::string lms = sidecar_path(png_path, ".landmarks.json");
  if (std::filesystem::exists(coeffs)) {
    r.coefficients = coefficients_from_json(read_text(coeffs), basis);
  } else if (std::filesystem::exists(lms)) {
    const Eigen::MatrixX2d given = landmarks_from_json(read_text(lms));
    if (given.rows() != basis.landmark_count())
      throw std::invalid_argument("'" + lms + "' has " + std::to_string(given.rows()) + " landmarks, expected " +
                                  std::to_string(basis.landmark_count()));
    FitOptions opt;
    opt.image_size = S;
    out.fit = fit_coefficients(given, basis, opt);
    out.fitted = true;
    r.coefficients = out.fit.coefficients;
    // Texture and lighting are not observable from landmarks.
    r.coefficients.kappa = uniform_light(0.8);
    if (!out.fit.converged)
      out.warnings.push_back("landmark fit for '" + png_path + "' is poor (mean error " +
                             std::to_string(out.fit.mean_error_px) + " px)");
  } else {
    throw std::invalid_argument("'" + png_path + "' needs coefficients (" + coeffs + ") or landmarks (" + lms + ")");
  }
  r.landmarks = project_landmarks(basis, r.coefficients, S);

  const std::string seg = sidecar_path(png_path, ".seg.png");
  if (std::filesystem::exists(seg)) {
    const LabelImage labels = read_label_png(seg);
    if (labels.height != S || labels.width != S) throw std::invalid_argument("'" + seg + "' does not match the image size");
    for (int l : labels.labels)
      if (l < 0 || l >= basis.num_regions)
        throw std::invalid_argument("'" + seg + "' has label " + std::to_string(l) + " outside the class legend");
    r.region_map = one_hot_segmentation(std::span(&labels.labels, 1), basis.num_regions, S, S).reshaped({basis.num_regions, S, S});
    r.face_mask = Tensor({S, S});
    for (int p = 0; p < S * S; ++p) r.face_mask[p] = labels.labels[p] != 0 ? 1.0 : 0.0;
  } else {
    const RenderedFace rendered = render_face(basis, r.coefficients, S);
    r.region_map = rendered.region_map;
    r.face_mask = rendered.face_mask;
  }
  return out;
}

void save_face(const std::string& png_path, const FaceRecord& record) {
  write_png(png_path, record.image);
  write_text(sidecar_path(png_path, ".coeffs.json"), coefficients_to_json(record.coefficients));
  write_text(sidecar_path(png_path, ".landmarks.json"), landmarks_to_json(record.landmarks));
  const int N = record.region_map.dim(0), S = record.image_size();
  LabelImage labels{S, S, std::vector<int>(static_cast<std::size_t>(S) * S, 0)};
  for (int n = 0; n < N; ++n)
    for (int p = 0; p < S * S; ++p)
      if (record.region_map[static_cast<std::size_t>(n) * S * S + p] > 0.5) labels.labels[p] = n;
  write_label_png(sidecar_path(png_path, ".seg.png"), labels);
}

SwapResult swap_face(ModelBundle& model, const FaceRecord& source, const FaceRecord& target, AttributeSet attributes) {
  const SwapPair pair = make_swap(source, target, attributes);
  SwapBatch batch = batch_for(model, pair);
  SwapResult out;
  out.image = generate_one(model, batch, styles_of(model, target));
  out.coefficients = pair.coefficients;
  out.seg = single(batch.seg, 0);
  out.five_points = batch.five_points[0];
  return out;
}

std::vector<Tensor> interpolate_faces(ModelBundle& model, const FaceRecord& source, const FaceRecord& target,
                                      AttributeSet attributes, int steps) {
  if (steps < 2) throw std::invalid_argument("interpolation needs at least 2 steps");
  if (attributes == 0) throw std::invalid_argument("interpolation needs an attribute (" + attribute_list_string(kAllAttributes) + ")");
  const bool moves_identity = attributes & kIdentity;
  const FaceCoefficients start = remap_coefficients(source.coefficients, target.coefficients, moves_identity ? 0u : kIdentity);
  const FaceCoefficients end = remap_coefficients(source.coefficients, target.coefficients, attributes | kIdentity);
  const Var styles = styles_of(model, target);

  Tensor z_target;
  if (moves_identity) {
    const FaceRecord* t = &target;
    z_target = embed_records(std::span(&t, 1), model.stand_ins.identity);
  }
  std::vector<Tensor> frames;
  for (int k = 0; k < steps; ++k) {
    // Exact endpoints, so the first and last frames match the plain swaps.
    const double t = k == steps - 1 ? 1.0 : static_cast<double>(k) / (steps - 1);
    SwapPair pair{&source, &target, interpolate_coefficients(start, end, t, attributes | kIdentity)};
    if (k == 0) pair.coefficients = start;
    if (k == steps - 1) pair.coefficients = end;
    SwapBatch batch = batch_for(model, pair);
    if (moves_identity) {
      if (k == 0) batch.z_id = z_target;
      else if (k < steps - 1) {
        const int E = batch.z_id.dim(1);
        double norm = 0.0;
        for (int e = 0; e < E; ++e) {
          batch.z_id[e] = (1.0 - t) * z_target[e] + t * batch.z_id[e];
          norm += batch.z_id[e] * batch.z_id[e];
        }
        norm = std::sqrt(norm);
        if (norm > 0.0)
          for (int e = 0; e < E; ++e) batch.z_id[e] /= norm;
      }
    }
    frames.push_back(generate_one(model, batch, styles));
  }
  return frames;
}

Tensor replace_style_rows(const Tensor& styles, const Tensor& reference, const std::vector<int>& regions) {
  if (styles.shape() != reference.shape() || styles.rank() != 3)
    throw std::invalid_argument("replace_style_rows: styles must be matching B x N x D tensors");
  Tensor out = styles;
  const int B = styles.dim(0), N = styles.dim(1), D = styles.dim(2);
  for (int r : regions) {
    if (r < 0 || r >= N) throw std::invalid_argument("replace_style_rows: region out of range");
    for (int b = 0; b < B; ++b)
      for (int d = 0; d < D; ++d) out(b, r, d) = reference(b, r, d);
  }
  return out;
}

RegionEditResult edit_regions(ModelBundle& model, const FaceRecord& target, const FaceRecord& reference,
                              const std::vector<std::string>& regions, bool progressive) {
  if (!model.config.use_style_encoder)
    throw std::invalid_argument("region editing needs a checkpoint trained with the style encoder");
  std::vector<int> indices;
  for (const std::string& name : regions) indices.push_back(region_index(name));
  if (reference.image_size() != target.image_size()) throw std::invalid_argument("reference and target differ in size");

  const SwapPair pair = make_swap(target, target, 0u);
  SwapBatch batch = batch_for(model, pair);
  const Tensor own = styles_of(model, target).value();
  const Tensor ref = styles_of(model, reference).value();
  const int P = reference.image_size() * reference.image_size();

  RegionEditResult out;
  std::vector<int> applied;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int r = indices[i];
    double area = 0.0;
    for (int p = 0; p < P; ++p) area += reference.region_map[static_cast<std::size_t>(r) * P + p];
    if (area == 0.0) {
      out.warnings.push_back("reference has no '" + regions[i] + "' pixels; region skipped");
      continue;
    }
    applied.push_back(r);
    if (progressive)
      out.images.push_back(generate_one(model, batch, Var::constant(replace_style_rows(own, ref, applied))));
  }
  if (!progressive || applied.empty())
    out.images.push_back(generate_one(model, batch, Var::constant(replace_style_rows(own, ref, applied))));
  out.applied = applied;
  return out;
}

void EditRequest::validate() const {
  auto need = [](const std::string& path, const char* flag) {
    if (path.empty()) throw std::invalid_argument(std::string("missing ") + flag);
    if (!std::filesystem::exists(path)) throw std::invalid_argument(std::string(flag) + " '" + path + "' does not exist");
  };
  need(checkpoint, "--checkpoint");
  need(target, "--target");
  if (out.empty()) throw std::invalid_argument("missing --out");
  switch (operation) {
    case EditOperation::Swap:
      need(source, "--source");
      break;
    case EditOperation::Interpolate:
      need(source, "--source");
      if (steps < 2) throw std::invalid_argument("--steps must be at least 2");
      if (attributes == 0) throw std::invalid_argument("--attributes must name at least one of " + attribute_list_string(kAllAttributes));
      break;
    case EditOperation::EditRegion:
      need(reference, "--reference");
      for (const std::string& r : regions) region_index(r);
      break;
  }
}

EditOutcome run_edit(const EditRequest& request) {
  request.validate();
  ModelBundle model = ModelBundle::load(request.checkpoint);
  EditOutcome out;
  auto load = [&](const std::string& path) {
    LoadedFace f = load_face(path, model.basis);
    out.warnings.insert(out.warnings.end(), f.warnings.begin(), f.warnings.end());
    return std::move(f.record);
  };
  const FaceRecord target = load(request.target);
  const std::filesystem::path dest(request.out);
  if (dest.has_parent_path()) std::filesystem::create_directories(dest.parent_path());

  switch (request.operation) {
    case EditOperation::Swap: {
      const FaceRecord source = load(request.source);
      const SwapResult r = swap_face(model, source, target, request.attributes);
      write_png(request.out, r.image);
      const std::string sidecar = sidecar_path(request.out, ".coeffs.json");
      write_text(sidecar, coefficients_to_json(r.coefficients));
      out.written = {request.out, sidecar};
      break;
    }
    case EditOperation::Interpolate: {
      const FaceRecord source = load(request.source);
      const std::vector<Tensor> frames = interpolate_faces(model, source, target, request.attributes, request.steps);
      write_png(request.out, tile_row(frames));
      out.written = {request.out};
      break;
    }
    case EditOperation::EditRegion: {
      const FaceRecord reference = load(request.reference);
      RegionEditResult r = edit_regions(model, target, reference, request.regions, request.progressive);
      out.warnings.insert(out.warnings.end(), r.warnings.begin(), r.warnings.end());
      if (request.progressive) {
        for (std::size_t k = 0; k < r.images.size(); ++k) {
          const std::string step = (dest.parent_path() / (dest.stem().string() + "_" + std::to_string(k + 1) + ".png")).string();
          write_png(step, r.images[k]);
          out.written.push_back(step);
        }
        std::vector<Tensor> row{target.image};
        row.insert(row.end(), r.images.begin(), r.images.end());
        write_png(request.out, tile_row(row));
      } else {
        write_png(request.out, r.images[0]);
      }
      out.written.insert(out.written.begin(), request.out);
      break;
    }
  }
  return out;
}

}  // namespace facectl
