// facectl: face swapping, interpolation, region editing, training and evaluation.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "facectl/editing.hpp"
#include "facectl/evaluation.hpp"
#include "facectl/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace facectl;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Flags {
  std::string source, target, reference, attributes, regions, checkpoint, config, out;
  int steps = 0;
  std::uint64_t seed = 0;
  int pairs = 50;
  bool progressive = false;
};

// The --config file is a training config; its optional "cli" object holds
// defaults for any flag. Flags given on the command line win.
struct ConfigFile {
  json cli = json::object();
  json train = json::object();
};

ConfigFile read_config(const std::string& path) {
  ConfigFile out;
  if (path.empty()) return out;
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read --config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("--config '" + path + "': " + e.what());
  }
  if (!j.is_object()) throw UsageError("--config '" + path + "' must hold a JSON object");
  if (j.contains("cli")) {
    out.cli = j["cli"];
    if (!out.cli.is_object()) throw UsageError("--config: \"cli\" must be an object");
    j.erase("cli");
  }
  out.train = j;
  return out;
}

template <typename T>
void fill(CLI::App& app, const ConfigFile& cfg, const std::string& name, T& value) {
  const CLI::Option* opt = app.get_option_no_throw("--" + name);
  if ((opt != nullptr && opt->count() > 0) || !cfg.cli.contains(name)) return;
  try {
    value = cfg.cli[name].get<T>();
  } catch (const json::exception&) {
    throw UsageError("--config: \"cli." + name + "\" has the wrong type");
  }
}

void fill_all(CLI::App& app, const ConfigFile& cfg, Flags& f) {
  for (const auto& [key, value] : cfg.cli.items()) {
    static const std::set<std::string> known = {"source", "target",     "reference", "attributes", "regions", "checkpoint",
                                                "out",    "steps",      "seed",      "pairs",      "progressive"};
    if (!known.count(key)) throw UsageError("--config: unknown \"cli\" entry '" + key + "'");
  }
  fill(app, cfg, "source", f.source);
  fill(app, cfg, "target", f.target);
  fill(app, cfg, "reference", f.reference);
  fill(app, cfg, "attributes", f.attributes);
  fill(app, cfg, "regions", f.regions);
  fill(app, cfg, "checkpoint", f.checkpoint);
  fill(app, cfg, "out", f.out);
  fill(app, cfg, "steps", f.steps);
  fill(app, cfg, "seed", f.seed);
  fill(app, cfg, "pairs", f.pairs);
  fill(app, cfg, "progressive", f.progressive);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

AttributeSet attributes_of(const std::string& s) {
  try {
    return s.empty() ? 0u : parse_attributes(s);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

TrainConfig train_config(const ConfigFile& cfg) {
  try {
    return TrainConfig::from_json(cfg.train.dump());
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--config: ") + e.what());
  }
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

int run_edit_command(EditOperation op, CLI::App& app, const ConfigFile& cfg, Flags& f) {
  fill_all(app, cfg, f);
  EditRequest req;
  req.operation = op;
  req.source = f.source;
  req.target = f.target;
  req.reference = f.reference;
  req.checkpoint = f.checkpoint;
  req.out = f.out;
  req.progressive = f.progressive;
  req.regions = split_list(f.regions);
  if (op == EditOperation::Swap) req.attributes = app.count("--attributes") || cfg.cli.contains("attributes") ? attributes_of(f.attributes) : kIdentity;
  if (op == EditOperation::Interpolate) {
    req.attributes = attributes_of(f.attributes);
    req.steps = f.steps;
  }
  try {
    req.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  EditOutcome outcome;
  try {
    outcome = run_edit(req);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());  // unusable inputs, e.g. an image without sidecars
  }
  print_warnings(outcome.warnings);
  for (const auto& path : outcome.written) std::cout << path << "\n";
  return 0;
}

int run_train(CLI::App& app, const ConfigFile& cfg, Flags& f) {
  fill_all(app, cfg, f);
  TrainConfig config = train_config(cfg);
  if (app.count("--seed") || cfg.cli.contains("seed")) config.seed = f.seed;
  if (app.count("--steps") || cfg.cli.contains("steps")) config.total_steps = f.steps;
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (f.out.empty()) throw UsageError("train needs --out");
  if (!f.checkpoint.empty() && !fs::exists(f.checkpoint))
    throw UsageError("--checkpoint '" + f.checkpoint + "' does not exist");
  RunOptions opts;
  opts.out_dir = f.out;
  opts.resume_from = f.checkpoint;
  opts.stand_ins_path = (fs::path(f.out) / "stand_ins.fcar").string();
  opts.on_step = [&](const StepMetrics& m) {
    if (m.step % 50 == 0 || m.step + 1 == config.total_steps)
      std::fprintf(stderr, "step %5d  total %.4f  d %.4f  perceptual %.4f  %.0fs\n", m.step, m.g.total, m.d_loss,
                   m.g.perceptual, m.wall_time);
  };
  const RunResult r = run_training(config, opts);
  std::cout << r.final_checkpoint << "\n" << r.metrics_path << "\n";
  return 0;
}

int run_build_corpus(CLI::App& app, const ConfigFile& cfg, Flags& f) {
  fill_all(app, cfg, f);
  const TrainConfig config = train_config(cfg);
  if (f.out.empty()) throw UsageError("build-corpus needs --out");
  const std::uint64_t seed = app.count("--seed") || cfg.cli.contains("seed") ? f.seed : config.corpus_seed;
  const MorphableBasis basis = desk_basis(config.basis_seed);
  std::mt19937_64 rng(seed);
  const SyntheticCorpus corpus = build_synthetic_corpus(basis, config.corpus, rng);
  fs::create_directories(f.out);
  corpus.to_archive().save((fs::path(f.out) / "corpus.fcar").string());
  std::vector<int> counter(corpus.identity_count(), 0);
  for (const CorpusSample& s : corpus.samples) {
    char name[64];
    std::snprintf(name, sizeof name, "id%02d_%03d.png", s.identity, counter[s.identity]++);
    save_face((fs::path(f.out) / name).string(), s);
  }
  std::cout << corpus.samples.size() << " samples in " << f.out << "\n";
  return 0;
}

int run_eval(CLI::App& app, const ConfigFile& cfg, Flags& f) {
  fill_all(app, cfg, f);
  if (f.checkpoint.empty() || !fs::exists(f.checkpoint)) throw UsageError("eval needs an existing --checkpoint");
  ModelBundle model = ModelBundle::load(f.checkpoint);
  std::mt19937_64 rng(model.config.corpus_seed);
  const SyntheticCorpus corpus = build_synthetic_corpus(model.basis, model.config.corpus, rng);
  EvalConfig ec;
  ec.pairs = f.pairs;
  if (app.count("--seed") || cfg.cli.contains("seed")) ec.seed = f.seed;
  if (ec.pairs < 1) throw UsageError("--pairs must be positive");
  const std::string report = evaluate_model(model, corpus, ec).to_json();
  if (!f.out.empty()) {
    std::ofstream(f.out) << report << "\n";
  }
  std::cout << report << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Face swapping and attribute editing driven by morphable-model coefficients"};
  app.require_subcommand(1);
  Flags f;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", f.config, "JSON config file; its \"cli\" object supplies flag defaults");
    cmd->add_option("--seed", f.seed, "Random seed");
    cmd->add_option("--out", f.out, "Output path");
  };
  auto* swap = app.add_subcommand("swap", "Swap attributes of the source onto the target");
  swap->add_option("--source", f.source, "Source face PNG");
  swap->add_option("--target", f.target, "Target face PNG");
  swap->add_option("--attributes", f.attributes, "Comma list of identity,expression,texture,illumination,pose");
  swap->add_option("--checkpoint", f.checkpoint, "Trained checkpoint");
  add_common(swap);

  auto* interp = app.add_subcommand("interpolate", "Row of frames moving attributes from the target to the source");
  interp->add_option("--source", f.source, "Source face PNG");
  interp->add_option("--target", f.target, "Target face PNG");
  interp->add_option("--attributes", f.attributes, "Attributes to interpolate");
  interp->add_option("--steps", f.steps, "Number of frames (at least 2)")->default_val(5);
  interp->add_option("--checkpoint", f.checkpoint, "Trained checkpoint");
  add_common(interp);

  auto* edit = app.add_subcommand("edit-region", "Take region styles from a reference face");
  edit->add_option("--target", f.target, "Face to edit");
  edit->add_option("--reference", f.reference, "Face supplying the region styles");
  edit->add_option("--regions", f.regions, "Comma list of region names");
  edit->add_flag("--progressive", f.progressive, "Apply the regions one after another, one image per step");
  edit->add_option("--checkpoint", f.checkpoint, "Trained checkpoint");
  add_common(edit);

  auto* train = app.add_subcommand("train", "Train on the synthetic corpus");
  train->add_option("--steps", f.steps, "Override total_steps");
  train->add_option("--checkpoint", f.checkpoint, "Resume from this checkpoint");
  add_common(train);

  auto* corpus = app.add_subcommand("build-corpus", "Render the synthetic corpus to PNGs with sidecars");
  add_common(corpus);

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on held-out swaps");
  eval->add_option("--checkpoint", f.checkpoint, "Trained checkpoint");
  eval->add_option("--pairs", f.pairs, "Number of swap pairs")->default_val(50);
  add_common(eval);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const ConfigFile cfg = read_config(f.config);
    CLI::App* cmd = app.get_subcommands().front();
    if (cmd == swap) return run_edit_command(EditOperation::Swap, *cmd, cfg, f);
    if (cmd == interp) return run_edit_command(EditOperation::Interpolate, *cmd, cfg, f);
    if (cmd == edit) return run_edit_command(EditOperation::EditRegion, *cmd, cfg, f);
    if (cmd == train) return run_train(*cmd, cfg, f);
    if (cmd == corpus) return run_build_corpus(*cmd, cfg, f);
    return run_eval(*cmd, cfg, f);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
