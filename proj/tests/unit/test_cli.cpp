#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "facectl/editing.hpp"
#include "facectl/image_io.hpp"
#include "tiny_world.hpp"

using namespace facectl;

namespace {

namespace fs = std::filesystem;

const fs::path& workdir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "facectl_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    TrainConfig c = facectl::testing::tiny_config(32);
    c.total_steps = 3;
    c.checkpoint_every = 0;
    std::ofstream(d / "tiny.json") << c.to_json();
    return d;
  }();
  return dir;
}

std::string path(const std::string& name) { return (workdir() / name).string(); }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FACECTL_BINARY) + " " + args + " >" + path("stdout.txt") + " 2>" + path("stderr.txt");
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string stderr_text() {
  std::ifstream in(path("stderr.txt"));
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string bytes_of(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Corpus and a trained checkpoint, built once through the CLI itself.
struct Assets {
  std::string corpus = path("corpus");
  std::string checkpoint = path("run/final.fcar");
  std::string a = path("corpus/id00_000.png");
  std::string b = path("corpus/id01_002.png");
  Assets() {
    EXPECT_EQ(run_cli("build-corpus --config " + path("tiny.json") + " --out " + corpus), 0) << stderr_text();
    EXPECT_EQ(run_cli("train --config " + path("tiny.json") + " --out " + path("run")), 0) << stderr_text();
  }
};

const Assets& assets() {
  static Assets a;
  return a;
}

}  // namespace

TEST(Cli, BuildCorpusWritesImagesWithSidecars) {
  const Assets& as = assets();
  EXPECT_TRUE(fs::exists(as.corpus + "/corpus.fcar"));
  int pngs = 0;
  for (const auto& e : fs::directory_iterator(as.corpus))
    if (e.path().extension() == ".png" && e.path().string().find(".seg.") == std::string::npos) ++pngs;
  EXPECT_EQ(pngs, 12);
  EXPECT_TRUE(fs::exists(sidecar_path(as.a, ".coeffs.json")));
  EXPECT_TRUE(fs::exists(sidecar_path(as.a, ".seg.png")));
}

TEST(Cli, TrainWritesCheckpointMetricsAndConfig) {
  const Assets& as = assets();
  EXPECT_TRUE(fs::exists(as.checkpoint));
  std::ifstream in(path("run/metrics.jsonl"));
  int lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 3);
  EXPECT_TRUE(fs::exists(path("run/config.json")));
}

TEST(Cli, SwapIsDeterministicAndWritesCoefficients) {
  const Assets& as = assets();
  const std::string args = "swap --source " + as.a + " --target " + as.b + " --checkpoint " + as.checkpoint;
  ASSERT_EQ(run_cli(args + " --out " + path("swap1.png")), 0) << stderr_text();
  ASSERT_EQ(run_cli(args + " --out " + path("swap2.png")), 0) << stderr_text();
  EXPECT_EQ(bytes_of(path("swap1.png")), bytes_of(path("swap2.png")));
  const Tensor img = read_png(path("swap1.png"));
  EXPECT_EQ(img.shape(), (Shape{3, 32, 32}));
  const auto coeffs = nlohmann::json::parse(bytes_of(path("swap1.coeffs.json")));
  const auto src = nlohmann::json::parse(bytes_of(sidecar_path(as.a, ".coeffs.json")));
  const auto tgt = nlohmann::json::parse(bytes_of(sidecar_path(as.b, ".coeffs.json")));
  EXPECT_EQ(coeffs["alpha"], src["alpha"]);
  EXPECT_EQ(coeffs["rho"], tgt["rho"]);
}

TEST(Cli, InterpolateWritesAGridWithSeparators) {
  const Assets& as = assets();
  ASSERT_EQ(run_cli("interpolate --source " + as.a + " --target " + as.b + " --attributes pose --steps 4 --checkpoint " +
                    as.checkpoint + " --out " + path("grid.png")),
            0)
      << stderr_text();
  const Tensor grid = read_png(path("grid.png"));
  EXPECT_EQ(grid.shape(), (Shape{3, 32, 4 * 32 + 3 * 2}));
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 32; ++i) EXPECT_EQ(grid(c, i, 32), 1.0);
}

TEST(Cli, EditRegionProgressiveWritesEachStep) {
  const Assets& as = assets();
  ASSERT_EQ(run_cli("edit-region --target " + as.a + " --reference " + as.b +
                    " --regions eyes,lips --progressive --checkpoint " + as.checkpoint + " --out " + path("edit.png")),
            0)
      << stderr_text();
  EXPECT_TRUE(fs::exists(path("edit_1.png")));
  EXPECT_TRUE(fs::exists(path("edit_2.png")));
  EXPECT_EQ(read_png(path("edit.png")).dim(2), 3 * 32 + 2 * 2);
}

TEST(Cli, EvalPrintsAReport) {
  const Assets& as = assets();
  ASSERT_EQ(run_cli("eval --checkpoint " + as.checkpoint + " --pairs 2 --out " + path("eval.json")), 0) << stderr_text();
  const auto report = nlohmann::json::parse(bytes_of(path("eval.json")));
  EXPECT_EQ(report["pairs"], 2);
  EXPECT_TRUE(report.contains("identity_retrieval"));
}

TEST(Cli, ConfigFileSuppliesFlagsAndTheCommandLineWins) {
  const Assets& as = assets();
  nlohmann::json cfg = nlohmann::json::parse(bytes_of(path("tiny.json")));
  cfg["cli"] = {{"source", as.a}, {"target", as.b}, {"checkpoint", as.checkpoint}, {"out", path("from_config.png")}};
  std::ofstream(path("with_cli.json")) << cfg.dump();
  ASSERT_EQ(run_cli("swap --config " + path("with_cli.json")), 0) << stderr_text();
  EXPECT_TRUE(fs::exists(path("from_config.png")));
  ASSERT_EQ(run_cli("swap --config " + path("with_cli.json") + " --out " + path("from_flag.png")), 0) << stderr_text();
  EXPECT_TRUE(fs::exists(path("from_flag.png")));
  EXPECT_EQ(bytes_of(path("from_config.png")), bytes_of(path("from_flag.png")));
}

TEST(Cli, UsageErrorsExitWithOne) {
  const Assets& as = assets();
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("swap --bogus"), 1);
  EXPECT_EQ(run_cli("swap --source " + as.a + " --target " + path("missing.png") + " --checkpoint " + as.checkpoint +
                    " --out " + path("x.png")),
            1);
  EXPECT_NE(stderr_text().find("missing.png"), std::string::npos);
  EXPECT_EQ(run_cli("interpolate --source " + as.a + " --target " + as.b + " --attributes hair --checkpoint " +
                    as.checkpoint + " --out " + path("x.png")),
            1);
  EXPECT_NE(stderr_text().find("expression"), std::string::npos);  // the valid list is printed
  EXPECT_EQ(run_cli("interpolate --source " + as.a + " --target " + as.b + " --attributes pose --steps 1 --checkpoint " +
                    as.checkpoint + " --out " + path("x.png")),
            1);
  EXPECT_EQ(run_cli("edit-region --target " + as.a + " --reference " + as.b + " --regions ears --checkpoint " +
                    as.checkpoint + " --out " + path("x.png")),
            1);
  EXPECT_EQ(run_cli("--help"), 0);
}

TEST(Cli, RuntimeFailuresExitWithTwoAndBadInputsWithOne) {
  const Assets& as = assets();
  std::ofstream(path("broken.fcar")) << "not a checkpoint";
  EXPECT_EQ(run_cli("swap --source " + as.a + " --target " + as.b + " --checkpoint " + path("broken.fcar") + " --out " +
                    path("x.png")),
            2);
  // An image without coefficients or landmarks names the missing sidecar.
  write_png(path("bare.png"), read_png(as.a));
  EXPECT_EQ(run_cli("swap --source " + path("bare.png") + " --target " + as.b + " --checkpoint " + as.checkpoint +
                    " --out " + path("x.png")),
            1);
  EXPECT_NE(stderr_text().find("bare.landmarks.json"), std::string::npos) << stderr_text();
}
