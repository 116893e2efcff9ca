#include <benchmark/benchmark.h>

#include <random>

#include "facectl/training.hpp"

using namespace facectl;

namespace {

Tensor noise(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(shape);
  for (double& v : t.values()) v = n(rng);
  return t;
}

void BM_Conv3x3Forward(benchmark::State& state) {
  const int C = static_cast<int>(state.range(0)), S = static_cast<int>(state.range(1));
  const Var x = Var::constant(noise({4, C, S, S}, 1));
  const Var w = Var::constant(noise({C, C, 3, 3}, 2));
  const Var b = Var::constant(Tensor({C}));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, b, 1, 1));
  state.SetItemsProcessed(state.iterations() * 4LL * C * C * 9 * S * S);
}
BENCHMARK(BM_Conv3x3Forward)->Args({32, 32})->Args({64, 16})->Args({16, 64})->Unit(benchmark::kMillisecond);

void BM_Conv3x3ForwardBackward(benchmark::State& state) {
  const int C = static_cast<int>(state.range(0)), S = static_cast<int>(state.range(1));
  const Tensor xv = noise({4, C, S, S}, 1), wv = noise({C, C, 3, 3}, 2);
  for (auto _ : state) {
    Var x = Var::parameter(xv), w = Var::parameter(wv);
    backward(ops::sum(ops::conv2d(x, w, Var(), 1, 1)));
    benchmark::DoNotOptimize(w.grad());
  }
}
BENCHMARK(BM_Conv3x3ForwardBackward)->Args({32, 32})->Unit(benchmark::kMillisecond);

void BM_RenderFace(benchmark::State& state) {
  const MorphableBasis basis = desk_basis(7);
  std::mt19937_64 rng(3);
  const FaceCoefficients c = sample_random_face(basis, rng);
  const int S = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(render_face(basis, c, S));
}
BENCHMARK(BM_RenderFace)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_GeneratorForward(benchmark::State& state) {
  const TrainConfig cfg;
  const MorphableBasis basis = desk_basis(cfg.basis_seed);
  CorpusConfig cc = cfg.corpus;
  cc.identities = 2;
  cc.samples_per_identity = 2;
  std::mt19937_64 rng(1);
  const SyntheticCorpus corpus = build_synthetic_corpus(basis, cc, rng);
  const IdentityEncoder id(cfg.stand_ins.identity, 5);
  std::vector<SwapPair> pairs;
  for (int i = 0; i < cfg.batch_size; ++i) pairs.push_back(make_swap(corpus.samples[i % 4], corpus.samples[(i + 2) % 4]));
  const SwapBatch batch = assemble_swap_batch(basis, pairs, id);
  Initializer init(1);
  GeneratorConfig gc = cfg.generator_config();
  gc.num_classes = basis.num_regions;
  Generator gen(gc, init);
  StyleEncoder se(cfg.style_encoder, init);
  NoGradGuard guard;
  const Var styles = se.encode(Var::constant(batch.target_images), batch.target_seg);
  const bool training = state.range(0) != 0;
  for (auto _ : state) benchmark::DoNotOptimize(gen.forward(generator_inputs(batch, styles), training));
}
BENCHMARK(BM_GeneratorForward)->Arg(0)->Unit(benchmark::kMillisecond);

void BM_HistogramMatch(benchmark::State& state) {
  const Tensor target = noise({4, 3, 64, 64}, 1), gen = noise({4, 3, 64, 64}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(histogram_match(target, gen));
}
BENCHMARK(BM_HistogramMatch)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
