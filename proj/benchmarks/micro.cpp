#include <benchmark/benchmark.h>

#include "tokenrank/clip.hpp"
#include "tokenrank/golden.hpp"
#include "tokenrank/nn/ops.hpp"
#include "tokenrank/predictor.hpp"
#include "tokenrank/pruning.hpp"

namespace {

using namespace tokenrank;
using nn::SeededRng;
using nn::Tensor;

// default experiment geometry: 8x8 grid of 4x4 patches
clip::ModelConfig model_config() {
  clip::ModelConfig m;
  m.vision.patches = 64;
  m.vision.patch_dim = 48;
  m.text.class_names = data::default_class_names(8);
  return m;
}

const clip::ClipModel& model() {
  static const clip::ClipModel m = clip::ClipModel::init(model_config(), SeededRng(1));
  return m;
}

data::TokenGrid tokens() {
  data::TokenGrid g;
  g.tokens = SeededRng(2).normal_tensor({64, 48}, 1.0F);
  g.grid_side = 8;
  return g;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = SeededRng(1).normal_tensor({n, n}, 1.0F);
  const Tensor b = SeededRng(2).normal_tensor({n, n}, 1.0F);
  for (auto _ : state) benchmark::DoNotOptimize(nn::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_Attention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const nn::Var qkv = nn::Var::constant(SeededRng(3).normal_tensor({n, 3 * 64}, 1.0F));
  nn::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(nn::attention(qkv, 1, n, 4, false));
}
BENCHMARK(BM_Attention)->Arg(17)->Arg(65)->Arg(197);

void BM_EncodeImage(benchmark::State& state) {
  const auto keep = static_cast<double>(state.range(0)) / 100.0;
  const auto g = tokens();
  const auto schedule = pruning::make_schedule(keep, {2, 3, 4, 5}, 64, pruning::Strategy::kRandom);
  const SeededRng rng(4);
  pruning::ScoreSources src;
  src.rng = &rng;
  const auto plan = pruning::make_removal_plan(schedule, src);
  for (auto _ : state) benchmark::DoNotOptimize(clip::encode_image(model(), g, plan));
}
BENCHMARK(BM_EncodeImage)->Arg(100)->Arg(70)->Arg(50)->Unit(benchmark::kMicrosecond);

void BM_GoldenScores(benchmark::State& state) {
  const auto g = tokens();
  const auto classes = clip::encode_text(model());
  golden::GoldenConfig cfg;
  cfg.batched = state.range(0) != 0;
  for (auto _ : state) benchmark::DoNotOptimize(golden::golden_scores(model(), classes, g, cfg));
}
BENCHMARK(BM_GoldenScores)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_PredictorScore(benchmark::State& state) {
  const auto arch = static_cast<predictor::ArchKind>(state.range(0));
  const auto p = predictor::Predictor::init(arch, 64, 64, 2, SeededRng(5));
  const Tensor z = SeededRng(6).normal_tensor({64, 64}, 1.0F);
  std::vector<std::size_t> ids(64);
  for (std::size_t i = 0; i < 64; ++i) ids[i] = i;
  for (auto _ : state) benchmark::DoNotOptimize(p.score(z, ids));
  state.SetLabel(predictor::to_string(arch));
}
BENCHMARK(BM_PredictorScore)->DenseRange(0, 2)->Unit(benchmark::kMicrosecond);

void BM_CountFlops(benchmark::State& state) {
  const auto schedule = pruning::make_schedule(0.5, {2, 3, 4, 5}, 64);
  for (auto _ : state) benchmark::DoNotOptimize(pruning::count_flops(model().config.vision, 32, schedule));
}
BENCHMARK(BM_CountFlops);

}  // namespace
