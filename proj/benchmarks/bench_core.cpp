#include <benchmark/benchmark.h>

#include "dcama/attention.hpp"
#include "dcama/evaluation.hpp"
#include "dcama/pipeline.hpp"
#include "dcama/rng.hpp"

using namespace dcama;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

EpisodeFeatures make_features(const ModelConfig& cfg, Rng& rng, int shots) {
  auto image = [&] {
    Tensor img({cfg.input_h, cfg.input_w, 3});
    for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<float>(rng.uniform());
    return img;
  };
  EpisodeFeatures f;
  f.input_h = cfg.input_h;
  f.input_w = cfg.input_w;
  f.query = extract_features(image(), cfg.backbone);
  for (int j = 0; j < shots; ++j) {
    f.supports.push_back(extract_features(image(), cfg.backbone));
    Tensor m({cfg.input_h, cfg.input_w, 1});
    for (std::int64_t i = 0; i < m.numel(); ++i) m[i] = rng.uniform() < 0.3 ? 1.0f : 0.0f;
    f.support_masks.push_back(m);
  }
  return f;
}

}  // namespace

static void BM_matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1);
  Tensor a = random_tensor({n, n}, rng);
  Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(256);

static void BM_conv2d(benchmark::State& state) {
  Rng rng(2);
  Tensor x = random_tensor({24, 24, 128}, rng);
  Tensor w = random_tensor({3, 3, 128, 128}, rng, -0.1f, 0.1f);
  Tensor b({128});
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, 1, 1));
}
BENCHMARK(BM_conv2d);

static void BM_sdpa_tokens(benchmark::State& state) {
  const int ms = static_cast<int>(state.range(0));
  Rng rng(3);
  Tensor q = random_tensor({144, 16}, rng);
  Tensor k = random_tensor({ms, 16}, rng);
  Tensor v = random_tensor({ms, 1}, rng, 0.0f, 1.0f);
  for (auto _ : state) benchmark::DoNotOptimize(scaled_dot_product_attention(q, k, v));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(ms) * 144);
}
BENCHMARK(BM_sdpa_tokens)->Arg(144)->Arg(288)->Arg(720);

static void BM_forward_by_shots(benchmark::State& state) {
  ModelConfig cfg;  // default 96x96
  Rng rng(4);
  ModelWeights w = init_weights(cfg, 5);
  EpisodeFeatures feats = make_features(cfg, rng, static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(infer(w, feats, cfg));
}
BENCHMARK(BM_forward_by_shots)->DenseRange(1, 5)->Unit(benchmark::kMillisecond);

static void BM_extract_features(benchmark::State& state) {
  ModelConfig cfg;
  Rng rng(6);
  Tensor img({cfg.input_h, cfg.input_w, 3});
  for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<float>(rng.uniform());
  for (auto _ : state) benchmark::DoNotOptimize(extract_features(img, cfg.backbone));
}
BENCHMARK(BM_extract_features)->Unit(benchmark::kMillisecond);

static void BM_train_step(benchmark::State& state) {
  ModelConfig cfg;
  Rng rng(7);
  TrainState st = make_train_state(cfg, 8);
  EpisodeFeatures feats = make_features(cfg, rng, 1);
  Tensor mask = feats.support_masks[0];
  for (auto _ : state) benchmark::DoNotOptimize(train_step(st, feats, mask, cfg));
}
BENCHMARK(BM_train_step)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
