#include <benchmark/benchmark.h>

#include "cme/losses.hpp"
#include "cme/network.hpp"
#include "cme/synthshapes.hpp"

using namespace cme;

static void BM_RenderScene(benchmark::State& state) {
  std::uint64_t seed = 0;
  for (auto _ : state) {
    Scene s = render_scene(seed++, {0, 3, 5});
    benchmark::DoNotOptimize(s.image.values().data());
  }
}
BENCHMARK(BM_RenderScene);

static void BM_EncodeSupport(benchmark::State& state) {
  ModelParams p = ModelParams::init(1);
  SupportItem item = render_support(7, 2);
  for (auto _ : state) {
    Tensor v = encode_support(item, p);
    benchmark::DoNotOptimize(v.values().data());
  }
}
BENCHMARK(BM_EncodeSupport);

static void BM_EncodeQuery(benchmark::State& state) {
  ModelParams p = ModelParams::init(1);
  Scene s = render_scene(9, {0, 1});
  for (auto _ : state) {
    Tensor f = encode_query(s.image, p);
    benchmark::DoNotOptimize(f.values().data());
  }
}
BENCHMARK(BM_EncodeQuery);

static void BM_TrainStepLike(benchmark::State& state) {
  // one base-phase episode: 6 classes x 2 supports, 4 query images,
  // detection + margin losses, full backward
  ModelParams p = ModelParams::init(1);
  const ClassSplit split = default_split(0);
  EpisodeRequest req;
  req.seed = 3;
  req.phase = Phase::base;
  req.support_per_class = 2;
  req.num_query = 4;
  const Episode ep = sample_episode(req, split);
  for (auto _ : state) {
    PrototypeSet protos = build_prototype_set(ep.support, p);
    Tensor det;
    for (const auto& q : ep.query) {
      Tensor f = encode_query(q.image, p);
      std::map<int, GridPrediction> preds;
      for (const auto& [c, mu] : protos.raw_mean) preds[c] = predict_class_branch(f, mu, p);
      auto parts = detection_loss(preds, q);
      Tensor sum_parts = add(add(parts.cls, parts.bbx), parts.obj);
      det = det.defined() ? add(det, sum_parts) : sum_parts;
    }
    det = scale(det, real(1) / static_cast<real>(ep.query.size()));
    auto mrg = max_margin_loss(protos.filtered, protos.filtered_mean);
    Tensor total = add(det, mrg.loss);
    p.zero_grad();
    backward(total);
    benchmark::DoNotOptimize(total.value());
  }
}
BENCHMARK(BM_TrainStepLike);

BENCHMARK_MAIN();
