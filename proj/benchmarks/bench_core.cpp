#include <benchmark/benchmark.h>

#include "fontctl/autograd.hpp"
#include "fontctl/hints.hpp"
#include "fontctl/ocr.hpp"
#include "fontctl/pipeline.hpp"
#include "fontctl/sampler.hpp"
#include "fontctl/trainer.hpp"

using namespace fontctl;

namespace {

TrainConfig toy_config() {
  TrainConfig c;
  c.image_size = 64;
  c.latent_size = 16;
  c.batch_size = 4;
  c.hint_kind = HintKind::kGlyph;
  c.use_ocr_loss = false;
  return c;
}

}  // namespace

static void BM_Conv2dForwardBackward(benchmark::State& state) {
  Rng rng(1);
  const int hw = static_cast<int>(state.range(0));
  const Tensor x = Tensor::randn({4, 32, hw, hw}, rng);
  const Tensor w = Tensor::randn({32, 32, 3, 3}, rng);
  for (auto _ : state) {
    ag::Var wv = ag::parameter(w);
    ag::Var y = ag::conv2d(ag::constant(x), wv, ag::Var(), 1, 1);
    ag::backward(ag::sum(y));
    benchmark::DoNotOptimize(wv.grad().data());
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_CannyEdges(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(2);
  std::vector<double> gray(static_cast<std::size_t>(n) * n);
  for (auto& g : gray) g = rng.uniform();
  for (auto _ : state) benchmark::DoNotOptimize(canny_edges(gray, n, n, CannyParams{}));
}
BENCHMARK(BM_CannyEdges)->Arg(64)->Arg(512)->Unit(benchmark::kMillisecond);

static void BM_OcrLossForwardBackward(benchmark::State& state) {
  RecognizerConfig rc;
  rc.height = 16;
  const Recognizer rec(rc, 3);
  Rng rng(3);
  const Tensor gt = Tensor::uniform({8, 1, 16, 48}, rng, 0.0, 1.0);
  const Tensor pr = Tensor::uniform({8, 1, 16, 48}, rng, 0.0, 1.0);
  const std::vector<int> widths(8, 48), src(8, 0);
  for (auto _ : state) {
    ag::Var p = ag::parameter(pr);
    const OcrLossResult r = ocr_loss({ag::constant(gt), widths, src}, {p, widths, src}, rec);
    ag::backward(r.loss);
    benchmark::DoNotOptimize(p.grad().data());
  }
}
BENCHMARK(BM_OcrLossForwardBackward)->Unit(benchmark::kMillisecond);

static void BM_SampleStep(benchmark::State& state) {
  const DiffusionModel model(toy_config());
  SampleRequest req;
  req.caption = "a card";
  req.batch = static_cast<int>(state.range(0));
  req.steps = 1;
  const HintImage hint(HintKind::kGlyph, 64, 64);
  for (auto _ : state) benchmark::DoNotOptimize(sample_with_hint(req, hint, model));
}
BENCHMARK(BM_SampleStep)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

static void BM_TrainStep(benchmark::State& state) {
  TrainConfig cfg = toy_config();
  Trainer trainer(std::make_unique<DiffusionModel>(cfg), nullptr);
  Rng rng(4);
  std::vector<TrainingExample> ex(4);
  std::vector<const TrainingExample*> batch;
  for (auto& e : ex) {
    e.image = Tensor::uniform({1, 3, 64, 64}, rng, 0.0, 1.0);
    e.hint = Tensor({1, 1, 64, 64}, 0.0);
    e.caption = "a card";
    batch.push_back(&e);
  }
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_step(batch));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
