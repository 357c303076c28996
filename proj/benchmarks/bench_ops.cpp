#include <benchmark/benchmark.h>

#include "ucam/data.hpp"
#include "ucam/model.hpp"
#include "ucam/ops.hpp"
#include "ucam/random.hpp"
#include "ucam/training.hpp"

using namespace ucam;

namespace {

Tensorf random_tensor(Shape shape, std::uint64_t seed) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return Tensorf::from(std::move(shape), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Arg(512);

void BM_Conv2d(benchmark::State& state) {
    const auto c = static_cast<std::size_t>(state.range(0));
    const auto x = random_tensor({4, c, 40, 100}, 3), w = random_tensor({c, c, 3, 3}, 4);
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, 1, 1, 1));
}
BENCHMARK(BM_Conv2d)->Arg(4)->Arg(16);

void BM_DepthwiseConv(benchmark::State& state) {
    const auto x = random_tensor({4, 256, 200}, 5), w = random_tensor({256, 32}, 6);
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(depthwise_conv1d(x, w, 16));
}
BENCHMARK(BM_DepthwiseConv);

struct ModelFixture {
    AcousticModelConfig cfg = AcousticModelConfig::micro();
    ModelParams<float> params = init_model_params<float>(cfg, 1);
    Batch batch;

    ModelFixture() {
        SynthConfig data;
        data.utterances = 8;
        data.min_frames = 64;
        data.max_frames = 96;
        batch = make_batch(synth_corpus(data).utterances);
    }
};

void BM_ModelForward(benchmark::State& state) {
    ModelFixture f;
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(model_forward(f.batch, f.params, f.cfg, ForwardOptions{}));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.batch.valid_frames()));
}
BENCHMARK(BM_ModelForward)->Unit(benchmark::kMillisecond);

void BM_ModelTrainStep(benchmark::State& state) {
    ModelFixture f;
    const auto mask = f.batch.mask();
    for (auto _ : state) {
        auto loss = masked_cross_entropy(model_forward(f.batch, f.params, f.cfg, ForwardOptions{}), f.batch.labels, mask);
        backward(loss);
        f.params.zero_grad();
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.batch.valid_frames()));
}
BENCHMARK(BM_ModelTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
