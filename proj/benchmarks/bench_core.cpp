#include <benchmark/benchmark.h>

#include <random>

#include "tremorank/network.hpp"
#include "tremorank/optical_flow.hpp"
#include "tremorank/ordinal.hpp"
#include "tremorank/synth.hpp"

using namespace tremorank;

namespace {

std::vector<std::vector<float>> inputs(const NetConfig& c, std::size_t n) {
    std::mt19937_64 rng(1);
    std::normal_distribution<float> nd;
    std::vector<std::vector<float>> in(n, std::vector<float>(c.input_shape().size()));
    for (auto& v : in) {
        for (auto& x : v) x = nd(rng);
    }
    return in;
}

FrameGray noise_frame(int side, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u;
    FrameGray f(side, side);
    for (auto& x : f.intensities) x = u(rng);
    return f;
}

}  // namespace

static void BM_ForwardReduced(benchmark::State& st) {
    const auto cfg = NetConfig::reduced(static_cast<int>(st.range(0)));
    const auto p = BackboneParams<float>::initialized(cfg, 1);
    const auto in = inputs(cfg, 8);
    for (auto _ : st) benchmark::DoNotOptimize(forward(p, in, Mode::train));
    st.SetItemsProcessed(st.iterations() * 8);
}
BENCHMARK(BM_ForwardReduced)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

static void BM_TrainStepReduced(benchmark::State& st) {
    const auto cfg = NetConfig::reduced(static_cast<int>(st.range(0)));
    const auto p = BackboneParams<float>::initialized(cfg, 1);
    const auto in = inputs(cfg, 8);
    std::vector<std::vector<double>> up(8, std::vector<double>(8, 0.1));
    for (auto _ : st) {
        const auto c = forward(p, in, Mode::train);
        benchmark::DoNotOptimize(backward(p, c, up));
    }
    st.SetItemsProcessed(st.iterations() * 8);
}
BENCHMARK(BM_TrainStepReduced)->Arg(8)->Unit(benchmark::kMillisecond);

static void BM_ForwardFull(benchmark::State& st) {
    const auto cfg = NetConfig::full();
    const auto p = BackboneParams<float>::initialized(cfg, 1);
    const auto in = inputs(cfg, 1);
    for (auto _ : st) benchmark::DoNotOptimize(forward(p, in, Mode::infer));
}
BENCHMARK(BM_ForwardFull)->Unit(benchmark::kMillisecond)->Iterations(3);

static void BM_HornSchunck(benchmark::State& st) {
    const int side = static_cast<int>(st.range(0));
    const auto a = noise_frame(side, 1), b = noise_frame(side, 2);
    for (auto _ : st) benchmark::DoNotOptimize(horn_schunck(a, b, 1.0, 100));
    st.SetItemsProcessed(st.iterations() * side * side * 100);
}
BENCHMARK(BM_HornSchunck)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

static void BM_ClipToTensor32(benchmark::State& st) {
    SyntheticClipSpec s;
    s.amplitude = 4;
    const auto frames = render_clip(s, 33);
    FlowOptions o;
    o.extent = 32;
    for (auto _ : st) benchmark::DoNotOptimize(clip_to_tensor(frames, o));
}
BENCHMARK(BM_ClipToTensor32)->Unit(benchmark::kMillisecond);

static void BM_CoralLoss(benchmark::State& st) {
    std::vector<double> z{2, 1, 0.5, 0, -0.5, -1, -2, -3};
    const auto lab = encode_label(4, RankScale(9));
    const auto w = TaskWeights::uniform(8);
    for (auto _ : st) {
        benchmark::DoNotOptimize(coral_loss(z, lab, w));
        benchmark::DoNotOptimize(coral_loss_gradient(z, lab, w));
    }
}
BENCHMARK(BM_CoralLoss);
BENCHMARK_MAIN();
