// Microbenchmarks: recurrent scan throughput per mixer kind, the chunked
// fast path against the sequential scan, and raw GEMM throughput.

#include <benchmark/benchmark.h>

#include <vector>

#include "lnz/mixer.hpp"
#include "lnz/ops.hpp"
#include "lnz/tape.hpp"

using namespace lnz;

namespace {

mixer::MixerConfig cfg_for(mixer::Kind kind) {
    mixer::MixerConfig cfg;
    cfg.kind = kind;
    cfg.n_heads = 4;
    cfg.d_k = cfg.d_v = 32;
    return cfg;
}

struct Inputs {
    std::vector<mixer::ProjectedToken> tokens;
    std::vector<mixer::GateSignals> gates;
};

Inputs make_inputs(const mixer::MixerConfig& cfg, int64_t T) {
    Rng rng(123);
    Inputs in;
    const int H = cfg.n_heads, dk = cfg.d_k, dv = cfg.d_v;
    for (int64_t t = 0; t < T; ++t) {
        mixer::ProjectedToken tok;
        tok.q.resize(static_cast<size_t>(H * dk));
        tok.k.resize(static_cast<size_t>(H * dk));
        tok.v.resize(static_cast<size_t>(H * dv));
        for (float& x : tok.q) x = rng.normal(0, 0.5f);
        for (float& x : tok.k) x = rng.normal(0, 0.5f);
        for (float& x : tok.v) x = rng.normal(0, 0.5f);
        mixer::GateSignals g;
        if (mixer::has_channel_alpha(cfg.kind)) g.alpha.assign(static_cast<size_t>(H * dk), 0.97f);
        if (mixer::has_scalar_alpha(cfg.kind)) g.alpha.assign(static_cast<size_t>(H), 0.98f);
        if (mixer::has_beta(cfg.kind)) g.beta.assign(static_cast<size_t>(H), 0.5f);
        if (mixer::has_fi_gates(cfg.kind)) {
            g.f_pre.assign(static_cast<size_t>(H), 0.f);
            g.i_pre.assign(static_cast<size_t>(H), 0.f);
        }
        in.tokens.push_back(std::move(tok));
        in.gates.push_back(std::move(g));
    }
    return in;
}

void bm_scan(benchmark::State& state, mixer::Kind kind) {
    const int64_t T = state.range(0);
    mixer::MixerConfig cfg = cfg_for(kind);
    Inputs in = make_inputs(cfg, T);
    std::vector<float> out;
    for (auto _ : state) {
        mixer::MixerState s = mixer::MixerState::zeros(cfg);
        mixer::scan_inplace(cfg, in.tokens, in.gates, s, out);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * T);
}

void bm_scan_chunked(benchmark::State& state, mixer::Kind kind) {
    const int64_t T = state.range(0);
    const int chunk = static_cast<int>(state.range(1));
    mixer::MixerConfig cfg = cfg_for(kind);
    Inputs in = make_inputs(cfg, T);
    std::vector<float> out;
    for (auto _ : state) {
        mixer::MixerState s = mixer::MixerState::zeros(cfg);
        mixer::scan_chunked(cfg, in.tokens, in.gates, s, out, chunk);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * T);
}

void bm_gemm(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(7);
    Tensor a = Tensor::randn({n, n}, rng);
    Tensor b = Tensor::randn({n, n}, rng);
    for (auto _ : state) {
        Tensor c = ops::matmul(a, b);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

}  // namespace

BENCHMARK_CAPTURE(bm_scan, linear_attn, mixer::Kind::LinearAttn)->Arg(512)->Arg(2048);
BENCHMARK_CAPTURE(bm_scan, retnet, mixer::Kind::RetNet)->Arg(512)->Arg(2048);
BENCHMARK_CAPTURE(bm_scan, gla, mixer::Kind::Gla)->Arg(512)->Arg(2048);
BENCHMARK_CAPTURE(bm_scan, mlstm, mixer::Kind::MLstm)->Arg(512)->Arg(2048);
BENCHMARK_CAPTURE(bm_scan, deltanet, mixer::Kind::DeltaNet)->Arg(512)->Arg(2048);
BENCHMARK_CAPTURE(bm_scan, gated_deltanet, mixer::Kind::GatedDeltaNet)->Arg(512)->Arg(2048);
BENCHMARK_CAPTURE(bm_scan, kda, mixer::Kind::Kda)->Arg(512)->Arg(2048);

BENCHMARK_CAPTURE(bm_scan_chunked, linear_attn, mixer::Kind::LinearAttn)
    ->Args({512, 16})
    ->Args({2048, 64});
BENCHMARK_CAPTURE(bm_scan_chunked, retnet, mixer::Kind::RetNet)->Args({512, 16})->Args({2048, 64});
BENCHMARK_CAPTURE(bm_scan_chunked, gla, mixer::Kind::Gla)->Args({512, 16})->Args({2048, 64});

BENCHMARK(bm_gemm)->Arg(128)->Arg(512);

BENCHMARK_MAIN();
