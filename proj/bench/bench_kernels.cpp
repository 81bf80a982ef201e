#include <benchmark/benchmark.h>

#include <vector>

#include "waver/hybrid_dit.hpp"
#include "waver/kernels.hpp"
#include "waver/rng.hpp"

using namespace waver;
namespace k = waver::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

template <bool Parallel>
void BM_gemm_nn(benchmark::State& st) {
    const auto n = std::size_t(st.range(0));
    const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
    std::vector<double> c(n * n);
    for (auto _ : st) {
        if constexpr (Parallel) k::parallel::gemm_nn(n, n, n, a.data(), b.data(), c.data(), false);
        else k::serial::gemm_nn(n, n, n, a.data(), b.data(), c.data(), false);
        benchmark::DoNotOptimize(c.data());
    }
    st.SetItemsProcessed(std::int64_t(st.iterations()) * std::int64_t(n * n * n));
}

template <bool Parallel>
void BM_attention(benchmark::State& st) {
    const k::AttentionDims d{std::size_t(st.range(0)), 4, 16};
    const std::size_t w = d.heads * d.head_dim;
    const auto q = random_vec(d.n * w, 1), kk = random_vec(d.n * w, 2), v = random_vec(d.n * w, 3);
    std::vector<double> out(d.n * w), probs(d.heads * d.n * d.n);
    for (auto _ : st) {
        if constexpr (Parallel)
            k::parallel::attention_forward(d, q.data(), kk.data(), v.data(), {}, 0.25, out.data(), probs.data());
        else
            k::serial::attention_forward(d, q.data(), kk.data(), v.data(), {}, 0.25, out.data(), probs.data());
        benchmark::DoNotOptimize(out.data());
    }
}

template <bool Parallel>
void BM_forward(benchmark::State& st) {
    k::BackendScope scope(Parallel ? k::Backend::Parallel : k::Backend::Serial);
    HybridDiTConfig cfg;
    cfg.d_model = 64;
    cfg.head_dim = 16;
    cfg.rope_split = default_rope_split(16);
    HybridDiT model(cfg, 1);
    Rng rng(2);
    Tensor x = Tensor::zeros({7, 4, 16, 16});
    for (double& v : x.mutable_data()) v = rng.normal();
    NoGradGuard g;
    for (auto _ : st) benchmark::DoNotOptimize(model.forward_one(x, {1, 5, 9}, 0.5));
}

}  // namespace

BENCHMARK(BM_gemm_nn<false>)->Name("gemm_nn/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_gemm_nn<true>)->Name("gemm_nn/openmp")->Arg(64)->Arg(256);
BENCHMARK(BM_attention<false>)->Name("attention/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_attention<true>)->Name("attention/openmp")->Arg(64)->Arg(256);
BENCHMARK(BM_forward<false>)->Name("dit_forward/serial");
BENCHMARK(BM_forward<true>)->Name("dit_forward/openmp");

BENCHMARK_MAIN();
