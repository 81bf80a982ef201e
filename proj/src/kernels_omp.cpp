#include <omp.h>

#include <cstdint>

#include "kernel_rows.hpp"

namespace waver::kernels::parallel {

namespace {
// Below this many MACs the fork/join overhead dominates.
constexpr std::size_t kParallelThreshold = 1 << 14;

using Index = std::int64_t;
}  // namespace

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate) {
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
    for (Index i = 0; i < static_cast<Index>(m); ++i) rows::gemm_nn_row(i, k, n, a, b, c, accumulate);
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
    for (Index i = 0; i < static_cast<Index>(m); ++i) rows::gemm_nt_row(i, k, n, a, b, c);
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
    for (Index i = 0; i < static_cast<Index>(m); ++i) rows::gemm_tn_row(i, m, k, n, a, b, c);
}

void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v, GroupIds groups,
                       double scale, double* out, double* probs) {
    const Index total = static_cast<Index>(d.heads * d.n);
#pragma omp parallel for schedule(static) if (d.n * d.n * d.heads * d.head_dim > kParallelThreshold)
    for (Index hi = 0; hi < total; ++hi)
        rows::attention_forward_row(d, hi / d.n, hi % d.n, q, k, v, groups, scale, out, probs);
}

void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, GroupIds groups, double scale, double* dq,
                        double* dk, double* dv, double* scratch) {
    const Index total = static_cast<Index>(d.heads * d.n);
    const bool go = d.n * d.n * d.heads * d.head_dim > kParallelThreshold;
#pragma omp parallel if (go)
    {
#pragma omp for schedule(static)
        for (Index hi = 0; hi < total; ++hi)
            rows::attention_backward_query_row(d, hi / d.n, hi % d.n, k, v, probs, dout, groups, scale, dq, scratch);
#pragma omp for schedule(static)
        for (Index hj = 0; hj < total; ++hj)
            rows::attention_backward_key_row(d, hj / d.n, hj % d.n, q, probs, dout, groups, scale, dk, dv, scratch);
    }
}

}  // namespace waver::kernels::parallel
