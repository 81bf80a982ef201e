#include "kernel_rows.hpp"

namespace waver::kernels::serial {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) rows::gemm_nn_row(i, k, n, a, b, c, accumulate);
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) rows::gemm_nt_row(i, k, n, a, b, c);
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) rows::gemm_tn_row(i, m, k, n, a, b, c);
}

void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v, GroupIds groups,
                       double scale, double* out, double* probs) {
    for (std::size_t h = 0; h < d.heads; ++h)
        for (std::size_t i = 0; i < d.n; ++i) rows::attention_forward_row(d, h, i, q, k, v, groups, scale, out, probs);
}

void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, GroupIds groups, double scale, double* dq,
                        double* dk, double* dv, double* scratch) {
    for (std::size_t h = 0; h < d.heads; ++h)
        for (std::size_t i = 0; i < d.n; ++i)
            rows::attention_backward_query_row(d, h, i, k, v, probs, dout, groups, scale, dq, scratch);
    for (std::size_t h = 0; h < d.heads; ++h)
        for (std::size_t j = 0; j < d.n; ++j)
            rows::attention_backward_key_row(d, h, j, q, probs, dout, groups, scale, dk, dv, scratch);
}

}  // namespace waver::kernels::serial
