#pragma once

// Per-row kernel bodies shared by the serial and OpenMP backends. Keeping a
// single definition is what makes the two backends bit-identical.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

#include "waver/kernels.hpp"

namespace waver::kernels::rows {

inline bool allowed(GroupIds g, std::size_t i, std::size_t j) { return g.empty() || g[i] == g[j]; }

inline double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

inline void gemm_nn_row(std::size_t i, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
                        bool accumulate) {
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        const double* brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

inline void gemm_nt_row(std::size_t i, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) crow[j] += dot(arow, b + j * k, k);
}

inline void gemm_tn_row(std::size_t i, std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                        double* c) {
    double* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = a[kk * m + i];
        const double* brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

inline void attention_forward_row(const AttentionDims& d, std::size_t h, std::size_t i, const double* q,
                                  const double* k, const double* v, GroupIds groups, double scale, double* out,
                                  double* probs) {
    const std::size_t width = d.heads * d.head_dim;
    const std::size_t off = h * d.head_dim;
    double* prow = probs + (h * d.n + i) * d.n;
    const double* qi = q + i * width + off;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d.n; ++j) {
        if (!allowed(groups, i, j)) {
            prow[j] = 0.0;
            continue;
        }
        prow[j] = scale * dot(qi, k + j * width + off, d.head_dim);
        mx = std::max(mx, prow[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < d.n; ++j) {
        if (!allowed(groups, i, j)) continue;
        prow[j] = std::exp(prow[j] - mx);
        sum += prow[j];
    }
    const double inv = 1.0 / sum;
    double* oi = out + i * width + off;
    std::fill(oi, oi + d.head_dim, 0.0);
    for (std::size_t j = 0; j < d.n; ++j) {
        if (!allowed(groups, i, j)) continue;
        prow[j] *= inv;
        const double p = prow[j];
        const double* vj = v + j * width + off;
        for (std::size_t e = 0; e < d.head_dim; ++e) oi[e] += p * vj[e];
    }
}

// dS row and dQ row for query i of head h.
inline void attention_backward_query_row(const AttentionDims& d, std::size_t h, std::size_t i, const double* k,
                                         const double* v, const double* probs, const double* dout, GroupIds groups,
                                         double scale, double* dq, double* scratch) {
    const std::size_t width = d.heads * d.head_dim;
    const std::size_t off = h * d.head_dim;
    const double* prow = probs + (h * d.n + i) * d.n;
    double* srow = scratch + (h * d.n + i) * d.n;
    const double* doi = dout + i * width + off;
    double rowdot = 0.0;
    for (std::size_t j = 0; j < d.n; ++j) {
        if (!allowed(groups, i, j)) {
            srow[j] = 0.0;
            continue;
        }
        srow[j] = dot(doi, v + j * width + off, d.head_dim);
        rowdot += prow[j] * srow[j];
    }
    double* dqi = dq + i * width + off;
    for (std::size_t j = 0; j < d.n; ++j) {
        if (!allowed(groups, i, j)) continue;
        srow[j] = prow[j] * (srow[j] - rowdot);
        const double s = scale * srow[j];
        const double* kj = k + j * width + off;
        for (std::size_t e = 0; e < d.head_dim; ++e) dqi[e] += s * kj[e];
    }
}

// dK row and dV row for key j of head h; needs the full dS matrix.
inline void attention_backward_key_row(const AttentionDims& d, std::size_t h, std::size_t j, const double* q,
                                       const double* probs, const double* dout, GroupIds groups, double scale,
                                       double* dk, double* dv, const double* scratch) {
    const std::size_t width = d.heads * d.head_dim;
    const std::size_t off = h * d.head_dim;
    double* dkj = dk + j * width + off;
    double* dvj = dv + j * width + off;
    for (std::size_t i = 0; i < d.n; ++i) {
        if (!allowed(groups, i, j)) continue;
        const std::size_t idx = (h * d.n + i) * d.n + j;
        const double s = scale * scratch[idx];
        const double p = probs[idx];
        const double* qi = q + i * width + off;
        const double* doi = dout + i * width + off;
        for (std::size_t e = 0; e < d.head_dim; ++e) {
            dkj[e] += s * qi[e];
            dvj[e] += p * doi[e];
        }
    }
}

}  // namespace waver::kernels::rows
