#pragma once

#include "waver/hybrid_dit.hpp"

namespace waver::testing {

// Small model sized for fast tests: 2x2 spatial patches on 4x4x4 latents.
inline HybridDiTConfig tiny_config(int m = 1, int n = 1) {
    HybridDiTConfig c;
    c.m_dual = m;
    c.n_single = n;
    c.d_model = 16;
    c.n_heads = 2;
    c.head_dim = 8;
    c.rope_split = {2, 2, 4};
    c.in_channels = 7;
    c.out_channels = 3;
    c.patch = {1, 2, 2};
    c.mlp_hidden = 24;
    c.time_freq_dim = 8;
    c.max_text_len = 8;
    c.max_grid = {4, 4, 4};
    return c;
}

// Adds noise to every parameter so zero-initialized gates and modulation
// stop hiding the blocks.
inline void perturb(ParamStore& params, Rng& rng, double scale = 0.2) {
    for (const auto& p : params.list()) {
        Tensor alias = p.tensor;
        for (double& v : alias.mutable_data()) v += scale * rng.normal();
    }
}

inline Tensor random_input(Rng& rng, int c, int t, int h, int w) {
    Tensor x = Tensor::zeros({std::size_t(c), std::size_t(t), std::size_t(h), std::size_t(w)});
    for (double& v : x.mutable_data()) v = rng.normal();
    return x;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace waver::testing
