#pragma once

#include <cmath>
#include <vector>

#include "waver/objectives.hpp"

namespace waver::testing {

// Scalar-loop oracle: pool, project, cosine per position.
inline double alignment_oracle(const Tensor& hidden, Dim3 g, const Tensor& feats, const AlignmentProjector& proj,
                               const AlignmentConfig& cfg) {
    const int td = cfg.temporal_ds, sd = cfg.spatial_ds;
    const Dim3 f{g.t / td, g.h / sd, g.w / sd};
    const std::size_t d = hidden.dim(1), df = feats.dim(1);
    const auto& P = proj.params();
    const auto w1 = P.get("align.fc1.weight"), b1 = P.get("align.fc1.bias");
    const auto w2 = P.get("align.fc2.weight"), b2 = P.get("align.fc2.bias");
    const std::size_t hid = w1.dim(1);
    double total = 0.0;
    for (int ft = 0; ft < f.t; ++ft)
        for (int fh = 0; fh < f.h; ++fh)
            for (int fw = 0; fw < f.w; ++fw) {
                std::vector<double> pooled(d, 0.0);
                for (int a = 0; a < td; ++a)
                    for (int b = 0; b < sd; ++b)
                        for (int c = 0; c < sd; ++c) {
                            const int row = ((ft * td + a) * g.h + fh * sd + b) * g.w + fw * sd + c;
                            for (std::size_t e = 0; e < d; ++e) pooled[e] += hidden.at(row * d + e) / (td * sd * sd);
                        }
                std::vector<double> h1(hid), out(df);
                for (std::size_t j = 0; j < hid; ++j) {
                    double s = b1.at(j);
                    for (std::size_t e = 0; e < d; ++e) s += pooled[e] * w1.at(e * hid + j);
                    h1[j] = s / (1.0 + std::exp(-s));
                }
                for (std::size_t j = 0; j < df; ++j) {
                    double s = b2.at(j);
                    for (std::size_t e = 0; e < hid; ++e) s += h1[e] * w2.at(e * df + j);
                    out[j] = s;
                }
                const std::size_t pos = std::size_t((ft * f.h + fh) * f.w + fw);
                double dot = 0, na = 0, nb = 0;
                for (std::size_t j = 0; j < df; ++j) {
                    const double fv = feats.at(pos * df + j);
                    dot += out[j] * fv;
                    na += out[j] * out[j];
                    nb += fv * fv;
                }
                total += dot / std::sqrt(na * nb);
            }
    return -total / f.volume();
}


}  // namespace waver::testing
