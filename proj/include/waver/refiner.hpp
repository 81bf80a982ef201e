#pragma once

// Cascade refiner: synthetic degradation of high-resolution videos, the
// refiner's flow-matching pairs, and second-stage inference that upsamples a
// low-resolution first-stage result and flows it back toward clean detail.

#include <optional>

#include "waver/hybrid_dit.hpp"
#include "waver/rng.hpp"
#include "waver/sampler.hpp"
#include "waver/tensor.hpp"

namespace waver {

struct DegradationConfig {
    int down_factor = 3;
    double wd_min = 0.85;
    double wd_max = 0.95;

    void validate() const;
};

// Spatial block mean over factor x factor cells: [C,T,H,W] -> [C,T,H/f,W/f].
Tensor area_downsample(const Tensor& x, int factor);
// Half-pixel-centre bilinear interpolation with edge clamping: [C,T,h,w] -> [C,T,h*f,w*f].
Tensor bilinear_upsample(const Tensor& x, int factor);
// Bilinear upsample followed by a per-block correction that restores each
// block mean, so area_downsample(upsample(y)) == y.
Tensor mean_preserving_upsample(const Tensor& y, int factor);

// Down then up at the same resolution; idempotent.
Tensor pixel_degrade(const Tensor& video, int down_factor);

struct LatentDegradation {
    Tensor x_n;
    double w_d = 0.0;
    Tensor noise;
};

// x_n = (1 - w_d) x + w_d n with w_d ~ U[wd_min, wd_max], n ~ N(0, I).
LatentDegradation latent_degrade(const Tensor& x, Rng& rng, const DegradationConfig& cfg);
LatentDegradation latent_degrade_with(const Tensor& x, double w_d, const Tensor& noise);

struct RefinerPair {
    Tensor x_input;   // w x_n + (1 - w) x0
    Tensor x_target;  // x0 - x_n
    double w = 0.0;
    Tensor x_n;
    double w_d = 0.0;
};

// w ~ U[0,1] unless a timestep sampler is given.
RefinerPair refiner_pair(const Tensor& x0, Rng& rng, const DegradationConfig& cfg,
                         const std::function<double(Rng&)>& w_sampler = {});
RefinerPair refiner_pair_with(const Tensor& x0, const Tensor& x_n, double w_d, double w);

struct RefineOptions {
    int n_steps = 8;
    double shift = 1.0;
    std::optional<double> w_d;  // overrides the sampled degradation weight
};

struct RefineResult {
    Tensor refined;
    Tensor degraded;   // noise-injected refiner input at w = 1
    Tensor upsampled;  // first-stage video at the target resolution
    double w_d = 0.0;
    std::uint64_t macs = 0;
};

// The refiner velocity is queried with DiTSample{x_w, {}, w}.
RefineResult refine(const Tensor& first_stage, const VelocityFn& refiner, const DegradationConfig& cfg,
                    const RefineOptions& opt, Rng& rng);
// Same, checking the first stage against the refiner model's configuration.
RefineResult refine(const Tensor& first_stage, const HybridDiT& refiner, const DegradationConfig& cfg,
                    const RefineOptions& opt, Rng& rng);

// Refinement with a caller-chosen w_d in (0, 1]; large values regenerate content.
RefineResult edit_mode(const Tensor& first_stage, const HybridDiT& refiner, const DegradationConfig& cfg, double w_d,
                       int n_steps, Rng& rng);

// 10 log10(peak^2 / mse); peak defaults to the [-1, 1] data range.
double psnr(const Tensor& a, const Tensor& b, double peak = 2.0);
double pearson_correlation(const Tensor& a, const Tensor& b);

}  // namespace waver
