#pragma once

// Timestep distributions for flow-matching training and the shifted grid used
// at inference. Convention: t = 0 is clean data, t = 1 is pure noise.

#include <string>
#include <vector>

#include "waver/rng.hpp"

namespace waver {

enum class SamplerKind { LogitNormal, Mode, Uniform };

std::string to_string(SamplerKind k);
SamplerKind sampler_kind_from_string(const std::string& s);

struct TimestepSampler {
    SamplerKind kind = SamplerKind::Uniform;
    double m = 0.0;      // logit-normal location
    double s = 1.0;      // logit-normal scale, or mode scale
    double shift = 1.0;  // sigma shift, >= 1
    bool shift_in_training = true;

    static TimestepSampler logit_normal(double m, double s, double shift = 1.0) {
        return {SamplerKind::LogitNormal, m, s, shift, true};
    }
    static TimestepSampler mode(double s, double shift = 1.0) { return {SamplerKind::Mode, 0.0, s, shift, true}; }
    static TimestepSampler uniform(double shift = 1.0) { return {SamplerKind::Uniform, 0.0, 1.0, shift, true}; }

    // Throws DomainError when parameters are out of range.
    void validate() const;
};

// Scale range over which f_mode stays a decreasing bijection of [0,1]:
// f'(u) = -1 - s + s*(pi/2)*sin(pi*u) < 0 for all u.
inline constexpr double kModeScaleMin = -1.0;
double mode_scale_max();  // 1 / (pi/2 - 1)

double logit_normal_pdf(double t, double m, double s);

// f_mode(u; s) = 1 - u - s * (cos^2(pi*u/2) - 1 + u)
double mode_sample(double u, double s);

// Density of t = f_mode(U; s), U ~ Uniform[0,1], via the inverse function.
double mode_density(double t, double s);

// t' = shift*t / (1 + (shift-1)*t)
double apply_shift(double t, double shift);

// One training timestep in (0,1).
double sample_timestep(const TimestepSampler& sampler, Rng& rng);

// n_steps+1 strictly decreasing values from exactly 1 to exactly 0.
std::vector<double> inference_timesteps(int n_steps, double shift);

}  // namespace waver
