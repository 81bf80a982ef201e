#include "waver/schedules.hpp"

#include <cmath>
#include <numbers>

#include "waver/error.hpp"

namespace waver {

using std::numbers::pi;

std::string to_string(SamplerKind k) {
    switch (k) {
        case SamplerKind::LogitNormal: return "logit_normal";
        case SamplerKind::Mode: return "mode";
        case SamplerKind::Uniform: return "uniform";
    }
    return "?";
}

SamplerKind sampler_kind_from_string(const std::string& s) {
    if (s == "logit_normal" || s == "lognorm") return SamplerKind::LogitNormal;
    if (s == "mode") return SamplerKind::Mode;
    if (s == "uniform") return SamplerKind::Uniform;
    throw ContractError("unknown sampler kind '" + s + "'");
}

double mode_scale_max() { return 1.0 / (pi / 2.0 - 1.0); }

void TimestepSampler::validate() const {
    WAVER_REQUIRE(shift >= 1.0, DomainError, "sigma shift must be >= 1, got " + std::to_string(shift));
    if (kind == SamplerKind::LogitNormal)
        WAVER_REQUIRE(s > 0.0, DomainError, "logit-normal scale must be > 0");
    if (kind == SamplerKind::Mode)
        WAVER_REQUIRE(s > kModeScaleMin && s < mode_scale_max(), DomainError,
                      "mode scale " + std::to_string(s) + " leaves f_mode non-monotone");
}

double logit_normal_pdf(double t, double m, double s) {
    WAVER_REQUIRE(t > 0.0 && t < 1.0, DomainError, "logit_normal_pdf needs 0 < t < 1, got " + std::to_string(t));
    WAVER_REQUIRE(s > 0.0, DomainError, "logit-normal scale must be > 0");
    const double z = std::log(t / (1.0 - t)) - m;
    return 1.0 / (s * std::sqrt(2.0 * pi)) / (t * (1.0 - t)) * std::exp(-z * z / (2.0 * s * s));
}

double mode_sample(double u, double s) {
    WAVER_REQUIRE(u >= 0.0 && u <= 1.0, DomainError, "mode_sample needs 0 <= u <= 1");
    const double c = std::cos(pi / 2.0 * u);
    return 1.0 - u - s * (c * c - 1.0 + u);
}

double mode_density(double t, double s) {
    WAVER_REQUIRE(t >= 0.0 && t <= 1.0, DomainError, "mode_density needs 0 <= t <= 1");
    double lo = 0.0, hi = 1.0;  // f is decreasing: f(lo) >= t >= f(hi)
    for (int i = 0; i < 200 && hi - lo > 1e-15; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (mode_sample(mid, s) > t)
            lo = mid;
        else
            hi = mid;
    }
    const double u = 0.5 * (lo + hi);
    const double df = -1.0 - s * (1.0 - pi / 2.0 * std::sin(pi * u));
    return 1.0 / std::abs(df);
}

double apply_shift(double t, double shift) {
    WAVER_REQUIRE(shift >= 1.0, DomainError, "sigma shift must be >= 1");
    return shift * t / (1.0 + (shift - 1.0) * t);
}

double sample_timestep(const TimestepSampler& sampler, Rng& rng) {
    double t = 0.0;
    switch (sampler.kind) {
        case SamplerKind::Uniform: t = rng.uniform_open(); break;
        case SamplerKind::LogitNormal: {
            const double x = sampler.m + sampler.s * rng.normal();
            t = 1.0 / (1.0 + std::exp(-x));
            break;
        }
        case SamplerKind::Mode: t = mode_sample(rng.uniform_open(), sampler.s); break;
    }
    if (sampler.shift_in_training) t = apply_shift(t, sampler.shift);
    return t;
}

std::vector<double> inference_timesteps(int n_steps, double shift) {
    WAVER_REQUIRE(n_steps >= 1, ContractError, "inference_timesteps needs n_steps >= 1");
    std::vector<double> ts(static_cast<std::size_t>(n_steps) + 1);
    for (int k = 0; k <= n_steps; ++k) ts[k] = apply_shift(1.0 - static_cast<double>(k) / n_steps, shift);
    ts.front() = 1.0;
    ts.back() = 0.0;
    return ts;
}

}  // namespace waver
