#include "waver/sampler.hpp"

#include <cmath>
#include <limits>

#include "waver/error.hpp"
#include "waver/kernels.hpp"
#include "waver/schedules.hpp"

namespace waver {

namespace {

struct FrameView {
    std::size_t C, T, plane;
    std::size_t at(std::size_t c, std::size_t t, std::size_t i) const { return (c * T + t) * plane + i; }
};

FrameView frame_view(const Tensor& x) {
    WAVER_REQUIRE(x.ndim() == 4, DimensionError, "expected [C, T, H, W], got " + shape_str(x.shape()));
    return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
}

}  // namespace

std::string to_string(Guidance g) {
    switch (g) {
        case Guidance::None: return "none";
        case Guidance::Cfg: return "cfg";
        case Guidance::Apg: return "apg";
    }
    return "?";
}

Guidance guidance_from_string(const std::string& s) {
    if (s == "none") return Guidance::None;
    if (s == "cfg") return Guidance::Cfg;
    if (s == "apg") return Guidance::Apg;
    throw ContractError("unknown guidance '" + s + "' (expected none, cfg or apg)");
}

void SamplerConfig::validate() const {
    WAVER_REQUIRE(n_steps >= 1, ContractError, "sampler needs n_steps >= 1");
    WAVER_REQUIRE(shift >= 1.0, DomainError, "sampler shift must be >= 1");
    WAVER_REQUIRE(scale >= 1.0, DomainError, "guidance scale must be >= 1");
    WAVER_REQUIRE(apg_threshold > 0.0, DomainError, "APG threshold must be > 0");
    WAVER_REQUIRE(apg_eta >= 0.0, DomainError, "APG parallel weight must be >= 0");
}

SamplerConfig SamplerConfig::cfg_preset() {
    SamplerConfig c;
    c.guidance = Guidance::Cfg;
    c.scale = 5.0;
    return c;
}

SamplerConfig SamplerConfig::apg_preset() {
    SamplerConfig c;
    c.guidance = Guidance::Apg;
    c.scale = 8.0;
    c.apg_threshold = 27.0;
    c.apg_eta = 0.0;
    return c;
}

ApgDecomposition apg_decompose(const Tensor& delta, const Tensor& v_cond) {
    WAVER_REQUIRE(delta.shape() == v_cond.shape(), DimensionError, "APG inputs differ in shape");
    const auto fv = frame_view(delta);
    const auto d = delta.data(), v = v_cond.data();
    std::vector<double> par(d.size(), 0.0), orth(d.begin(), d.end());
    for (std::size_t t = 0; t < fv.T; ++t) {
        double dv = 0.0, vv = 0.0;
        for (std::size_t c = 0; c < fv.C; ++c)
            for (std::size_t i = 0; i < fv.plane; ++i) {
                const std::size_t k = fv.at(c, t, i);
                dv += d[k] * v[k];
                vv += v[k] * v[k];
            }
        if (vv == 0.0) continue;
        const double coef = dv / vv;
        for (std::size_t c = 0; c < fv.C; ++c)
            for (std::size_t i = 0; i < fv.plane; ++i) {
                const std::size_t k = fv.at(c, t, i);
                par[k] = coef * v[k];
                orth[k] = d[k] - par[k];
            }
    }
    return {Tensor::from(delta.shape(), std::move(par)), Tensor::from(delta.shape(), std::move(orth))};
}

std::vector<double> frame_norms(const Tensor& x) {
    const auto fv = frame_view(x);
    const auto d = x.data();
    std::vector<double> out(fv.T, 0.0);
    for (std::size_t t = 0; t < fv.T; ++t) {
        double s = 0.0;
        for (std::size_t c = 0; c < fv.C; ++c)
            for (std::size_t i = 0; i < fv.plane; ++i) s += d[fv.at(c, t, i)] * d[fv.at(c, t, i)];
        out[t] = std::sqrt(s);
    }
    return out;
}

Tensor guided_velocity(const Tensor& v_cond, const Tensor& v_uncond, const SamplerConfig& cfg, GuidanceStats* stats) {
    WAVER_REQUIRE(v_cond.shape() == v_uncond.shape(), DimensionError, "guided_velocity shapes differ");
    const auto c = v_cond.data(), u = v_uncond.data();
    if (cfg.guidance == Guidance::None || cfg.scale == 1.0) return v_cond.detach();
    std::vector<double> out(c.size());
    if (cfg.guidance == Guidance::Cfg) {
        for (std::size_t i = 0; i < c.size(); ++i) out[i] = u[i] + cfg.scale * (c[i] - u[i]);
        return Tensor::from(v_cond.shape(), std::move(out));
    }
    std::vector<double> delta(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) delta[i] = c[i] - u[i];
    const auto parts = apg_decompose(Tensor::from(v_cond.shape(), delta), v_cond);
    const auto par = parts.parallel.data(), orth = parts.orthogonal.data();
    std::vector<double> upd(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) upd[i] = orth[i] + cfg.apg_eta * par[i];
    const auto fv = frame_view(v_cond);
    const Tensor upd_t = Tensor::from(v_cond.shape(), upd);
    const auto norms = frame_norms(upd_t);
    for (std::size_t t = 0; t < fv.T; ++t) {
        const double factor = norms[t] > cfg.apg_threshold ? cfg.apg_threshold / norms[t] : 1.0;
        for (std::size_t ch = 0; ch < fv.C; ++ch)
            for (std::size_t i = 0; i < fv.plane; ++i) upd[fv.at(ch, t, i)] *= factor;
    }
    if (stats) stats->update_norms = frame_norms(Tensor::from(v_cond.shape(), upd));
    for (std::size_t i = 0; i < c.size(); ++i) out[i] = c[i] + (cfg.scale - 1.0) * upd[i];
    return Tensor::from(v_cond.shape(), std::move(out));
}

std::vector<int> encode_negative(const std::vector<int>& neg_tokens, int vocab_size) {
    for (int tok : neg_tokens)
        WAVER_REQUIRE(tok >= 0 && tok < vocab_size, ContractError,
                      "negative token " + std::to_string(tok) + " outside vocabulary of " + std::to_string(vocab_size));
    return neg_tokens;
}

VelocityFn dit_velocity(const HybridDiT& model) {
    return [&model](const std::vector<DiTSample>& batch) {
        NoGradGuard ng;
        return model.forward(batch).velocity;
    };
}

void impose_condition_frames(Tensor& x, const TaskSample& request) {
    if (request.cond_frames.empty()) return;
    const auto fv = frame_view(x);
    const auto clean = request.latent.data.data();
    auto dst = x.mutable_data();
    for (int t : request.cond_frames) {
        WAVER_REQUIRE(t >= 0 && std::size_t(t) < fv.T, ContractError, "condition frame out of range");
        for (std::size_t c = 0; c < fv.C; ++c)
            for (std::size_t i = 0; i < fv.plane; ++i) dst[fv.at(c, t, i)] = clean[fv.at(c, t, i)];
    }
}

LatentVideo euler_sample(const VelocityFn& model, const TaskSample& request, const SamplerConfig& cfg, Rng& rng,
                         SampleTrace* trace) {
    cfg.validate();
    request.validate();
    const Shape shape = request.latent.data.shape();
    Tensor x = Tensor::zeros(shape);
    for (double& v : x.mutable_data()) v = rng.normal();
    impose_condition_frames(x, request);
    const auto grid = inference_timesteps(cfg.n_steps, cfg.shift);
    const bool guided = cfg.guidance != Guidance::None && cfg.scale != 1.0;
    const std::uint64_t macs0 = kernels::mac_count();
    for (int k = 0; k < cfg.n_steps; ++k) {
        const double t = grid[k], dt = grid[k] - grid[k + 1];
        const Tensor in = build_unified_input(request, LatentVideo(x.detach()));
        std::vector<DiTSample> batch{{in, request.caption_tokens, t}};
        if (guided) batch.push_back({in, cfg.neg_tokens, t});
        const auto v = model(batch);
        WAVER_REQUIRE(v.size() == batch.size() && v[0].shape() == shape, DimensionError,
                      "velocity model returned the wrong shape");
        GuidanceStats stats;
        const Tensor vel = guided ? guided_velocity(v[0], v[1], cfg, &stats) : v[0];
        if (trace) {
            trace->steps.push_back(std::move(stats));
            ++trace->forward_calls;
        }
        auto xd = x.mutable_data();
        const auto vd = vel.data();
        for (std::size_t i = 0; i < xd.size(); ++i) {
            xd[i] += dt * vd[i];
            if (!std::isfinite(xd[i]))
                throw NumericDivergence("non-finite latent at sampling step " + std::to_string(k), k);
        }
        impose_condition_frames(x, request);
    }
    if (trace) trace->macs = kernels::mac_count() - macs0;
    return LatentVideo(x);
}

}  // namespace waver
