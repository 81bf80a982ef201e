#include "waver/refiner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "waver/error.hpp"
#include "waver/kernels.hpp"
#include "waver/schedules.hpp"

namespace waver {

namespace {

void require_video(const Tensor& x, const char* what) {
    WAVER_REQUIRE(x.ndim() == 4, DimensionError, std::string(what) + " expects [C, T, H, W], got " + shape_str(x.shape()));
}

Tensor normal_like(const Tensor& x, Rng& rng) {
    Tensor n = Tensor::zeros(x.shape());
    for (double& v : n.mutable_data()) v = rng.normal();
    return n;
}

}  // namespace

void DegradationConfig::validate() const {
    WAVER_REQUIRE(down_factor >= 1, ContractError, "down_factor must be >= 1");
    WAVER_REQUIRE(0.0 <= wd_min && wd_min <= wd_max && wd_max <= 1.0, DomainError,
                  "degradation weights need 0 <= wd_min <= wd_max <= 1");
}

Tensor area_downsample(const Tensor& x, int f) {
    require_video(x, "area_downsample");
    const std::size_t C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3), F = std::size_t(f);
    WAVER_REQUIRE(f >= 1 && H % F == 0 && W % F == 0, ContractError,
                  "spatial dims " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by " +
                      std::to_string(f));
    const std::size_t h = H / F, w = W / F;
    const auto d = x.data();
    std::vector<double> out(C * T * h * w, 0.0);
    const double inv = 1.0 / double(F * F);
    for (std::size_t ct = 0; ct < C * T; ++ct)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                double s = 0.0;
                for (std::size_t a = 0; a < F; ++a)
                    for (std::size_t b = 0; b < F; ++b) s += d[(ct * H + i * F + a) * W + j * F + b];
                out[(ct * h + i) * w + j] = s * inv;
            }
    return Tensor::from({C, T, h, w}, std::move(out));
}

Tensor bilinear_upsample(const Tensor& x, int f) {
    require_video(x, "bilinear_upsample");
    WAVER_REQUIRE(f >= 1, ContractError, "upsample factor must be >= 1");
    const std::size_t C = x.dim(0), T = x.dim(1), h = x.dim(2), w = x.dim(3), F = std::size_t(f);
    const std::size_t H = h * F, W = w * F;
    const auto d = x.data();
    auto coord = [&](std::size_t i, std::size_t n, std::size_t& i0, std::size_t& i1, double& a) {
        double s = (double(i) + 0.5) / double(F) - 0.5;
        s = std::clamp(s, 0.0, double(n - 1));
        i0 = std::size_t(std::floor(s));
        i1 = std::min(i0 + 1, n - 1);
        a = s - double(i0);
    };
    std::vector<double> out(C * T * H * W);
    for (std::size_t ct = 0; ct < C * T; ++ct)
        for (std::size_t i = 0; i < H; ++i) {
            std::size_t y0, y1;
            double ay;
            coord(i, h, y0, y1, ay);
            for (std::size_t j = 0; j < W; ++j) {
                std::size_t x0, x1;
                double ax;
                coord(j, w, x0, x1, ax);
                const double* p = d.data() + ct * h * w;
                const double top = (1 - ax) * p[y0 * w + x0] + ax * p[y0 * w + x1];
                const double bot = (1 - ax) * p[y1 * w + x0] + ax * p[y1 * w + x1];
                out[(ct * H + i) * W + j] = (1 - ay) * top + ay * bot;
            }
        }
    return Tensor::from({C, T, H, W}, std::move(out));
}

Tensor mean_preserving_upsample(const Tensor& y, int f) {
    const Tensor up = bilinear_upsample(y, f);
    if (f == 1) return up;
    const Tensor resid = area_downsample(up, f);
    const std::size_t C = y.dim(0), T = y.dim(1), h = y.dim(2), w = y.dim(3), F = std::size_t(f);
    const std::size_t H = h * F, W = w * F;
    const auto yd = y.data(), rd = resid.data();
    std::vector<double> out(up.data().begin(), up.data().end());
    for (std::size_t ct = 0; ct < C * T; ++ct)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                const std::size_t k = (ct * h + i / F) * w + j / F;
                out[(ct * H + i) * W + j] += yd[k] - rd[k];
            }
    return Tensor::from(up.shape(), std::move(out));
}

Tensor pixel_degrade(const Tensor& video, int down_factor) {
    if (down_factor == 1) {
        require_video(video, "pixel_degrade");
        return video.detach().clone();
    }
    return mean_preserving_upsample(area_downsample(video, down_factor), down_factor);
}

LatentDegradation latent_degrade_with(const Tensor& x, double w_d, const Tensor& noise) {
    WAVER_REQUIRE(x.shape() == noise.shape(), DimensionError, "latent_degrade noise shape mismatch");
    WAVER_REQUIRE(w_d >= 0.0 && w_d <= 1.0, DomainError, "w_d must lie in [0, 1]");
    const auto a = x.data(), n = noise.data();
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - w_d) * a[i] + w_d * n[i];
    return {Tensor::from(x.shape(), std::move(out)), w_d, noise};
}

LatentDegradation latent_degrade(const Tensor& x, Rng& rng, const DegradationConfig& cfg) {
    cfg.validate();
    const double w_d = rng.uniform(cfg.wd_min, cfg.wd_max);
    return latent_degrade_with(x, w_d, normal_like(x, rng));
}

RefinerPair refiner_pair_with(const Tensor& x0, const Tensor& x_n, double w_d, double w) {
    WAVER_REQUIRE(x0.shape() == x_n.shape(), DimensionError, "refiner_pair shape mismatch");
    WAVER_REQUIRE(w >= 0.0 && w <= 1.0, DomainError, "refiner w must lie in [0, 1]");
    const auto a = x0.data(), n = x_n.data();
    std::vector<double> in(a.size()), tg(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        in[i] = w * n[i] + (1.0 - w) * a[i];
        tg[i] = a[i] - n[i];
    }
    return {Tensor::from(x0.shape(), std::move(in)), Tensor::from(x0.shape(), std::move(tg)), w, x_n, w_d};
}

RefinerPair refiner_pair(const Tensor& x0, Rng& rng, const DegradationConfig& cfg,
                         const std::function<double(Rng&)>& w_sampler) {
    const auto deg = latent_degrade(pixel_degrade(x0, cfg.down_factor), rng, cfg);
    const double w = w_sampler ? w_sampler(rng) : rng.uniform();
    return refiner_pair_with(x0, deg.x_n, deg.w_d, w);
}

RefineResult refine(const Tensor& first_stage, const VelocityFn& refiner, const DegradationConfig& cfg,
                    const RefineOptions& opt, Rng& rng) {
    cfg.validate();
    require_video(first_stage, "refine");
    WAVER_REQUIRE(opt.n_steps >= 0, ContractError, "refine needs n_steps >= 0");
    RefineResult res;
    res.upsampled = mean_preserving_upsample(first_stage.detach(), cfg.down_factor);
    const Tensor noise = normal_like(res.upsampled, rng);
    const double w_d = opt.w_d ? *opt.w_d : rng.uniform(cfg.wd_min, cfg.wd_max);
    const auto deg = latent_degrade_with(res.upsampled, w_d, noise);
    res.degraded = deg.x_n;
    res.w_d = w_d;
    Tensor x = deg.x_n.clone();
    if (opt.n_steps == 0) {
        res.refined = x;
        return res;
    }
    const auto grid = inference_timesteps(opt.n_steps, opt.shift);
    const std::uint64_t macs0 = kernels::mac_count();
    for (int k = 0; k < opt.n_steps; ++k) {
        const auto v = refiner({{x.detach(), {}, grid[k]}});
        WAVER_REQUIRE(v.size() == 1 && v[0].shape() == x.shape(), DimensionError,
                      "refiner velocity has the wrong shape");
        const double dt = grid[k] - grid[k + 1];
        auto xd = x.mutable_data();
        const auto vd = v[0].data();
        for (std::size_t i = 0; i < xd.size(); ++i) {
            xd[i] += dt * vd[i];
            if (!std::isfinite(xd[i])) throw NumericDivergence("non-finite latent at refine step " + std::to_string(k), k);
        }
    }
    res.macs = kernels::mac_count() - macs0;
    res.refined = x;
    return res;
}

RefineResult refine(const Tensor& first_stage, const HybridDiT& refiner, const DegradationConfig& cfg,
                    const RefineOptions& opt, Rng& rng) {
    require_video(first_stage, "refine");
    const auto& mc = refiner.config();
    WAVER_REQUIRE(int(first_stage.dim(0)) == mc.in_channels && mc.in_channels == mc.out_channels, ContractError,
                  "refiner expects " + std::to_string(mc.in_channels) + " channels, first stage has " +
                      std::to_string(first_stage.dim(0)));
    const int H = int(first_stage.dim(2)) * cfg.down_factor, W = int(first_stage.dim(3)) * cfg.down_factor;
    WAVER_REQUIRE(H % mc.patch.h == 0 && W % mc.patch.w == 0 && int(first_stage.dim(1)) % mc.patch.t == 0,
                  ContractError, "upsampled size does not tile the refiner patch " + to_string(mc.patch));
    return refine(first_stage, dit_velocity(refiner), cfg, opt, rng);
}

RefineResult edit_mode(const Tensor& first_stage, const HybridDiT& refiner, const DegradationConfig& cfg, double w_d,
                       int n_steps, Rng& rng) {
    WAVER_REQUIRE(w_d > 0.0 && w_d <= 1.0, ContractError, "edit mode needs w_d in (0, 1]");
    RefineOptions opt;
    opt.n_steps = n_steps;
    opt.w_d = w_d;
    return refine(first_stage, refiner, cfg, opt, rng);
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
    WAVER_REQUIRE(a.shape() == b.shape(), DimensionError, "psnr shapes differ");
    double se = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) se += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
    const double mse = se / double(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

double pearson_correlation(const Tensor& a, const Tensor& b) {
    WAVER_REQUIRE(a.shape() == b.shape(), DimensionError, "correlation shapes differ");
    const double n = double(a.numel());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        ma += a.at(i) / n;
        mb += b.at(i) / n;
    }
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        sab += (a.at(i) - ma) * (b.at(i) - mb);
        saa += (a.at(i) - ma) * (a.at(i) - ma);
        sbb += (b.at(i) - mb) * (b.at(i) - mb);
    }
    return saa == 0.0 || sbb == 0.0 ? 0.0 : sab / std::sqrt(saa * sbb);
}

}  // namespace waver
