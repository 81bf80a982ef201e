#include "waver/objectives.hpp"

#include <cmath>

#include "waver/error.hpp"

namespace waver {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.mutable_data()) v = stddev * rng.normal();
    return t;
}

}  // namespace

FmPair fm_pair_with_noise(const Tensor& x0, double t, const Tensor& noise) {
    WAVER_REQUIRE(t >= 0.0 && t <= 1.0, DomainError, "fm_pair timestep outside [0, 1]");
    WAVER_REQUIRE(x0.shape() == noise.shape(), DimensionError, "fm_pair noise shape mismatch");
    const auto a = x0.data(), e = noise.data();
    std::vector<double> xt(a.size()), tg(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        xt[i] = t * e[i] + (1.0 - t) * a[i];
        tg[i] = a[i] - e[i];
    }
    return {Tensor::from(x0.shape(), std::move(xt)), Tensor::from(x0.shape(), std::move(tg)), noise};
}

FmPair fm_pair(const Tensor& x0, double t, Rng& rng) {
    WAVER_REQUIRE(t >= 0.0 && t <= 1.0, DomainError, "fm_pair timestep outside [0, 1]");
    return fm_pair_with_noise(x0, t, normal_tensor(x0.shape(), 1.0, rng));
}

Tensor fm_loss(const Tensor& pred, const Tensor& target, const std::vector<bool>& cond_mask,
               std::vector<std::string>* warnings) {
    WAVER_REQUIRE(pred.shape() == target.shape(), DimensionError,
                  "fm_loss shapes differ: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    WAVER_REQUIRE(pred.ndim() == 4, DimensionError, "fm_loss expects [C, T, H, W]");
    const std::size_t T = pred.dim(1);
    WAVER_REQUIRE(cond_mask.empty() || cond_mask.size() == T, DimensionError, "fm_loss mask length != frames");
    std::vector<double> keep(T, 1.0);
    std::size_t kept = T;
    for (std::size_t t = 0; t < cond_mask.size(); ++t)
        if (cond_mask[t]) {
            keep[t] = 0.0;
            --kept;
        }
    const Tensor diff = pred - target;
    if (kept == 0) {
        if (warnings) warnings->push_back("fm_loss: every frame is a condition frame; loss set to 0");
        return sum(diff * Tensor::zeros({1, T, 1, 1}));
    }
    const double denom = static_cast<double>(pred.dim(0) * kept * pred.dim(2) * pred.dim(3));
    if (kept == T) return sum(square(diff)) * (1.0 / denom);
    return sum(square(diff) * Tensor::from({1, T, 1, 1}, keep)) * (1.0 / denom);
}

void AlignmentConfig::validate() const {
    WAVER_REQUIRE(spatial_ds >= 1 && temporal_ds >= 1, ContractError, "alignment downsample factors must be >= 1");
    WAVER_REQUIRE(tap_layer >= 0, ContractError, "alignment tap layer must be >= 0");
    WAVER_REQUIRE(teacher_dim >= 1, ContractError, "teacher width must be >= 1");
    WAVER_REQUIRE(lambda >= 0.0, ContractError, "alignment lambda must be >= 0");
}

TeacherProjection make_teacher(int channels, Dim3 block, int dim, std::uint64_t seed) {
    WAVER_REQUIRE(channels > 0 && dim > 0 && block.volume() > 0, ContractError, "invalid teacher shape");
    Rng rng(seed);
    const std::size_t in = sz(channels * block.volume());
    return {channels, block, normal_tensor({in, sz(dim)}, 1.0 / std::sqrt(double(in)), rng)};
}

Tensor teacher_features(const Tensor& video, const TeacherProjection& teacher) {
    WAVER_REQUIRE(video.ndim() == 4 && int(video.dim(0)) == teacher.channels, DimensionError,
                  "teacher expects [" + std::to_string(teacher.channels) + ", T, H, W], got " +
                      shape_str(video.shape()));
    NoGradGuard ng;
    return matmul(patchify_raw(video.detach(), teacher.block), teacher.weight).detach();
}

Dim3 teacher_block(const AlignmentConfig& cfg, Dim3 patch) {
    return {patch.t * cfg.temporal_ds, patch.h * cfg.spatial_ds, patch.w * cfg.spatial_ds};
}

AlignmentProjector::AlignmentProjector(int d_model, int hidden, int out_dim, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t d = sz(d_model), h = sz(hidden > 0 ? hidden : d_model), o = sz(out_dim);
    params_.add("align.fc1.weight", normal_tensor({d, h}, 1.0 / std::sqrt(double(d)), rng));
    params_.add("align.fc1.bias", Tensor::zeros({h}));
    params_.add("align.fc2.weight", normal_tensor({h, o}, 1.0 / std::sqrt(double(h)), rng));
    params_.add("align.fc2.bias", Tensor::zeros({o}));
}

Tensor AlignmentProjector::operator()(const Tensor& x) const {
    const auto& P = params_;
    return linear(silu(linear(x, P.get("align.fc1.weight"), P.get("align.fc1.bias"))), P.get("align.fc2.weight"),
                  P.get("align.fc2.bias"));
}

Tensor pooling_matrix(Dim3 g, const AlignmentConfig& cfg) {
    const int td = cfg.temporal_ds, sd = cfg.spatial_ds;
    WAVER_REQUIRE(g.t % td == 0 && g.h % sd == 0 && g.w % sd == 0, ContractError,
                  "hidden grid " + to_string(g) + " not divisible by downsample factors (" + std::to_string(td) +
                      ", " + std::to_string(sd) + ", " + std::to_string(sd) + ")");
    const Dim3 f{g.t / td, g.h / sd, g.w / sd};
    const std::size_t nf = sz(f.volume()), nh = sz(g.volume());
    std::vector<double> m(nf * nh, 0.0);
    const double w = 1.0 / (td * sd * sd);
    for (int t = 0; t < g.t; ++t)
        for (int h = 0; h < g.h; ++h)
            for (int x = 0; x < g.w; ++x) {
                const std::size_t row = sz(((t / td) * f.h + h / sd) * f.w + x / sd);
                m[row * nh + sz((t * g.h + h) * g.w + x)] = w;
            }
    return Tensor::from({nf, nh}, std::move(m));
}

Tensor alignment_loss(const Tensor& hidden, Dim3 hidden_grid, const Tensor& teacher_feats,
                      const AlignmentProjector& projector, const AlignmentConfig& cfg) {
    WAVER_REQUIRE(hidden.ndim() == 2 && int(hidden.dim(0)) == hidden_grid.volume(), DimensionError,
                  "alignment hidden rows " + shape_str(hidden.shape()) + " do not match grid " + to_string(hidden_grid));
    const Tensor pool = pooling_matrix(hidden_grid, cfg);
    WAVER_REQUIRE(teacher_feats.ndim() == 2 && teacher_feats.dim(0) == pool.dim(0), DimensionError,
                  "teacher features " + shape_str(teacher_feats.shape()) + " do not match pooled positions " +
                      std::to_string(pool.dim(0)));
    const Tensor hg = projector(matmul(pool, hidden));
    return -mean(cosine_similarity(hg, teacher_feats));
}

Tensor train_loss(const Tensor& fm, const Tensor& align, double lambda) { return fm + align * lambda; }

Tensor gaussian_kl(const Tensor& mu, const Tensor& sigma) {
    WAVER_REQUIRE(mu.shape() == sigma.shape(), DimensionError, "gaussian_kl shapes differ");
    for (double s : sigma.data()) WAVER_REQUIRE(s > 0.0, DomainError, "gaussian_kl needs sigma > 0");
    const Tensor s2 = square(sigma);
    return sum(add_scalar(s2 + square(mu) - log(s2), -1.0)) *
           (1.0 / (2.0 * static_cast<double>(mu.numel())));
}

}  // namespace waver
