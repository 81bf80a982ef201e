#pragma once

// Training objectives: rectified-flow matching, representation alignment
// against a frozen teacher, and the closed-form Gaussian KL.

#include <string>
#include <vector>

#include "waver/hybrid_dit.hpp"
#include "waver/params.hpp"
#include "waver/rng.hpp"
#include "waver/tensor.hpp"

namespace waver {

// ---- flow matching ----------------------------------------------------------

struct FmPair {
    Tensor x_t;     // t*eps + (1-t)*x0
    Tensor target;  // x0 - eps
    Tensor noise;   // eps
};

FmPair fm_pair(const Tensor& x0, double t, Rng& rng);
// Same construction from a caller-supplied noise tensor.
FmPair fm_pair_with_noise(const Tensor& x0, double t, const Tensor& noise);

// Mean squared error over frames whose mask entry is false. pred and target
// are [C, T, H, W]; cond_mask has one entry per frame (empty = no condition
// frames). When every frame is a condition frame the loss is 0 and a note is
// appended to warnings, if given.
Tensor fm_loss(const Tensor& pred, const Tensor& target, const std::vector<bool>& cond_mask,
               std::vector<std::string>* warnings = nullptr);

// ---- representation alignment ----------------------------------------------

struct AlignmentConfig {
    bool enabled = false;
    int tap_layer = 1;
    int spatial_ds = 2;
    int temporal_ds = 4;
    double lambda = 0.5;
    int teacher_dim = 16;
    int projector_hidden = 0;  // 0 means d_model
    std::uint64_t teacher_seed = 0x7EAC4E5ULL;

    void validate() const;
};

// Fixed linear map of pixel blocks; never trained.
struct TeacherProjection {
    int channels = 0;
    Dim3 block;
    Tensor weight;  // [channels * block.volume(), dim]

    int dim() const { return static_cast<int>(weight.dim(1)); }
};

TeacherProjection make_teacher(int channels, Dim3 block, int dim, std::uint64_t seed);
// [n_blocks, dim] in raster order over the block grid; carries no gradient.
Tensor teacher_features(const Tensor& video, const TeacherProjection& teacher);

// Teacher block covering (temporal_ds, spatial_ds, spatial_ds) model patches.
Dim3 teacher_block(const AlignmentConfig& cfg, Dim3 patch);

// Two-layer MLP g_phi from d_model to the teacher width.
class AlignmentProjector {
public:
    AlignmentProjector(int d_model, int hidden, int out_dim, std::uint64_t seed);
    Tensor operator()(const Tensor& x) const;
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

private:
    ParamStore params_;
};

// [N_f, N_h] matrix averaging hidden rows over (temporal_ds, spatial_ds, spatial_ds) cells.
Tensor pooling_matrix(Dim3 hidden_grid, const AlignmentConfig& cfg);

// hidden: [T_h*H_h*W_h, d_model] on hidden_grid. Returns
// -mean_i cos(g_phi(pool(hidden))_i, teacher_i).
Tensor alignment_loss(const Tensor& hidden, Dim3 hidden_grid, const Tensor& teacher_feats,
                      const AlignmentProjector& projector, const AlignmentConfig& cfg);

// fm + lambda * align
Tensor train_loss(const Tensor& fm, const Tensor& align, double lambda);

// ---- KL ---------------------------------------------------------------------

// (1 / (2 numel)) * sum(sigma^2 + mu^2 - 1 - log sigma^2)
Tensor gaussian_kl(const Tensor& mu, const Tensor& sigma);

}  // namespace waver
