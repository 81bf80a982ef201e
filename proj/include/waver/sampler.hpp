#pragma once

// Flow-matching inference: Euler integration of the learned velocity from
// t = 1 (noise) to t = 0 (data), optionally guided by classifier-free
// guidance or per-frame adaptive projected guidance (APG).

#include <functional>
#include <string>
#include <vector>

#include "waver/hybrid_dit.hpp"
#include "waver/rng.hpp"
#include "waver/task_io.hpp"
#include "waver/tensor.hpp"

namespace waver {

enum class Guidance { None, Cfg, Apg };
std::string to_string(Guidance g);
Guidance guidance_from_string(const std::string& s);

struct SamplerConfig {
    int n_steps = 50;
    double shift = 1.0;
    Guidance guidance = Guidance::None;
    double scale = 1.0;             // w
    double apg_threshold = 27.0;    // r, raw L2 norm of one [C, H, W] frame
    double apg_eta = 0.0;           // weight kept on the parallel component
    std::vector<int> neg_tokens;    // unconditional branch text

    void validate() const;

    static SamplerConfig cfg_preset();  // CFG, w = 5
    static SamplerConfig apg_preset();  // APG, w = 8, r = 27
};

// Per-frame split of delta into the component parallel to v_cond and the
// remainder. Frames where v_cond is zero put everything in the orthogonal part.
struct ApgDecomposition {
    Tensor parallel;
    Tensor orthogonal;
};
ApgDecomposition apg_decompose(const Tensor& delta, const Tensor& v_cond);

// Norm of every [C, H, W] frame of a [C, T, H, W] tensor.
std::vector<double> frame_norms(const Tensor& x);

struct GuidanceStats {
    std::vector<double> update_norms;  // per frame, after clamping (APG only)
};

// none: v_cond. cfg: v_uncond + w (v_cond - v_uncond).
// apg: v_cond + (w - 1) * clamp_r(delta_orth + eta * delta_par).
Tensor guided_velocity(const Tensor& v_cond, const Tensor& v_uncond, const SamplerConfig& cfg,
                       GuidanceStats* stats = nullptr);

// Validated token list for the unconditional branch.
std::vector<int> encode_negative(const std::vector<int>& neg_tokens, int vocab_size);

// Velocity for a batch of unified inputs; one [C, T, H, W] tensor per sample.
using VelocityFn = std::function<std::vector<Tensor>(const std::vector<DiTSample>&)>;
VelocityFn dit_velocity(const HybridDiT& model);

struct SampleTrace {
    std::vector<GuidanceStats> steps;
    std::uint64_t macs = 0;
    int forward_calls = 0;
};

// request.latent supplies the output shape and, for condition frames, the
// clean content. request.caption_tokens is the conditioning text. Condition
// frames are imposed on x at the start and after every step.
LatentVideo euler_sample(const VelocityFn& model, const TaskSample& request, const SamplerConfig& cfg, Rng& rng,
                         SampleTrace* trace = nullptr);

// Writes the clean condition frames of request into x.
void impose_condition_frames(Tensor& x, const TaskSample& request);

}  // namespace waver
