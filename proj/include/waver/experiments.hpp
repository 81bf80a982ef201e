#pragma once

// Toy-scale experiments and artifact plumbing: stream-layout and timestep
// sampler ablations, joint T2V/I2V training, generation metrics, model
// averaging, frame rendering and run directories.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "waver/checkpoint.hpp"
#include "waver/config.hpp"
#include "waver/packing.hpp"
#include "waver/refiner.hpp"
#include "waver/sampler.hpp"
#include "waver/trainer.hpp"

namespace waver {

// ---- model averaging ------------------------------------------------------

// Elementwise arithmetic mean; every list must share names, order and shapes.
TensorList average_models(const std::vector<TensorList>& models);

// ---- frames ---------------------------------------------------------------

// [-1, 1] maps linearly onto [0, 255]; values outside are clamped.
std::uint8_t display_byte(double v);

struct FrameStats {
    int frame = 0;
    double mean = 0.0, stddev = 0.0, min = 0.0, max = 0.0;
};

// Writes <prefix>_<t>.ppm (binary P6, channels 0..2 as RGB) for every frame
// plus <prefix>_stats.csv. Returns the per-frame statistics.
std::vector<FrameStats> render_frames(const LatentVideo& video, const std::filesystem::path& dir,
                                      const std::string& prefix = "frame");

struct Pixmap {
    int width = 0, height = 0;
    std::vector<std::uint8_t> rgb;
};
Pixmap read_ppm(const std::filesystem::path& path);

// ---- generation metrics ---------------------------------------------------

// A pixel is foreground when its largest absolute channel value exceeds
// threshold. A blob is a 4-connected foreground component whose area lies in
// [min_area, max_fraction * H * W].
struct BlobOptions {
    double threshold = 0.27;
    int min_area = 3;
    double max_fraction = 0.35;
};

std::vector<int> blob_areas(const LatentVideo& video, int frame, const BlobOptions& opt = {});
// Fraction of frames holding at least one blob.
double sprite_presence(const LatentVideo& video, const BlobOptions& opt = {});

// Trailing mean over the last `window` entries (fewer at the start).
std::vector<double> smooth_trailing(const std::vector<double>& x, int window);

// Two-sample Kolmogorov-Smirnov statistic.
double ks_statistic(std::vector<double> a, std::vector<double> b);

// Held-out prompts: sprite videos from a seed stream disjoint from the
// training pool.
std::vector<SpriteVideo> heldout_sources(const DataConfig& data, int n, std::uint64_t seed,
                                         int min_speed_bucket = 0);

struct GenerationReport {
    TaskKind kind = TaskKind::T2V;
    std::vector<LatentVideo> samples;
    std::vector<double> presence;
    std::vector<double> motion;     // foreground motion score per sample (videos only)
    bool condition_exact = true;    // I2V: generated frame 0 equals the conditioning frame bitwise
    double mean_presence = 0.0;
    double mean_motion = 0.0;
    std::uint64_t macs = 0;
};

GenerationReport generate(const HybridDiT& model, const SamplerConfig& sampler, TaskKind kind,
                          const std::vector<SpriteVideo>& sources, std::uint64_t seed,
                          const BlobOptions& blobs = {});

// ---- ablations --------------------------------------------------------------

// mlp_hidden giving the closest parameter count to target.
int match_mlp_hidden(HybridDiTConfig cfg, std::size_t target_params);

struct StreamLayout {
    std::string name;
    int m_dual = 0, n_single = 0;
};
std::vector<StreamLayout> default_stream_layouts();  // Hybrid(2,4), Dual(6,0), Single(0,6)

struct LossCurve {
    std::string name;
    HybridDiTConfig model;
    std::size_t params = 0;
    std::uint64_t seed = 0;
    std::vector<double> loss;
    std::vector<double> smoothed;
};

using StepCallback = std::function<void(const std::string& arm, const StepMetrics&)>;

// Trains every layout from the same seed and data stream. The first layout
// fixes the parameter budget; the others have mlp_hidden adjusted to match.
std::vector<LossCurve> ablate_streams(const RunConfig& base, const std::vector<StreamLayout>& layouts, int steps,
                                      int window, const StepCallback& on_step = {});
void write_curves_csv(std::ostream& os, const std::vector<LossCurve>& curves);

struct SamplerArm {
    std::string name;
    TimestepSampler timesteps;
    std::vector<double> loss;
    std::vector<double> train_timesteps;
    double timestep_ks = 0.0;  // against fresh draws from the configured sampler
    GenerationReport generation;
};

// Trains logit-normal and mode timestep sampling from the same seed, then
// samples identical motion-heavy prompts from both.
std::vector<SamplerArm> ablate_sampler(const RunConfig& base, int steps, int n_samples,
                                       const StepCallback& on_step = {});

struct JointI2VArm {
    std::string name;
    double p_i2v = 0.0;
    std::vector<double> loss;
    GenerationReport i2v;
};

// Joint T2V/I2V training (p_i2v as configured) against I2V-only training;
// both evaluated on I2V motion.
std::vector<JointI2VArm> ablate_joint_i2v(const RunConfig& base, int steps, int n_samples, double joint_p = 0.2,
                                          const StepCallback& on_step = {});

// ---- diagnostics ------------------------------------------------------------

struct PackStats {
    std::size_t samples = 0;
    std::size_t spfhp_bins = 0, ffd_bins = 0, lower_bound = 0;
    double spfhp_efficiency = 0.0, ffd_efficiency = 0.0;
    std::size_t pad_tokens = 0;  // bucketed padding over one epoch
};
PackStats pack_stats(const Trainer& trainer);

struct AttentionRecord {
    double t = 0.0;
    HeadStats stats;
};
// Per-(layer, head) attention statistics for one input at several timesteps.
std::vector<AttentionRecord> attention_stats(const HybridDiT& model, const DiTSample& input,
                                             const std::vector<double>& timesteps, int top_k = 4);

// ---- run directories --------------------------------------------------------

// Creates dir, writes config.txt and manifest.txt (config hash, seed, command).
void prepare_run_dir(const std::filesystem::path& dir, const RunConfig& cfg, const std::string& command);

}  // namespace waver
