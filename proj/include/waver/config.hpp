#pragma once

// Run configuration: stage presets plus flat key=value overrides.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "waver/hybrid_dit.hpp"
#include "waver/objectives.hpp"
#include "waver/refiner.hpp"
#include "waver/sampler.hpp"
#include "waver/schedules.hpp"

namespace waver {

using ConfigMap = std::map<std::string, std::string>;

// Lines of `key = value`; `#` starts a comment; blank lines ignored.
ConfigMap parse_config(std::istream& is);
ConfigMap parse_config_file(const std::string& path);
// Accepts "key=value" tokens, e.g. from the command line.
ConfigMap parse_overrides(const std::vector<std::string>& items);

enum class Stage { T2I, LowresVideo, MidresVideo, Refiner };
std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct OptimConfig {
    double base_lr = 2e-3;
    double lr_ratio = 1.0;  // stage multiplier on base_lr
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double eps = 1e-8;
    double grad_clip = 1.0;  // global norm; <= 0 disables
    int steps = 500;
    int batch_size = 2;      // packed bins per step
    int warmup = 20;

    double lr_at(int step) const;
};

struct DataConfig {
    int frames = 4;
    int height = 16;
    int width = 16;
    int pool_size = 512;
    double image_fraction = 0.0;  // share of the pool rendered as single-frame images
    double p_i2v = 0.0;
    double p_uncond = 0.1;        // caption dropout for guidance
    int pack_tokens = 96;
    int max_per_bin = 4;
    std::vector<int> bucket_edges;  // empty: one bucket at pack_tokens
    double min_motion = 0.0;        // foreground motion filter, 0 disables
    double max_motion = 1e9;
    std::uint64_t seed = 1;
    int prefetch = 0;
};

struct RunConfig {
    Stage stage = Stage::LowresVideo;
    std::uint64_t seed = 1;
    HybridDiTConfig model;
    TimestepSampler timesteps;
    OptimConfig optim;
    DataConfig data;
    AlignmentConfig align;
    SamplerConfig sampler;
    DegradationConfig degrade;
    int refine_steps = 8;
    int log_every = 10;

    static RunConfig preset(Stage stage);
    // Unknown keys and malformed values throw ContractError naming the key.
    void apply(const ConfigMap& kv);
    void validate() const;
    // Canonical key=value text; parsing it back reproduces this config.
    std::string to_text() const;
    std::uint64_t hash() const;  // FNV-1a of to_text()
};

// Builds a config from a preset named by kv["stage"] (default lowres_video) and applies the rest.
RunConfig make_run_config(const ConfigMap& kv);

std::string to_string(AttnMode m);
Dim3 parse_dim3(const std::string& s);  // "1x4x4"

}  // namespace waver
