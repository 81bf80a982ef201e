#pragma once

// Task-unified diffusion transformer. Video and text tokens pass M dual-stream
// blocks (separate weights per modality, joint attention) and then N
// single-stream blocks (shared weights over the joint sequence). Blocks use
// adaLN modulation from the timestep with zero-initialized gates.
//
// A batch is packed into one joint sequence: every sample's video rows, then
// every sample's text rows. Attention is block-diagonal by sample through
// group ids, so packing never mixes samples.

#include <optional>
#include <string>
#include <vector>

#include "waver/params.hpp"
#include "waver/task_io.hpp"
#include "waver/tensor.hpp"

namespace waver {

struct Dim3 {
    int t = 1, h = 1, w = 1;
    int volume() const { return t * h * w; }
    bool operator==(const Dim3&) const = default;
};
std::string to_string(const Dim3& d);

enum class AttnMode { Full, Window };

struct HybridDiTConfig {
    int m_dual = 2;
    int n_single = 4;
    int d_model = 128;
    int n_heads = 4;
    int head_dim = 32;
    int in_channels = 7;
    int out_channels = 3;
    Dim3 patch{1, 4, 4};
    Dim3 rope_split{8, 12, 12};
    int vocab = vocab::kSize;
    bool use_factorized_pe = true;
    AttnMode attn_mode = AttnMode::Full;
    std::vector<Dim3> window_schedule{{1, 2, 2}, {2, 1, 1}};
    int full_attn_boundary_layers = 1;
    int mlp_hidden = 0;  // 0 means 4 * d_model
    int time_freq_dim = 64;
    int max_text_len = 16;
    Dim3 max_grid{16, 16, 16};
    double rope_base = 10000.0;

    int layers() const { return m_dual + n_single; }
    int mlp_width() const { return mlp_hidden > 0 ? mlp_hidden : 4 * d_model; }
    void validate() const;

    // Toy default used by tests and presets.
    static HybridDiTConfig toy();
    // Published full-size configuration, used only for shape bookkeeping.
    static HybridDiTConfig reference_scale();
};

// (1/4, 3/8, 3/8) of head_dim rounded to even sizes.
Dim3 default_rope_split(int head_dim);

// ---- building blocks (exposed for tests) ---------------------------------

// Flat indices into x[C,T,H,W] for each (token, element): token-major over the
// (t', h', w') raster, element order (c, dt, dh, dw).
std::vector<std::size_t> patch_index(int C, int T, int H, int W, Dim3 patch);
Dim3 patch_grid(int T, int H, int W, Dim3 patch);
Tensor patchify_raw(const Tensor& x, Dim3 patch);  // [n_tokens, C*volume]
Tensor unpatchify_raw(const Tensor& tokens, int C, int T, int H, int W, Dim3 patch);

// cos/sin tables [rows, head_dim/2] for a grid in raster order followed by
// n_text identity rows.
struct RopeTables {
    std::vector<double> cos, sin;
    std::size_t rows = 0;
};
RopeTables rope_tables(Dim3 grid, Dim3 split, int head_dim, double base, int n_text);
void append_rope(RopeTables& dst, const RopeTables& src);

Tensor factorized_pe(const Tensor& table_t, const Tensor& table_h, const Tensor& table_w, Dim3 grid);

std::vector<double> timestep_features(double t, int dim);

// Group ids for windowed attention over one grid; windows are numbered from
// base in raster order.
std::vector<int> window_groups(Dim3 grid, Dim3 window, int base = 0);
Tensor window_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, Dim3 grid,
                        Dim3 window);

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale);

// ---- attention diagnostics -----------------------------------------------

struct HeadStats {
    int layer = 0;
    int head = 0;
    double mean_entropy = 0.0;
    double mean_topk_mass = 0.0;
    double mean_log_keys = 0.0;  // entropy of uniform attention, for reference
};

// probs is [heads, n, n]; rows restricted to keys sharing the query's group.
std::vector<HeadStats> summarize_attention(const std::vector<double>& probs, std::size_t heads, std::size_t n,
                                           const std::vector<int>& groups, int top_k, int layer);

// ---- model ----------------------------------------------------------------

struct DiTSample {
    Tensor x;               // [in_channels, T, H, W]
    std::vector<int> text;  // may be empty
    double t = 0.0;
};

struct ForwardOptions {
    int tap_layer = -1;           // block whose video output is returned per sample
    bool record_attention = false;
    int top_k = 4;
};

struct ForwardResult {
    std::vector<Tensor> velocity;  // [out_channels, T, H, W] per sample
    std::vector<Tensor> tapped;    // [n_video_i, d_model] per sample when tap_layer >= 0
    std::vector<HeadStats> attention;
};

// Per-forward attention context shared by all blocks.
struct JointLayout {
    std::size_t n_video = 0, n_text = 0;
    std::vector<std::size_t> video_sample, text_sample;  // row -> sample
    std::vector<Dim3> grids;
    std::vector<std::size_t> video_offset;  // first video row of each sample
    std::vector<int> full_groups;
    RopeTables rope;
    bool use_rope = true;
};

class HybridDiT {
public:
    HybridDiT(HybridDiTConfig cfg, std::uint64_t seed);

    const HybridDiTConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    ForwardResult forward(const std::vector<DiTSample>& batch, const ForwardOptions& opt = {}) const;
    Tensor forward_one(const Tensor& x, const std::vector<int>& text, double t) const;

    // Attention pattern per layer: nullopt = full attention.
    std::vector<std::optional<Dim3>> layer_windows() const;

    // Block-level entry points. cond is silu(time embedding), [batch, d].
    std::pair<Tensor, Tensor> dual_block(int layer, const Tensor& video, const Tensor& text, const Tensor& cond,
                                         const JointLayout& layout, const std::vector<int>& groups,
                                         std::vector<double>* probs = nullptr) const;
    Tensor single_block(int layer, const Tensor& joint, const Tensor& cond, const JointLayout& layout,
                        const std::vector<int>& groups, std::vector<double>* probs = nullptr) const;

    JointLayout layout_for(const std::vector<Dim3>& grids, const std::vector<std::size_t>& text_lens) const;
    std::vector<int> groups_for_layer(int layer, const JointLayout& layout) const;
    Tensor time_condition(const std::vector<double>& ts) const;

    std::string block_prefix(int layer, const std::string& stream) const;

private:
    struct QKV {
        Tensor q, k, v;
    };
    Tensor stream_modulation(const std::string& prefix, const Tensor& cond,
                             const std::vector<std::size_t>& rows) const;
    QKV stream_qkv(const std::string& prefix, const Tensor& x, const Tensor& mod) const;
    Tensor stream_attn_residual(const std::string& prefix, const Tensor& x, const Tensor& attn,
                                const Tensor& mod) const;
    Tensor stream_mlp_residual(const std::string& prefix, const Tensor& x, const Tensor& mod) const;
    Tensor rotate(const Tensor& x, const JointLayout& layout) const;

    void add_block_params(int layer, const std::string& stream, Rng& rng);

    HybridDiTConfig cfg_;
    ParamStore params_;
};

// Total trainable scalars for a configuration without materializing weights.
std::size_t parameter_count(const HybridDiTConfig& cfg);

}  // namespace waver
