#include "waver/hybrid_dit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "waver/error.hpp"

namespace waver {

namespace {

constexpr double kNormEps = 1e-6;

Tensor normal_init(Shape shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.mutable_data()) v = stddev * rng.normal();
    return t;
}

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

}  // namespace

std::string to_string(const Dim3& d) {
    return "(" + std::to_string(d.t) + "," + std::to_string(d.h) + "," + std::to_string(d.w) + ")";
}

Dim3 default_rope_split(int head_dim) {
    auto even = [](double x) { return 2 * static_cast<int>(std::lround(x / 2.0)); };
    const int dt = even(head_dim / 4.0);
    const int dh = even(head_dim * 3.0 / 8.0);
    return {dt, dh, head_dim - dt - dh};
}

void HybridDiTConfig::validate() const {
    WAVER_REQUIRE(m_dual >= 0 && n_single >= 0 && layers() > 0, ContractError, "model needs at least one block");
    WAVER_REQUIRE(d_model == n_heads * head_dim, ContractError,
                  "d_model " + std::to_string(d_model) + " != n_heads * head_dim");
    WAVER_REQUIRE(rope_split.t + rope_split.h + rope_split.w == head_dim, ContractError,
                  "rope split " + to_string(rope_split) + " does not sum to head_dim");
    WAVER_REQUIRE(rope_split.t % 2 == 0 && rope_split.h % 2 == 0 && rope_split.w % 2 == 0, ContractError,
                  "rope split sizes must be even");
    WAVER_REQUIRE(in_channels > 0 && out_channels > 0, ContractError, "channel counts must be positive");
    WAVER_REQUIRE(patch.t > 0 && patch.h > 0 && patch.w > 0, ContractError, "patch sizes must be positive");
    WAVER_REQUIRE(time_freq_dim > 0 && time_freq_dim % 2 == 0, ContractError, "time_freq_dim must be even");
    WAVER_REQUIRE(full_attn_boundary_layers >= 0, ContractError, "boundary layer count must be >= 0");
    if (attn_mode == AttnMode::Window)
        WAVER_REQUIRE(!window_schedule.empty(), ContractError, "window mode needs a window schedule");
}

HybridDiTConfig HybridDiTConfig::toy() { return HybridDiTConfig{}; }

HybridDiTConfig HybridDiTConfig::reference_scale() {
    HybridDiTConfig c;
    c.m_dual = 16;
    c.n_single = 40;
    c.n_heads = 24;
    c.head_dim = 128;
    c.d_model = 24 * 128;
    c.in_channels = 36;
    c.out_channels = 16;
    c.patch = {1, 2, 2};
    c.rope_split = default_rope_split(128);
    return c;
}

// ---- patchify ---------------------------------------------------------------

Dim3 patch_grid(int T, int H, int W, Dim3 p) {
    WAVER_REQUIRE(T % p.t == 0 && H % p.h == 0 && W % p.w == 0, ContractError,
                  "dims (" + std::to_string(T) + "," + std::to_string(H) + "," + std::to_string(W) +
                      ") not divisible by patch " + to_string(p));
    return {T / p.t, H / p.h, W / p.w};
}

std::vector<std::size_t> patch_index(int C, int T, int H, int W, Dim3 p) {
    const Dim3 g = patch_grid(T, H, W, p);
    std::vector<std::size_t> idx;
    idx.reserve(sz(C) * T * H * W);
    for (int gt = 0; gt < g.t; ++gt)
        for (int gh = 0; gh < g.h; ++gh)
            for (int gw = 0; gw < g.w; ++gw)
                for (int c = 0; c < C; ++c)
                    for (int a = 0; a < p.t; ++a)
                        for (int b = 0; b < p.h; ++b)
                            for (int e = 0; e < p.w; ++e) {
                                const std::size_t t = gt * p.t + a, h = gh * p.h + b, w = gw * p.w + e;
                                idx.push_back(((c * sz(T) + t) * H + h) * W + w);
                            }
    return idx;
}

Tensor patchify_raw(const Tensor& x, Dim3 p) {
    WAVER_REQUIRE(x.ndim() == 4, DimensionError, "patchify expects [C,T,H,W], got " + shape_str(x.shape()));
    const int C = int(x.dim(0)), T = int(x.dim(1)), H = int(x.dim(2)), W = int(x.dim(3));
    const Dim3 g = patch_grid(T, H, W, p);
    return gather(x, patch_index(C, T, H, W, p), {sz(g.volume()), sz(C * p.volume())});
}

Tensor unpatchify_raw(const Tensor& tokens, int C, int T, int H, int W, Dim3 p) {
    const auto fwd = patch_index(C, T, H, W, p);
    WAVER_REQUIRE(tokens.numel() == fwd.size(), DimensionError,
                  "unpatchify token tensor " + shape_str(tokens.shape()) + " does not fill [" + std::to_string(C) +
                      "," + std::to_string(T) + "," + std::to_string(H) + "," + std::to_string(W) + "]");
    std::vector<std::size_t> inv(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
    return gather(tokens, std::move(inv), {sz(C), sz(T), sz(H), sz(W)});
}

// ---- positions ----------------------------------------------------------------

RopeTables rope_tables(Dim3 grid, Dim3 split, int head_dim, double base, int n_text) {
    WAVER_REQUIRE(split.t % 2 == 0 && split.h % 2 == 0 && split.w % 2 == 0, ContractError,
                  "rope sub-dimensions must be even, got " + to_string(split));
    WAVER_REQUIRE(split.t + split.h + split.w == head_dim, ContractError, "rope split must sum to head_dim");
    const std::size_t half = sz(head_dim / 2);
    RopeTables r;
    r.rows = sz(grid.volume() + n_text);
    r.cos.assign(r.rows * half, 1.0);
    r.sin.assign(r.rows * half, 0.0);
    // column ranges and per-axis frequency ladders
    const int sub[3] = {split.t, split.h, split.w};
    std::vector<std::pair<int, double>> cols;  // (axis, frequency)
    for (int axis = 0; axis < 3; ++axis)
        for (int i = 0; i < sub[axis] / 2; ++i) cols.push_back({axis, std::pow(base, -2.0 * i / sub[axis])});
    std::size_t row = 0;
    for (int t = 0; t < grid.t; ++t)
        for (int h = 0; h < grid.h; ++h)
            for (int w = 0; w < grid.w; ++w, ++row) {
                const int pos[3] = {t, h, w};
                for (std::size_t c = 0; c < half; ++c) {
                    const double angle = pos[cols[c].first] * cols[c].second;
                    r.cos[row * half + c] = std::cos(angle);
                    r.sin[row * half + c] = std::sin(angle);
                }
            }
    return r;
}

void append_rope(RopeTables& dst, const RopeTables& src) {
    dst.cos.insert(dst.cos.end(), src.cos.begin(), src.cos.end());
    dst.sin.insert(dst.sin.end(), src.sin.begin(), src.sin.end());
    dst.rows += src.rows;
}

Tensor factorized_pe(const Tensor& table_t, const Tensor& table_h, const Tensor& table_w, Dim3 grid) {
    WAVER_REQUIRE(std::size_t(grid.t) <= table_t.dim(0) && std::size_t(grid.h) <= table_h.dim(0) &&
                      std::size_t(grid.w) <= table_w.dim(0),
                  ContractError, "grid " + to_string(grid) + " exceeds positional tables");
    std::vector<std::size_t> it, ih, iw;
    for (int t = 0; t < grid.t; ++t)
        for (int h = 0; h < grid.h; ++h)
            for (int w = 0; w < grid.w; ++w) {
                it.push_back(t);
                ih.push_back(h);
                iw.push_back(w);
            }
    return embedding(table_t, it) + embedding(table_h, ih) + embedding(table_w, iw);
}

std::vector<double> timestep_features(double t, int dim) {
    const int half = dim / 2;
    std::vector<double> f(sz(dim));
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        f[i] = std::cos(1000.0 * t * freq);
        f[half + i] = std::sin(1000.0 * t * freq);
    }
    return f;
}

// ---- windows ------------------------------------------------------------------

std::vector<int> window_groups(Dim3 grid, Dim3 win, int base) {
    WAVER_REQUIRE(win.t > 0 && win.h > 0 && win.w > 0 && grid.t % win.t == 0 && grid.h % win.h == 0 &&
                      grid.w % win.w == 0,
                  ContractError, "window " + to_string(win) + " does not tile grid " + to_string(grid));
    const int nh = grid.h / win.h, nw = grid.w / win.w;
    std::vector<int> g;
    g.reserve(sz(grid.volume()));
    for (int t = 0; t < grid.t; ++t)
        for (int h = 0; h < grid.h; ++h)
            for (int w = 0; w < grid.w; ++w) g.push_back(base + ((t / win.t) * nh + h / win.h) * nw + w / win.w);
    return g;
}

Tensor window_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, Dim3 grid, Dim3 win) {
    WAVER_REQUIRE(q.dim(0) == std::size_t(grid.volume()), DimensionError, "token count does not match grid");
    return attention(q, k, v, heads, window_groups(grid, win));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return matmul(x, w) + b; }

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale) {
    return x * add_scalar(scale, 1.0) + shift;
}

// ---- diagnostics --------------------------------------------------------------

std::vector<HeadStats> summarize_attention(const std::vector<double>& probs, std::size_t heads, std::size_t n,
                                           const std::vector<int>& groups, int top_k, int layer) {
    WAVER_REQUIRE(probs.size() == heads * n * n, DimensionError, "attention probabilities must be [heads, n, n]");
    std::vector<HeadStats> out;
    std::vector<double> row;
    for (std::size_t h = 0; h < heads; ++h) {
        HeadStats s;
        s.layer = layer;
        s.head = static_cast<int>(h);
        for (std::size_t i = 0; i < n; ++i) {
            row.clear();
            for (std::size_t j = 0; j < n; ++j)
                if (groups.empty() || groups[i] == groups[j]) row.push_back(probs[(h * n + i) * n + j]);
            double ent = 0.0;
            for (double p : row)
                if (p > 0.0) ent -= p * std::log(p);
            const std::size_t k = std::min(row.size(), std::size_t(std::max(1, top_k)));
            std::partial_sort(row.begin(), row.begin() + k, row.end(), std::greater<>());
            s.mean_entropy += ent;
            s.mean_topk_mass += std::accumulate(row.begin(), row.begin() + k, 0.0);
            s.mean_log_keys += std::log(double(row.size()));
        }
        s.mean_entropy /= n;
        s.mean_topk_mass /= n;
        s.mean_log_keys /= n;
        out.push_back(s);
    }
    return out;
}

// ---- model --------------------------------------------------------------------

std::string HybridDiT::block_prefix(int layer, const std::string& stream) const {
    return "block." + std::to_string(layer) + "." + stream + ".";
}

void HybridDiT::add_block_params(int layer, const std::string& stream, Rng& rng) {
    const std::size_t d = sz(cfg_.d_model), hd = sz(cfg_.head_dim), hid = sz(cfg_.mlp_width());
    const std::string p = block_prefix(layer, stream);
    params_.add(p + "mod.weight", Tensor::zeros({d, 6 * d}));
    params_.add(p + "mod.bias", Tensor::zeros({6 * d}));
    params_.add(p + "qkv.weight", normal_init({d, 3 * d}, 1.0 / std::sqrt(double(d)), rng));
    params_.add(p + "qkv.bias", Tensor::zeros({3 * d}));
    params_.add(p + "q_norm.weight", Tensor::full({hd}, 1.0));
    params_.add(p + "k_norm.weight", Tensor::full({hd}, 1.0));
    params_.add(p + "proj.weight", normal_init({d, d}, 1.0 / std::sqrt(double(d)), rng));
    params_.add(p + "proj.bias", Tensor::zeros({d}));
    params_.add(p + "mlp_in.weight", normal_init({d, hid}, 1.0 / std::sqrt(double(d)), rng));
    params_.add(p + "mlp_in.bias", Tensor::zeros({hid}));
    params_.add(p + "mlp_out.weight", normal_init({hid, d}, 1.0 / std::sqrt(double(hid)), rng));
    params_.add(p + "mlp_out.bias", Tensor::zeros({d}));
}

HybridDiT::HybridDiT(HybridDiTConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t d = sz(cfg_.d_model), P = sz(cfg_.patch.volume());
    const std::size_t in = sz(cfg_.in_channels) * P, out = sz(cfg_.out_channels) * P, F = sz(cfg_.time_freq_dim);
    params_.add("embed.patch.weight", normal_init({in, d}, 1.0 / std::sqrt(double(in)), rng));
    params_.add("embed.patch.bias", Tensor::zeros({d}));
    params_.add("embed.text.table", normal_init({sz(cfg_.vocab), d}, 1.0, rng));
    params_.add("embed.text.pos", normal_init({sz(cfg_.max_text_len), d}, 0.02, rng));
    if (cfg_.use_factorized_pe) {
        params_.add("pe.t", normal_init({sz(cfg_.max_grid.t), d}, 0.02, rng));
        params_.add("pe.h", normal_init({sz(cfg_.max_grid.h), d}, 0.02, rng));
        params_.add("pe.w", normal_init({sz(cfg_.max_grid.w), d}, 0.02, rng));
    }
    params_.add("time.fc1.weight", normal_init({F, d}, 1.0 / std::sqrt(double(F)), rng));
    params_.add("time.fc1.bias", Tensor::zeros({d}));
    params_.add("time.fc2.weight", normal_init({d, d}, 1.0 / std::sqrt(double(d)), rng));
    params_.add("time.fc2.bias", Tensor::zeros({d}));
    for (int l = 0; l < cfg_.layers(); ++l) {
        if (l < cfg_.m_dual) {
            add_block_params(l, "video", rng);
            add_block_params(l, "text", rng);
        } else {
            add_block_params(l, "joint", rng);
        }
    }
    params_.add("final.mod.weight", Tensor::zeros({d, 2 * d}));
    params_.add("final.mod.bias", Tensor::zeros({2 * d}));
    params_.add("final.proj.weight", normal_init({d, out}, 0.02, rng));
    params_.add("final.proj.bias", Tensor::zeros({out}));
}

std::size_t parameter_count(const HybridDiTConfig& c) {
    c.validate();
    const std::size_t d = sz(c.d_model), hd = sz(c.head_dim), hid = sz(c.mlp_width()), P = sz(c.patch.volume());
    const std::size_t block = d * 6 * d + 6 * d + d * 3 * d + 3 * d + 2 * hd + d * d + d + d * hid + hid + hid * d + d;
    std::size_t n = sz(c.in_channels) * P * d + d + sz(c.vocab) * d + sz(c.max_text_len) * d;
    if (c.use_factorized_pe) n += sz(c.max_grid.t + c.max_grid.h + c.max_grid.w) * d;
    n += sz(c.time_freq_dim) * d + d + d * d + d;
    n += block * sz(2 * c.m_dual + c.n_single);
    n += d * 2 * d + 2 * d + d * sz(c.out_channels) * P + sz(c.out_channels) * P;
    return n;
}

std::vector<std::optional<Dim3>> HybridDiT::layer_windows() const {
    std::vector<std::optional<Dim3>> out(sz(cfg_.layers()));
    if (cfg_.attn_mode == AttnMode::Full) return out;
    const int L = cfg_.layers(), B = cfg_.full_attn_boundary_layers;
    int k = 0;
    for (int l = 0; l < L; ++l) {
        if (l < B || l >= L - B) continue;
        out[l] = cfg_.window_schedule[sz(k++) % cfg_.window_schedule.size()];
    }
    return out;
}

JointLayout HybridDiT::layout_for(const std::vector<Dim3>& grids, const std::vector<std::size_t>& text_lens) const {
    JointLayout L;
    L.grids = grids;
    const std::size_t B = grids.size();
    RopeTables text_rope;
    for (std::size_t s = 0; s < B; ++s) {
        L.video_offset.push_back(L.n_video);
        const std::size_t n = sz(grids[s].volume());
        L.video_sample.insert(L.video_sample.end(), n, s);
        L.n_video += n;
        append_rope(L.rope, rope_tables(grids[s], cfg_.rope_split, cfg_.head_dim, cfg_.rope_base, 0));
    }
    for (std::size_t s = 0; s < B; ++s) {
        L.text_sample.insert(L.text_sample.end(), text_lens[s], s);
        L.n_text += text_lens[s];
    }
    // text rows rotate by nothing
    const std::size_t half = sz(cfg_.head_dim / 2);
    L.rope.cos.insert(L.rope.cos.end(), L.n_text * half, 1.0);
    L.rope.sin.insert(L.rope.sin.end(), L.n_text * half, 0.0);
    L.rope.rows += L.n_text;
    for (auto s : L.video_sample) L.full_groups.push_back(int(s));
    for (auto s : L.text_sample) L.full_groups.push_back(int(s));
    return L;
}

std::vector<int> HybridDiT::groups_for_layer(int layer, const JointLayout& L) const {
    const auto win = layer_windows()[sz(layer)];
    if (!win) return L.full_groups;
    std::vector<int> g;
    g.reserve(L.n_video + L.n_text);
    int base = 0;
    for (const auto& grid : L.grids) {
        const auto wg = window_groups(grid, *win, base);
        g.insert(g.end(), wg.begin(), wg.end());
        base += grid.volume() / win->volume();
    }
    // each sample's text attends within its own text
    for (auto s : L.text_sample) g.push_back(base + int(s));
    return g;
}

Tensor HybridDiT::time_condition(const std::vector<double>& ts) const {
    const std::size_t F = sz(cfg_.time_freq_dim);
    std::vector<double> feats;
    feats.reserve(ts.size() * F);
    for (double t : ts) {
        const auto f = timestep_features(t, cfg_.time_freq_dim);
        feats.insert(feats.end(), f.begin(), f.end());
    }
    const Tensor x = Tensor::from({ts.size(), F}, std::move(feats));
    const Tensor h = silu(linear(x, params_.get("time.fc1.weight"), params_.get("time.fc1.bias")));
    return silu(linear(h, params_.get("time.fc2.weight"), params_.get("time.fc2.bias")));
}

Tensor HybridDiT::stream_modulation(const std::string& prefix, const Tensor& cond,
                                    const std::vector<std::size_t>& rows) const {
    return embedding(linear(cond, params_.get(prefix + "mod.weight"), params_.get(prefix + "mod.bias")), rows);
}

HybridDiT::QKV HybridDiT::stream_qkv(const std::string& prefix, const Tensor& x, const Tensor& mod) const {
    const std::size_t d = sz(cfg_.d_model), n = x.dim(0), H = sz(cfg_.n_heads), hd = sz(cfg_.head_dim);
    const Tensor h = modulate(rms_norm(x, kNormEps), slice(mod, 1, 0, d), slice(mod, 1, d, 2 * d));
    const Tensor qkv = linear(h, params_.get(prefix + "qkv.weight"), params_.get(prefix + "qkv.bias"));
    auto head_norm = [&](const Tensor& t, const std::string& role) {
        return reshape(rms_norm(reshape(t, {n * H, hd}), kNormEps, params_.get(prefix + role)), {n, d});
    };
    return {head_norm(slice(qkv, 1, 0, d), "q_norm.weight"), head_norm(slice(qkv, 1, d, 2 * d), "k_norm.weight"),
            slice(qkv, 1, 2 * d, 3 * d)};
}

Tensor HybridDiT::stream_attn_residual(const std::string& prefix, const Tensor& x, const Tensor& attn,
                                       const Tensor& mod) const {
    const std::size_t d = sz(cfg_.d_model);
    const Tensor o = linear(attn, params_.get(prefix + "proj.weight"), params_.get(prefix + "proj.bias"));
    return x + slice(mod, 1, 2 * d, 3 * d) * o;
}

Tensor HybridDiT::stream_mlp_residual(const std::string& prefix, const Tensor& x, const Tensor& mod) const {
    const std::size_t d = sz(cfg_.d_model);
    const Tensor h = modulate(rms_norm(x, kNormEps), slice(mod, 1, 3 * d, 4 * d), slice(mod, 1, 4 * d, 5 * d));
    const Tensor m = linear(gelu(linear(h, params_.get(prefix + "mlp_in.weight"), params_.get(prefix + "mlp_in.bias"))),
                            params_.get(prefix + "mlp_out.weight"), params_.get(prefix + "mlp_out.bias"));
    return x + slice(mod, 1, 5 * d, 6 * d) * m;
}

Tensor HybridDiT::rotate(const Tensor& x, const JointLayout& L) const {
    if (!L.use_rope) return x;
    return rope(x, sz(cfg_.n_heads), L.rope.cos, L.rope.sin);
}

std::pair<Tensor, Tensor> HybridDiT::dual_block(int layer, const Tensor& video, const Tensor& text, const Tensor& cond,
                                                const JointLayout& L, const std::vector<int>& groups,
                                                std::vector<double>* probs) const {
    const std::string pv = block_prefix(layer, "video"), pt = block_prefix(layer, "text");
    const bool has_text = L.n_text > 0;
    const Tensor mod_v = stream_modulation(pv, cond, L.video_sample);
    const QKV v = stream_qkv(pv, video, mod_v);
    Tensor mod_t;
    QKV t;
    Tensor q = v.q, k = v.k, val = v.v;
    if (has_text) {
        mod_t = stream_modulation(pt, cond, L.text_sample);
        t = stream_qkv(pt, text, mod_t);
        q = concat({v.q, t.q}, 0);
        k = concat({v.k, t.k}, 0);
        val = concat({v.v, t.v}, 0);
    }
    const Tensor a = attention(rotate(q, L), rotate(k, L), val, sz(cfg_.n_heads), groups, probs);
    Tensor out_v = stream_attn_residual(pv, video, has_text ? slice(a, 0, 0, L.n_video) : a, mod_v);
    out_v = stream_mlp_residual(pv, out_v, mod_v);
    if (!has_text) return {out_v, text};
    Tensor out_t = stream_attn_residual(pt, text, slice(a, 0, L.n_video, L.n_video + L.n_text), mod_t);
    out_t = stream_mlp_residual(pt, out_t, mod_t);
    return {out_v, out_t};
}

Tensor HybridDiT::single_block(int layer, const Tensor& joint, const Tensor& cond, const JointLayout& L,
                               const std::vector<int>& groups, std::vector<double>* probs) const {
    const std::string p = block_prefix(layer, "joint");
    std::vector<std::size_t> rows = L.video_sample;
    rows.insert(rows.end(), L.text_sample.begin(), L.text_sample.end());
    const Tensor mod = stream_modulation(p, cond, rows);
    const QKV x = stream_qkv(p, joint, mod);
    const Tensor a = attention(rotate(x.q, L), rotate(x.k, L), x.v, sz(cfg_.n_heads), groups, probs);
    return stream_mlp_residual(p, stream_attn_residual(p, joint, a, mod), mod);
}

ForwardResult HybridDiT::forward(const std::vector<DiTSample>& batch, const ForwardOptions& opt) const {
    WAVER_REQUIRE(!batch.empty(), ContractError, "forward on an empty batch");
    WAVER_REQUIRE(opt.tap_layer < cfg_.layers(), ContractError, "tap layer beyond model depth");
    if (opt.record_attention)
        WAVER_REQUIRE(cfg_.attn_mode == AttnMode::Full, UnsupportedMode,
                      "attention statistics need full attention mode");
    const std::size_t d = sz(cfg_.d_model);
    std::vector<Dim3> grids;
    std::vector<std::size_t> text_lens;
    std::vector<Tensor> patches;
    std::vector<std::size_t> text_ids, text_pos;
    std::vector<double> ts;
    for (const auto& s : batch) {
        WAVER_REQUIRE(s.x.ndim() == 4 && s.x.dim(0) == sz(cfg_.in_channels), DimensionError,
                      "model input must be [" + std::to_string(cfg_.in_channels) + ",T,H,W], got " +
                          shape_str(s.x.shape()));
        WAVER_REQUIRE(s.t >= 0.0 && s.t <= 1.0, DomainError, "timestep must lie in [0,1]");
        WAVER_REQUIRE(int(s.text.size()) <= cfg_.max_text_len, ContractError, "caption longer than max_text_len");
        grids.push_back(patch_grid(int(s.x.dim(1)), int(s.x.dim(2)), int(s.x.dim(3)), cfg_.patch));
        patches.push_back(patchify_raw(s.x, cfg_.patch));
        for (std::size_t i = 0; i < s.text.size(); ++i) {
            WAVER_REQUIRE(s.text[i] >= 0 && s.text[i] < cfg_.vocab, ContractError,
                          "text token " + std::to_string(s.text[i]) + " outside vocabulary");
            text_ids.push_back(sz(s.text[i]));
            text_pos.push_back(i);
        }
        text_lens.push_back(s.text.size());
        ts.push_back(s.t);
    }
    const JointLayout L = layout_for(grids, text_lens);

    Tensor video = linear(concat(patches, 0), params_.get("embed.patch.weight"), params_.get("embed.patch.bias"));
    if (cfg_.use_factorized_pe) {
        std::vector<Tensor> pe;
        for (const auto& g : grids) pe.push_back(factorized_pe(params_.get("pe.t"), params_.get("pe.h"), params_.get("pe.w"), g));
        video = video + concat(pe, 0);
    }
    Tensor text;
    if (L.n_text > 0)
        text = embedding(params_.get("embed.text.table"), text_ids) + embedding(params_.get("embed.text.pos"), text_pos);
    const Tensor cond = time_condition(ts);

    ForwardResult result;
    auto tap = [&](const Tensor& v) {
        for (std::size_t s = 0; s < batch.size(); ++s)
            result.tapped.push_back(slice(v, 0, L.video_offset[s], L.video_offset[s] + sz(grids[s].volume())));
    };
    std::vector<double> probs;
    Tensor joint;
    for (int l = 0; l < cfg_.layers(); ++l) {
        const auto groups = groups_for_layer(l, L);
        std::vector<double>* pp = opt.record_attention ? &probs : nullptr;
        if (l < cfg_.m_dual) {
            std::tie(video, text) = dual_block(l, video, text, cond, L, groups, pp);
            if (l == opt.tap_layer) tap(video);
        } else {
            if (l == cfg_.m_dual) joint = L.n_text > 0 ? concat({video, text}, 0) : video;
            joint = single_block(l, joint, cond, L, groups, pp);
            if (l == opt.tap_layer) tap(L.n_text > 0 ? slice(joint, 0, 0, L.n_video) : joint);
        }
        if (pp) {
            const auto st = summarize_attention(probs, sz(cfg_.n_heads), L.n_video + L.n_text, groups, opt.top_k, l);
            result.attention.insert(result.attention.end(), st.begin(), st.end());
        }
    }
    if (cfg_.n_single > 0) video = L.n_text > 0 ? slice(joint, 0, 0, L.n_video) : joint;

    const Tensor fmod = embedding(linear(cond, params_.get("final.mod.weight"), params_.get("final.mod.bias")),
                                  L.video_sample);
    const Tensor h = modulate(rms_norm(video, kNormEps), slice(fmod, 1, 0, d), slice(fmod, 1, d, 2 * d));
    const Tensor out = linear(h, params_.get("final.proj.weight"), params_.get("final.proj.bias"));
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto& x = batch[s].x;
        const Tensor rows = slice(out, 0, L.video_offset[s], L.video_offset[s] + sz(grids[s].volume()));
        result.velocity.push_back(
            unpatchify_raw(rows, cfg_.out_channels, int(x.dim(1)), int(x.dim(2)), int(x.dim(3)), cfg_.patch));
    }
    return result;
}

Tensor HybridDiT::forward_one(const Tensor& x, const std::vector<int>& text, double t) const {
    return forward({DiTSample{x, text, t}}).velocity[0];
}

}  // namespace waver
