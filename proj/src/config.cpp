#include "waver/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "waver/error.hpp"

namespace waver {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ContractError("config key '" + key + "': expected a number, got '" + v + "'");
}

long to_long(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long d = std::stol(v, &pos);
        if (pos == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ContractError("config key '" + key + "': expected an integer, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ContractError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

std::string fmt(double d) {
    std::ostringstream os;
    os << std::setprecision(17) << d;
    return os.str();
}

std::string dim_text(const Dim3& d) {
    return std::to_string(d.t) + "x" + std::to_string(d.h) + "x" + std::to_string(d.w);
}

std::string join_dims(const std::vector<Dim3>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + dim_text(v[i]);
    return s;
}

template <class T>
std::string join(const std::vector<T>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

}  // namespace

ConfigMap parse_config(std::istream& is) {
    ConfigMap kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        WAVER_REQUIRE(eq != std::string::npos, ContractError,
                      "config line " + std::to_string(lineno) + " is not key=value: " + line);
        const std::string key = trim(line.substr(0, eq));
        WAVER_REQUIRE(!key.empty(), ContractError, "config line " + std::to_string(lineno) + " has an empty key");
        kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

ConfigMap parse_config_file(const std::string& path) {
    std::ifstream f(path);
    WAVER_REQUIRE(f.good(), IoError, "cannot open config file " + path);
    return parse_config(f);
}

ConfigMap parse_overrides(const std::vector<std::string>& items) {
    std::ostringstream os;
    for (const auto& s : items) os << s << "\n";
    std::istringstream is(os.str());
    return parse_config(is);
}

std::string to_string(Stage s) {
    switch (s) {
        case Stage::T2I: return "t2i";
        case Stage::LowresVideo: return "lowres_video";
        case Stage::MidresVideo: return "midres_video";
        case Stage::Refiner: return "refiner";
    }
    return "?";
}

Stage stage_from_string(const std::string& s) {
    if (s == "t2i") return Stage::T2I;
    if (s == "lowres_video") return Stage::LowresVideo;
    if (s == "midres_video") return Stage::MidresVideo;
    if (s == "refiner") return Stage::Refiner;
    throw ContractError("unknown stage '" + s + "' (expected t2i, lowres_video, midres_video or refiner)");
}

std::string to_string(AttnMode m) { return m == AttnMode::Full ? "full" : "window"; }

Dim3 parse_dim3(const std::string& s) {
    const auto parts = split(s, 'x');
    WAVER_REQUIRE(parts.size() == 3, ContractError, "expected TxHxW, got '" + s + "'");
    Dim3 d;
    d.t = int(to_long(s, parts[0]));
    d.h = int(to_long(s, parts[1]));
    d.w = int(to_long(s, parts[2]));
    return d;
}

double OptimConfig::lr_at(int step) const {
    const double lr = base_lr * lr_ratio;
    if (warmup > 0 && step < warmup) return lr * double(step + 1) / double(warmup);
    return lr;
}

RunConfig RunConfig::preset(Stage stage) {
    RunConfig c;
    c.stage = stage;
    c.model.d_model = 64;
    c.model.n_heads = 4;
    c.model.head_dim = 16;
    c.model.rope_split = default_rope_split(16);
    c.model.mlp_hidden = 0;
    c.model.time_freq_dim = 32;
    c.model.max_text_len = 12;
    c.sampler.n_steps = 50;
    switch (stage) {
        case Stage::T2I:
            c.data.frames = 1;
            c.data.image_fraction = 1.0;
            c.timesteps = TimestepSampler::logit_normal(0.5, 1.0, 1.0);
            c.optim.lr_ratio = 1.0;
            break;
        case Stage::LowresVideo:
            c.data.height = c.data.width = 8;
            c.data.image_fraction = 0.2;
            c.timesteps = TimestepSampler::mode(1.29, 1.5);
            c.optim.lr_ratio = 1.0;
            break;
        case Stage::MidresVideo:
            c.data.image_fraction = 0.2;
            c.data.p_i2v = 0.2;
            c.timesteps = TimestepSampler::mode(1.29, 2.5);
            c.optim.lr_ratio = 0.5;
            c.align.enabled = true;
            break;
        case Stage::Refiner:
            c.data.height = c.data.width = 32;
            c.data.p_uncond = 1.0;
            c.data.pack_tokens = 256;
            c.degrade.down_factor = 2;
            c.timesteps = TimestepSampler::uniform(4.5);
            c.optim.lr_ratio = 0.1;
            c.model.in_channels = 3;
            c.model.m_dual = 0;
            c.model.n_single = 4;
            c.model.attn_mode = AttnMode::Window;
            c.model.window_schedule = {{1, 4, 4}, {4, 2, 2}};
            break;
    }
    c.sampler.shift = c.timesteps.shift;
    return c;
}

void RunConfig::apply(const ConfigMap& kv) {
    bool head_dim_set = false, rope_set = false;
    for (const auto& [key, v] : kv) {
        auto D = [&] { return to_double(key, v); };
        auto I = [&] { return int(to_long(key, v)); };
        auto B = [&] { return to_bool(key, v); };
        if (key == "stage") stage = stage_from_string(v);
        else if (key == "seed") seed = std::uint64_t(to_long(key, v));
        else if (key == "log_every") log_every = I();
        else if (key == "model.m_dual") model.m_dual = I();
        else if (key == "model.n_single") model.n_single = I();
        else if (key == "model.d_model") model.d_model = I();
        else if (key == "model.n_heads") model.n_heads = I();
        else if (key == "model.head_dim") model.head_dim = I(), head_dim_set = true;
        else if (key == "model.in_channels") model.in_channels = I();
        else if (key == "model.out_channels") model.out_channels = I();
        else if (key == "model.patch") model.patch = parse_dim3(v);
        else if (key == "model.rope_split") model.rope_split = parse_dim3(v), rope_set = true;
        else if (key == "model.mlp_hidden") model.mlp_hidden = I();
        else if (key == "model.pe") model.use_factorized_pe = B();
        else if (key == "model.attn_mode") {
            WAVER_REQUIRE(v == "full" || v == "window", ContractError, "model.attn_mode must be full or window");
            model.attn_mode = v == "full" ? AttnMode::Full : AttnMode::Window;
        } else if (key == "model.window_schedule") {
            model.window_schedule.clear();
            for (const auto& p : split(v, ',')) model.window_schedule.push_back(parse_dim3(p));
        } else if (key == "model.boundary_layers") model.full_attn_boundary_layers = I();
        else if (key == "model.time_freq_dim") model.time_freq_dim = I();
        else if (key == "model.max_text_len") model.max_text_len = I();
        else if (key == "model.max_grid") model.max_grid = parse_dim3(v);
        else if (key == "timesteps.kind") timesteps.kind = sampler_kind_from_string(v);
        else if (key == "timesteps.m") timesteps.m = D();
        else if (key == "timesteps.s") timesteps.s = D();
        else if (key == "timesteps.shift") timesteps.shift = D();
        else if (key == "optim.base_lr") optim.base_lr = D();
        else if (key == "optim.lr_ratio") optim.lr_ratio = D();
        else if (key == "optim.beta1") optim.beta1 = D();
        else if (key == "optim.beta2") optim.beta2 = D();
        else if (key == "optim.weight_decay") optim.weight_decay = D();
        else if (key == "optim.eps") optim.eps = D();
        else if (key == "optim.grad_clip") optim.grad_clip = D();
        else if (key == "optim.steps") optim.steps = I();
        else if (key == "optim.batch_size") optim.batch_size = I();
        else if (key == "optim.warmup") optim.warmup = I();
        else if (key == "data.frames") data.frames = I();
        else if (key == "data.height") data.height = I();
        else if (key == "data.width") data.width = I();
        else if (key == "data.pool_size") data.pool_size = I();
        else if (key == "data.image_fraction") data.image_fraction = D();
        else if (key == "data.p_i2v") data.p_i2v = D();
        else if (key == "data.p_uncond") data.p_uncond = D();
        else if (key == "data.pack_tokens") data.pack_tokens = I();
        else if (key == "data.max_per_bin") data.max_per_bin = I();
        else if (key == "data.bucket_edges") {
            data.bucket_edges.clear();
            for (const auto& p : split(v, ',')) data.bucket_edges.push_back(int(to_long(key, p)));
        } else if (key == "data.min_motion") data.min_motion = D();
        else if (key == "data.max_motion") data.max_motion = D();
        else if (key == "data.seed") data.seed = std::uint64_t(to_long(key, v));
        else if (key == "data.prefetch") data.prefetch = I();
        else if (key == "align.enabled") align.enabled = B();
        else if (key == "align.lambda") align.lambda = D();
        else if (key == "align.tap_layer") align.tap_layer = I();
        else if (key == "align.spatial_ds") align.spatial_ds = I();
        else if (key == "align.temporal_ds") align.temporal_ds = I();
        else if (key == "align.teacher_dim") align.teacher_dim = I();
        else if (key == "sample.steps") sampler.n_steps = I();
        else if (key == "sample.shift") sampler.shift = D();
        else if (key == "sample.guidance") sampler.guidance = guidance_from_string(v);
        else if (key == "sample.scale") sampler.scale = D();
        else if (key == "sample.apg_threshold") sampler.apg_threshold = D();
        else if (key == "sample.apg_eta") sampler.apg_eta = D();
        else if (key == "sample.neg") {
            sampler.neg_tokens.clear();
            for (const auto& p : split(v, ',')) sampler.neg_tokens.push_back(int(to_long(key, p)));
        } else if (key == "refiner.down_factor") degrade.down_factor = I();
        else if (key == "refiner.wd_min") degrade.wd_min = D();
        else if (key == "refiner.wd_max") degrade.wd_max = D();
        else if (key == "refiner.steps") refine_steps = I();
        else throw ContractError("unknown config key '" + key + "'");
    }
    if (!head_dim_set && model.n_heads > 0 && model.d_model % model.n_heads == 0)
        model.head_dim = model.d_model / model.n_heads;
    if (!rope_set && (kv.count("model.head_dim") || kv.count("model.d_model") || kv.count("model.n_heads")))
        model.rope_split = default_rope_split(model.head_dim);
}

void RunConfig::validate() const {
    model.validate();
    timesteps.validate();
    sampler.validate();
    degrade.validate();
    align.validate();
    WAVER_REQUIRE(optim.steps >= 0 && optim.batch_size >= 1, ContractError, "optim.steps >= 0 and batch_size >= 1");
    WAVER_REQUIRE(optim.base_lr > 0 && optim.lr_ratio > 0, ContractError, "learning rate must be positive");
    WAVER_REQUIRE(data.frames >= 1 && data.height >= 1 && data.width >= 1 && data.pool_size >= 1, ContractError,
                  "data dims and pool size must be positive");
    WAVER_REQUIRE(data.image_fraction >= 0 && data.image_fraction <= 1 && data.p_i2v >= 0 && data.p_i2v <= 1 &&
                      data.p_uncond >= 0 && data.p_uncond <= 1,
                  DomainError, "data probabilities must lie in [0,1]");
    const int expect_in = stage == Stage::Refiner ? 3 : 7;
    WAVER_REQUIRE(model.in_channels == expect_in, ContractError,
                  "stage " + to_string(stage) + " needs model.in_channels = " + std::to_string(expect_in));
    WAVER_REQUIRE(refine_steps >= 0, ContractError, "refiner.steps must be >= 0");
}

std::string RunConfig::to_text() const {
    std::ostringstream os;
    auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << "\n"; };
    kv("stage", to_string(stage));
    kv("seed", std::to_string(seed));
    kv("log_every", std::to_string(log_every));
    kv("model.m_dual", std::to_string(model.m_dual));
    kv("model.n_single", std::to_string(model.n_single));
    kv("model.d_model", std::to_string(model.d_model));
    kv("model.n_heads", std::to_string(model.n_heads));
    kv("model.head_dim", std::to_string(model.head_dim));
    kv("model.in_channels", std::to_string(model.in_channels));
    kv("model.out_channels", std::to_string(model.out_channels));
    kv("model.patch", dim_text(model.patch));
    kv("model.rope_split", dim_text(model.rope_split));
    kv("model.mlp_hidden", std::to_string(model.mlp_hidden));
    kv("model.pe", model.use_factorized_pe ? "true" : "false");
    kv("model.attn_mode", to_string(model.attn_mode));
    kv("model.window_schedule", join_dims(model.window_schedule));
    kv("model.boundary_layers", std::to_string(model.full_attn_boundary_layers));
    kv("model.time_freq_dim", std::to_string(model.time_freq_dim));
    kv("model.max_text_len", std::to_string(model.max_text_len));
    kv("model.max_grid", dim_text(model.max_grid));
    kv("timesteps.kind", to_string(timesteps.kind));
    kv("timesteps.m", fmt(timesteps.m));
    kv("timesteps.s", fmt(timesteps.s));
    kv("timesteps.shift", fmt(timesteps.shift));
    kv("optim.base_lr", fmt(optim.base_lr));
    kv("optim.lr_ratio", fmt(optim.lr_ratio));
    kv("optim.beta1", fmt(optim.beta1));
    kv("optim.beta2", fmt(optim.beta2));
    kv("optim.weight_decay", fmt(optim.weight_decay));
    kv("optim.eps", fmt(optim.eps));
    kv("optim.grad_clip", fmt(optim.grad_clip));
    kv("optim.steps", std::to_string(optim.steps));
    kv("optim.batch_size", std::to_string(optim.batch_size));
    kv("optim.warmup", std::to_string(optim.warmup));
    kv("data.frames", std::to_string(data.frames));
    kv("data.height", std::to_string(data.height));
    kv("data.width", std::to_string(data.width));
    kv("data.pool_size", std::to_string(data.pool_size));
    kv("data.image_fraction", fmt(data.image_fraction));
    kv("data.p_i2v", fmt(data.p_i2v));
    kv("data.p_uncond", fmt(data.p_uncond));
    kv("data.pack_tokens", std::to_string(data.pack_tokens));
    kv("data.max_per_bin", std::to_string(data.max_per_bin));
    if (!data.bucket_edges.empty()) kv("data.bucket_edges", join(data.bucket_edges));
    kv("data.min_motion", fmt(data.min_motion));
    kv("data.max_motion", fmt(data.max_motion));
    kv("data.seed", std::to_string(data.seed));
    kv("data.prefetch", std::to_string(data.prefetch));
    kv("align.enabled", align.enabled ? "true" : "false");
    kv("align.lambda", fmt(align.lambda));
    kv("align.tap_layer", std::to_string(align.tap_layer));
    kv("align.spatial_ds", std::to_string(align.spatial_ds));
    kv("align.temporal_ds", std::to_string(align.temporal_ds));
    kv("align.teacher_dim", std::to_string(align.teacher_dim));
    kv("sample.steps", std::to_string(sampler.n_steps));
    kv("sample.shift", fmt(sampler.shift));
    kv("sample.guidance", to_string(sampler.guidance));
    kv("sample.scale", fmt(sampler.scale));
    kv("sample.apg_threshold", fmt(sampler.apg_threshold));
    kv("sample.apg_eta", fmt(sampler.apg_eta));
    if (!sampler.neg_tokens.empty()) kv("sample.neg", join(sampler.neg_tokens));
    kv("refiner.down_factor", std::to_string(degrade.down_factor));
    kv("refiner.wd_min", fmt(degrade.wd_min));
    kv("refiner.wd_max", fmt(degrade.wd_max));
    kv("refiner.steps", std::to_string(refine_steps));
    return os.str();
}

std::uint64_t RunConfig::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : to_text()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

RunConfig make_run_config(const ConfigMap& kv) {
    const auto it = kv.find("stage");
    RunConfig c = RunConfig::preset(it == kv.end() ? Stage::LowresVideo : stage_from_string(it->second));
    c.apply(kv);
    c.validate();
    return c;
}

}  // namespace waver
