#include "waver/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "waver/error.hpp"
#include "waver/schedules.hpp"

namespace waver {

namespace {

constexpr std::uint64_t kHeldoutStream = 0x4E1D;
constexpr std::uint64_t kReferenceDraws = 0x75;

}  // namespace

// ---- averaging --------------------------------------------------------------

TensorList average_models(const std::vector<TensorList>& models) {
    WAVER_REQUIRE(!models.empty(), ContractError, "average_models needs at least one model");
    for (std::size_t k = 1; k < models.size(); ++k) require_same_schema(models[0], models[k]);
    TensorList out;
    for (const auto& r : models[0]) out.push_back({r.name, r.tensor.detach().clone()});
    for (std::size_t k = 1; k < models.size(); ++k)
        for (std::size_t i = 0; i < out.size(); ++i) {
            auto mean = out[i].tensor.mutable_data();
            const auto x = models[k][i].tensor.data();
            for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += (x[j] - mean[j]) / double(k + 1);
        }
    return out;
}

// ---- frames -----------------------------------------------------------------

std::uint8_t display_byte(double v) {
    const double c = std::clamp(v, -1.0, 1.0);
    return static_cast<std::uint8_t>(std::lround((c + 1.0) * 127.5));
}

std::vector<FrameStats> render_frames(const LatentVideo& video, const std::filesystem::path& dir,
                                      const std::string& prefix) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    WAVER_REQUIRE(!ec && std::filesystem::is_directory(dir), IoError, "cannot create directory " + dir.string());
    const int C = video.channels(), T = video.frames(), H = video.height(), W = video.width();
    std::vector<FrameStats> stats;
    for (int t = 0; t < T; ++t) {
        const auto path = dir / (prefix + "_" + std::to_string(t) + ".ppm");
        std::ofstream f(path, std::ios::binary);
        WAVER_REQUIRE(f.good(), IoError, "cannot write " + path.string());
        f << "P6\n" << W << ' ' << H << "\n255\n";
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w)
                for (int c = 0; c < 3; ++c) {
                    const char b = static_cast<char>(display_byte(video.at(std::min(c, C - 1), t, h, w)));
                    f.write(&b, 1);
                }
        WAVER_REQUIRE(f.good(), IoError, "failed writing " + path.string());
        FrameStats s;
        s.frame = t;
        s.min = 1e300;
        s.max = -1e300;
        double sum = 0.0, sq = 0.0;
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const double v = video.at(c, t, h, w);
                    sum += v;
                    sq += v * v;
                    s.min = std::min(s.min, v);
                    s.max = std::max(s.max, v);
                }
        const double n = double(C) * H * W;
        s.mean = sum / n;
        s.stddev = std::sqrt(std::max(0.0, sq / n - s.mean * s.mean));
        stats.push_back(s);
    }
    const auto csv = dir / (prefix + "_stats.csv");
    std::ofstream f(csv);
    WAVER_REQUIRE(f.good(), IoError, "cannot write " + csv.string());
    f << "frame,mean,std,min,max\n" << std::setprecision(10);
    for (const auto& s : stats) f << s.frame << ',' << s.mean << ',' << s.stddev << ',' << s.min << ',' << s.max << '\n';
    return stats;
}

Pixmap read_ppm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    WAVER_REQUIRE(f.good(), IoError, "cannot open " + path.string());
    auto token = [&] {
        std::string tok;
        char c;
        while (f.get(c)) {
            if (c == '#') {
                std::string rest;
                std::getline(f, rest);
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                if (!tok.empty()) break;
            } else {
                tok += c;
            }
        }
        return tok;
    };
    WAVER_REQUIRE(token() == "P6", IoError, path.string() + " is not a binary PPM");
    Pixmap p;
    try {
        p.width = std::stoi(token());
        p.height = std::stoi(token());
        WAVER_REQUIRE(std::stoi(token()) == 255, IoError, path.string() + " must use maxval 255");
    } catch (const std::invalid_argument&) {
        throw IoError("malformed PPM header in " + path.string());
    }
    p.rgb.resize(std::size_t(p.width) * p.height * 3);
    f.read(reinterpret_cast<char*>(p.rgb.data()), std::streamsize(p.rgb.size()));
    WAVER_REQUIRE(f.gcount() == std::streamsize(p.rgb.size()), IoError, "truncated PPM " + path.string());
    return p;
}

// ---- generation metrics ----------------------------------------------------

std::vector<int> blob_areas(const LatentVideo& video, int frame, const BlobOptions& opt) {
    const int C = video.channels(), H = video.height(), W = video.width();
    std::vector<char> fg(std::size_t(H) * W, 0);
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            double m = 0.0;
            for (int c = 0; c < C; ++c) m = std::max(m, std::abs(video.at(c, frame, h, w)));
            fg[std::size_t(h) * W + w] = m > opt.threshold;
        }
    const int max_area = int(opt.max_fraction * H * W);
    std::vector<int> areas, stack;
    for (int start = 0; start < H * W; ++start) {
        if (!fg[std::size_t(start)]) continue;
        fg[std::size_t(start)] = 0;
        stack.assign(1, start);
        int area = 0;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            ++area;
            const int h = p / W, w = p % W;
            const int nb[4][2] = {{h - 1, w}, {h + 1, w}, {h, w - 1}, {h, w + 1}};
            for (const auto& q : nb) {
                if (q[0] < 0 || q[0] >= H || q[1] < 0 || q[1] >= W) continue;
                const std::size_t qi = std::size_t(q[0]) * W + q[1];
                if (fg[qi]) {
                    fg[qi] = 0;
                    stack.push_back(int(qi));
                }
            }
        }
        if (area >= opt.min_area && area <= max_area) areas.push_back(area);
    }
    return areas;
}

double sprite_presence(const LatentVideo& video, const BlobOptions& opt) {
    int hit = 0;
    for (int t = 0; t < video.frames(); ++t) hit += !blob_areas(video, t, opt).empty();
    return double(hit) / video.frames();
}

std::vector<double> smooth_trailing(const std::vector<double>& x, int window) {
    WAVER_REQUIRE(window >= 1, ContractError, "smoothing window must be positive");
    std::vector<double> out(x.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        acc += x[i];
        if (i >= std::size_t(window)) acc -= x[i - std::size_t(window)];
        out[i] = acc / double(std::min(i + 1, std::size_t(window)));
    }
    return out;
}

double ks_statistic(std::vector<double> a, std::vector<double> b) {
    WAVER_REQUIRE(!a.empty() && !b.empty(), ContractError, "ks_statistic needs two non-empty samples");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() && j < b.size()) {
        const double x = std::min(a[i], b[j]);
        while (i < a.size() && a[i] == x) ++i;
        while (j < b.size() && b[j] == x) ++j;
        d = std::max(d, std::abs(double(i) / a.size() - double(j) / b.size()));
    }
    return d;
}

std::vector<SpriteVideo> heldout_sources(const DataConfig& data, int n, std::uint64_t seed, int min_speed_bucket) {
    std::vector<SpriteVideo> out;
    for (std::uint64_t k = 0; int(out.size()) < n; ++k) {
        WAVER_REQUIRE(k < std::uint64_t(n) * 1000 + 1000, ContractError, "no held-out prompts satisfy the speed filter");
        auto v = sprite_video_from_seed(derive_seed(seed, {kHeldoutStream, k}), data.frames, data.height, data.width);
        const bool fast = std::all_of(v.scene.sprites.begin(), v.scene.sprites.end(),
                                      [&](const SpriteParams& s) { return s.speed >= min_speed_bucket; });
        if (fast) out.push_back(std::move(v));
    }
    return out;
}

GenerationReport generate(const HybridDiT& model, const SamplerConfig& sampler, TaskKind kind,
                          const std::vector<SpriteVideo>& sources, std::uint64_t seed, const BlobOptions& blobs) {
    GenerationReport rep;
    rep.kind = kind;
    const VelocityFn fn = dit_velocity(model);
    double presence = 0.0, motion = 0.0;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        const auto& src = sources[i];
        const TaskSample req =
            make_task_sample(kind, src.video, prompt_tokens(src.style_tag, src.caption), src.style_tag);
        Rng rng(derive_seed(seed, {std::uint64_t(i)}));
        SampleTrace trace;
        LatentVideo out = euler_sample(fn, req, sampler, rng, &trace);
        rep.macs += trace.macs;
        rep.presence.push_back(sprite_presence(out, blobs));
        presence += rep.presence.back();
        if (out.frames() >= 2) {
            rep.motion.push_back(motion_score(out, kDefaultFgThreshold).fg);
            motion += rep.motion.back();
        }
        if (kind == TaskKind::I2V) {
            const std::size_t plane = std::size_t(out.height()) * out.width();
            for (int c = 0; c < out.channels(); ++c) {
                const double* a = out.data.data().data() + out.index(c, 0, 0, 0);
                const double* b = src.video.data.data().data() + src.video.index(c, 0, 0, 0);
                rep.condition_exact &= std::memcmp(a, b, plane * sizeof(double)) == 0;
            }
        }
        rep.samples.push_back(std::move(out));
    }
    if (!sources.empty()) rep.mean_presence = presence / double(sources.size());
    if (!rep.motion.empty()) rep.mean_motion = motion / double(rep.motion.size());
    return rep;
}

// ---- ablations -------------------------------------------------------------

int match_mlp_hidden(HybridDiTConfig cfg, std::size_t target_params) {
    WAVER_REQUIRE(cfg.layers() > 0, ContractError, "cannot match parameters of a model without blocks");
    auto count = [&](int hidden) {
        cfg.mlp_hidden = hidden;
        return parameter_count(cfg);
    };
    int lo = 1, hi = 64 * cfg.d_model;
    if (count(lo) >= target_params) return lo;
    if (count(hi) <= target_params) return hi;
    while (hi - lo > 1) {
        const int mid = lo + (hi - lo) / 2;
        (count(mid) <= target_params ? lo : hi) = mid;
    }
    const auto dist = [&](int h) {
        const auto c = count(h);
        return c > target_params ? c - target_params : target_params - c;
    };
    return dist(hi) < dist(lo) ? hi : lo;
}

std::vector<StreamLayout> default_stream_layouts() {
    return {{"hybrid", 2, 4}, {"dual", 6, 0}, {"single", 0, 6}};
}

std::vector<LossCurve> ablate_streams(const RunConfig& base, const std::vector<StreamLayout>& layouts, int steps,
                                      int window, const StepCallback& on_step) {
    WAVER_REQUIRE(!layouts.empty(), ContractError, "ablate_streams needs at least one layout");
    std::vector<LossCurve> curves;
    std::size_t budget = 0;
    for (const auto& layout : layouts) {
        RunConfig cfg = base;
        cfg.model.m_dual = layout.m_dual;
        cfg.model.n_single = layout.n_single;
        if (curves.empty()) budget = parameter_count(cfg.model);
        else cfg.model.mlp_hidden = match_mlp_hidden(cfg.model, budget);
        Trainer tr(cfg);
        LossCurve c;
        c.name = layout.name;
        c.model = cfg.model;
        c.params = parameter_count(cfg.model);
        c.seed = cfg.seed;
        tr.train(steps, [&](const StepMetrics& m) {
            c.loss.push_back(m.fm_loss);
            if (on_step) on_step(layout.name, m);
        });
        c.smoothed = smooth_trailing(c.loss, window);
        curves.push_back(std::move(c));
    }
    return curves;
}

void write_curves_csv(std::ostream& os, const std::vector<LossCurve>& curves) {
    os << "step";
    for (const auto& c : curves) os << ',' << c.name << "_loss," << c.name << "_smoothed";
    os << '\n' << std::setprecision(17);
    const std::size_t n = curves.empty() ? 0 : curves[0].loss.size();
    for (std::size_t i = 0; i < n; ++i) {
        os << i;
        for (const auto& c : curves) os << ',' << c.loss.at(i) << ',' << c.smoothed.at(i);
        os << '\n';
    }
}

std::vector<SamplerArm> ablate_sampler(const RunConfig& base, int steps, int n_samples, const StepCallback& on_step) {
    const double shift = base.timesteps.shift;
    std::vector<SamplerArm> arms{{"logit_normal", TimestepSampler::logit_normal(0.0, 1.0, shift), {}, {}, 0.0, {}},
                                 {"mode", TimestepSampler::mode(1.29, shift), {}, {}, 0.0, {}}};
    const auto sources = heldout_sources(base.data, n_samples, base.seed, 2);
    for (auto& arm : arms) {
        RunConfig cfg = base;
        cfg.timesteps = arm.timesteps;
        Trainer tr(cfg);
        tr.train(steps, [&](const StepMetrics& m) {
            arm.loss.push_back(m.fm_loss);
            arm.train_timesteps.insert(arm.train_timesteps.end(), m.timesteps.begin(), m.timesteps.end());
            if (on_step) on_step(arm.name, m);
        });
        if (!arm.train_timesteps.empty()) {
            Rng ref(derive_seed(base.seed, {kReferenceDraws}));
            std::vector<double> draws(20000);
            for (double& d : draws) d = sample_timestep(arm.timesteps, ref);
            arm.timestep_ks = ks_statistic(arm.train_timesteps, draws);
        }
        arm.generation = generate(tr.model(), cfg.sampler, TaskKind::T2V, sources, cfg.seed);
    }
    return arms;
}

std::vector<JointI2VArm> ablate_joint_i2v(const RunConfig& base, int steps, int n_samples, double joint_p,
                                          const StepCallback& on_step) {
    std::vector<JointI2VArm> arms{{"joint", joint_p, {}, {}}, {"i2v_only", 1.0, {}, {}}};
    const auto sources = heldout_sources(base.data, n_samples, base.seed);
    for (auto& arm : arms) {
        RunConfig cfg = base;
        cfg.data.p_i2v = arm.p_i2v;
        Trainer tr(cfg);
        tr.train(steps, [&](const StepMetrics& m) {
            arm.loss.push_back(m.fm_loss);
            if (on_step) on_step(arm.name, m);
        });
        arm.i2v = generate(tr.model(), cfg.sampler, TaskKind::I2V, sources, cfg.seed);
    }
    return arms;
}

// ---- diagnostics ------------------------------------------------------------

PackStats pack_stats(const Trainer& trainer) {
    const auto& cfg = trainer.config().data;
    const auto& L = trainer.token_lengths();
    PackStats s;
    s.samples = L.size();
    const auto& sp = trainer.pack_plan();
    const auto ffd = first_fit_decreasing(L, cfg.pack_tokens, cfg.max_per_bin);
    s.spfhp_bins = sp.size();
    s.ffd_bins = ffd.size();
    s.lower_bound = bin_lower_bound(L, cfg.pack_tokens);
    s.spfhp_efficiency = sp.efficiency();
    s.ffd_efficiency = ffd.efficiency();
    Rng rng(trainer.config().seed);
    const auto edges = cfg.bucket_edges.empty() ? std::vector<int>{cfg.pack_tokens} : cfg.bucket_edges;
    for (const auto& b : bucket_batches(sp, edges, trainer.config().optim.batch_size, rng)) s.pad_tokens += b.pad_tokens;
    return s;
}

std::vector<AttentionRecord> attention_stats(const HybridDiT& model, const DiTSample& input,
                                             const std::vector<double>& timesteps, int top_k) {
    WAVER_REQUIRE(model.config().attn_mode == AttnMode::Full, UnsupportedMode,
                  "attention statistics need full attention mode");
    NoGradGuard guard;
    ForwardOptions opt;
    opt.record_attention = true;
    opt.top_k = top_k;
    std::vector<AttentionRecord> out;
    for (double t : timesteps) {
        DiTSample s = input;
        s.t = t;
        for (const auto& h : model.forward({s}, opt).attention) out.push_back({t, h});
    }
    return out;
}

// ---- run directories --------------------------------------------------------

void prepare_run_dir(const std::filesystem::path& dir, const RunConfig& cfg, const std::string& command) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    WAVER_REQUIRE(!ec && std::filesystem::is_directory(dir), IoError, "cannot create run directory " + dir.string());
    std::ofstream c(dir / "config.txt");
    WAVER_REQUIRE(c.good(), IoError, "cannot write " + (dir / "config.txt").string());
    c << cfg.to_text();
    std::ofstream m(dir / "manifest.txt");
    WAVER_REQUIRE(m.good(), IoError, "cannot write " + (dir / "manifest.txt").string());
    std::ostringstream hash;
    hash << std::hex << std::setw(16) << std::setfill('0') << cfg.hash();
    m << "command = " << command << "\nconfig_hash = " << hash.str() << "\nseed = " << cfg.seed
      << "\nstage = " << to_string(cfg.stage) << '\n';
}

}  // namespace waver
