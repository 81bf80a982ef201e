#include "waver/task_io.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

#include "waver/error.hpp"

namespace waver {

LatentVideo::LatentVideo(Tensor t) : data(std::move(t)) {
    WAVER_REQUIRE(data.ndim() == 4, DimensionError, "latent video must be [C,T,H,W], got " + shape_str(data.shape()));
}

LatentVideo LatentVideo::zeros(int c, int t, int h, int w) {
    WAVER_REQUIRE(c > 0 && t > 0 && h > 0 && w > 0, ContractError, "latent dims must be positive");
    return LatentVideo(Tensor::zeros({std::size_t(c), std::size_t(t), std::size_t(h), std::size_t(w)}));
}

Tensor LatentVideo::frame(int t) const { return slice(data, 1, t, t + 1); }

std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::T2I: return "t2i";
        case TaskKind::T2V: return "t2v";
        case TaskKind::I2V: return "i2v";
    }
    return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "t2i") return TaskKind::T2I;
    if (s == "t2v") return TaskKind::T2V;
    if (s == "i2v") return TaskKind::I2V;
    throw ContractError("unknown task kind '" + s + "'");
}

void TaskSample::validate() const {
    WAVER_REQUIRE(latent.data.defined(), ContractError, "task sample has no latent");
    switch (kind) {
        case TaskKind::T2I:
            WAVER_REQUIRE(latent.frames() == 1 && cond_frames.empty(), ContractError,
                          "t2i sample needs T == 1 and no condition frames");
            break;
        case TaskKind::T2V:
            WAVER_REQUIRE(cond_frames.empty(), ContractError, "t2v sample must not carry condition frames");
            break;
        case TaskKind::I2V:
            WAVER_REQUIRE(cond_frames == std::vector<int>{0}, ContractError, "i2v sample conditions on frame 0 only");
            break;
    }
}

TaskSample make_task_sample(TaskKind kind, LatentVideo latent, std::vector<int> caption, int style_tag) {
    TaskSample s;
    s.kind = kind;
    s.latent = std::move(latent);
    if (kind == TaskKind::I2V) s.cond_frames = {0};
    s.caption_tokens = std::move(caption);
    s.style_tag = style_tag;
    s.validate();
    return s;
}

Tensor build_unified_input(const TaskSample& sample, const LatentVideo& noisy) {
    sample.validate();
    WAVER_REQUIRE(noisy.data.shape() == sample.latent.data.shape(), ContractError,
                  "noisy latent " + shape_str(noisy.data.shape()) + " does not match sample latent " +
                      shape_str(sample.latent.data.shape()));
    const int C = noisy.channels(), T = noisy.frames(), H = noisy.height(), W = noisy.width();
    const std::size_t plane = std::size_t(H) * W, frame_block = std::size_t(T) * plane;
    std::vector<double> out(std::size_t(2 * C + 1) * frame_block, 0.0);
    const auto x = noisy.data.data();
    std::copy(x.begin(), x.end(), out.begin());
    const auto clean = sample.latent.data.data();
    for (int t : sample.cond_frames) {
        WAVER_REQUIRE(t >= 0 && t < T, ContractError, "condition frame out of range");
        for (int c = 0; c < C; ++c) {
            const std::size_t src = c * frame_block + t * plane;
            std::copy_n(clean.begin() + src, plane, out.begin() + (C + c) * frame_block + t * plane);
        }
        std::fill_n(out.begin() + 2 * C * frame_block + t * plane, plane, 1.0);
    }
    return Tensor::from({std::size_t(2 * C + 1), std::size_t(T), std::size_t(H), std::size_t(W)}, std::move(out));
}

TaskKind sample_task(Rng& rng, double p_i2v) {
    WAVER_REQUIRE(p_i2v >= 0.0 && p_i2v <= 1.0, DomainError, "p_i2v must lie in [0,1]");
    return rng.uniform() < p_i2v ? TaskKind::I2V : TaskKind::T2V;
}

// ---- sprites ---------------------------------------------------------------

double speed_units(int bucket) {
    static constexpr double table[vocab::kNumSpeeds] = {0.0, 0.75, 1.5, 2.25};
    WAVER_REQUIRE(bucket >= 0 && bucket < vocab::kNumSpeeds, ContractError, "speed bucket out of range");
    return table[bucket];
}

void direction_vector(int direction, double& dx, double& dy) {
    WAVER_REQUIRE(direction >= 0 && direction < vocab::kNumDirections, ContractError, "direction out of range");
    static constexpr double r = std::numbers::sqrt2 / 2.0;
    static constexpr double table[8][2] = {{1, 0}, {r, -r}, {0, -1}, {-r, -r}, {-1, 0}, {-r, r}, {0, 1}, {r, r}};
    dx = table[direction][0];
    dy = table[direction][1];
}

const std::vector<std::vector<double>>& sprite_palette() {
    static const std::vector<std::vector<double>> palette = {
        {0.9, -0.6, -0.6}, {-0.6, 0.9, -0.6}, {-0.6, -0.6, 0.9},
        {0.9, 0.9, -0.6},  {-0.6, 0.9, 0.9},  {0.9, -0.6, 0.9},
    };
    return palette;
}

void assign_velocity(SpriteParams& s) {
    double dx, dy;
    direction_vector(s.direction, dx, dy);
    const double v = speed_units(s.speed);
    s.vx = v * dx;
    s.vy = v * dy;
}

SpriteScene random_scene(Rng& rng, int frames) {
    SpriteScene scene;
    scene.style = static_cast<int>(rng.below(vocab::kNumStyles));
    const int count = 1 + static_cast<int>(rng.below(vocab::kNumCounts));
    const double travel = std::max(0, frames - 1);
    for (int i = 0; i < count; ++i) {
        SpriteParams s;
        s.shape = static_cast<int>(rng.below(vocab::kNumShapes));
        s.color = static_cast<int>(rng.below(vocab::kNumColors));
        s.direction = static_cast<int>(rng.below(vocab::kNumDirections));
        s.speed = static_cast<int>(rng.below(vocab::kNumSpeeds));
        s.radius = rng.uniform(2.0, 3.0);
        assign_velocity(s);
        const auto place = [&](double v) {
            const double lo = s.radius + std::max(0.0, -v * travel);
            const double hi = kCanonicalExtent - s.radius - std::max(0.0, v * travel);
            return rng.uniform(lo, hi);
        };
        s.x = place(s.vx);
        s.y = place(s.vy);
        scene.sprites.push_back(s);
    }
    scene.grain_seed = rng.next_u64();
    return scene;
}

namespace {

bool inside(int shape, double dx, double dy, double r) {
    const double ax = std::abs(dx), ay = std::abs(dy);
    switch (static_cast<Shape2D>(shape)) {
        case Shape2D::Square: return ax <= r && ay <= r;
        case Shape2D::Circle: return dx * dx + dy * dy <= r * r;
        case Shape2D::Diamond: return ax + ay <= r;
        case Shape2D::Cross: return (ax <= r && ay <= r / 3.0) || (ay <= r && ax <= r / 3.0);
    }
    return false;
}

void box_blur(std::vector<double>& plane, int H, int W) {
    std::vector<double> out(plane.size());
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            double acc = 0.0;
            int n = 0;
            for (int a = std::max(0, h - 1); a <= std::min(H - 1, h + 1); ++a)
                for (int b = std::max(0, w - 1); b <= std::min(W - 1, w + 1); ++b, ++n) acc += plane[a * W + b];
            out[h * W + w] = acc / n;
        }
    plane.swap(out);
}

}  // namespace

LatentVideo render_scene(const SpriteScene& scene, int frames, int height, int width) {
    constexpr int C = 3;
    auto video = LatentVideo::zeros(C, frames, height, width);
    auto d = video.data.mutable_data();
    const double sx = width / kCanonicalExtent, sy = height / kCanonicalExtent;
    const double gain = scene.style == static_cast<int>(Style::Dim) ? 0.6 : 1.0;
    const auto& palette = sprite_palette();
    for (int t = 0; t < frames; ++t)
        for (const auto& s : scene.sprites) {
            const double cx = s.x + s.vx * t, cy = s.y + s.vy * t;
            for (int h = 0; h < height; ++h)
                for (int w = 0; w < width; ++w) {
                    if (!inside(s.shape, (w + 0.5) / sx - cx, (h + 0.5) / sy - cy, s.radius)) continue;
                    for (int c = 0; c < C; ++c) d[video.index(c, t, h, w)] = gain * palette[s.color][c];
                }
        }
    const std::size_t plane = std::size_t(height) * width;
    if (scene.style == static_cast<int>(Style::Blurry)) {
        std::vector<double> buf(plane);
        for (int c = 0; c < C; ++c)
            for (int t = 0; t < frames; ++t) {
                auto* p = d.data() + video.index(c, t, 0, 0);
                std::copy_n(p, plane, buf.begin());
                box_blur(buf, height, width);
                std::copy_n(buf.begin(), plane, p);
            }
    }
    if (scene.style == static_cast<int>(Style::Grainy)) {
        Rng grain(scene.grain_seed);
        for (double& v : d) v += 0.08 * grain.normal();
    }
    return video;
}

std::vector<int> encode_caption(const SpriteScene& scene) {
    const int n = static_cast<int>(scene.sprites.size());
    WAVER_REQUIRE(n >= 1 && n <= vocab::kNumCounts, ContractError, "scene must hold 1 or 2 sprites");
    std::vector<int> tokens{vocab::kCountBase + n - 1};
    for (const auto& s : scene.sprites) {
        tokens.push_back(vocab::kShapeBase + s.shape);
        tokens.push_back(vocab::kColorBase + s.color);
        tokens.push_back(vocab::kDirectionBase + s.direction);
        tokens.push_back(vocab::kSpeedBase + s.speed);
    }
    return tokens;
}

CaptionLabels decode_caption(const std::vector<int>& tokens) {
    WAVER_REQUIRE(!tokens.empty(), ContractError, "empty caption");
    const int n = tokens[0] - vocab::kCountBase + 1;
    WAVER_REQUIRE(n >= 1 && n <= vocab::kNumCounts, ContractError, "caption does not start with a count token");
    WAVER_REQUIRE(tokens.size() == std::size_t(1 + 4 * n), ContractError, "caption length does not match count");
    const auto field = [&](int tok, int base, int range) {
        WAVER_REQUIRE(tok >= base && tok < base + range, ContractError, "caption token " + std::to_string(tok) +
                                                                            " out of place");
        return tok - base;
    };
    CaptionLabels out;
    for (int i = 0; i < n; ++i) {
        const int* p = tokens.data() + 1 + 4 * i;
        out.sprites.push_back({field(p[0], vocab::kShapeBase, vocab::kNumShapes),
                               field(p[1], vocab::kColorBase, vocab::kNumColors),
                               field(p[2], vocab::kDirectionBase, vocab::kNumDirections),
                               field(p[3], vocab::kSpeedBase, vocab::kNumSpeeds)});
    }
    return out;
}

double scene_motion(const SpriteScene& scene, int height, int width) {
    if (scene.sprites.empty()) return 0.0;
    const double sx = width / kCanonicalExtent, sy = height / kCanonicalExtent;
    double acc = 0.0;
    for (const auto& s : scene.sprites) acc += std::hypot(s.vx * sx, s.vy * sy);
    return acc / scene.sprites.size();
}

SpriteVideo generate_sprite_video(Rng& rng, int frames, int height, int width) {
    SpriteVideo v;
    v.scene = random_scene(rng, frames);
    v.video = render_scene(v.scene, frames, height, width);
    v.caption = encode_caption(v.scene);
    v.style_tag = v.scene.style;
    v.motion = frames > 1 ? scene_motion(v.scene, height, width) : 0.0;
    return v;
}

SpriteVideo sprite_video_from_seed(std::uint64_t seed, int frames, int height, int width) {
    Rng rng(seed);
    return generate_sprite_video(rng, frames, height, width);
}

std::vector<int> prompt_tokens(int style_tag, const std::vector<int>& caption) {
    WAVER_REQUIRE(style_tag >= 0 && style_tag < vocab::kNumStyles, ContractError, "style tag out of range");
    std::vector<int> out{vocab::style_token(style_tag)};
    out.insert(out.end(), caption.begin(), caption.end());
    return out;
}

// ---- motion ----------------------------------------------------------------

MotionScore motion_score(const LatentVideo& video, double fg_threshold) {
    const int C = video.channels(), T = video.frames(), H = video.height(), W = video.width();
    WAVER_REQUIRE(T >= 2, ContractError, "motion_score needs at least 2 frames");
    // channel-averaged L1 spatial gradient at (t, h, w), forward differences
    const auto grad = [&](int t, int h, int w) {
        double g = 0.0;
        for (int c = 0; c < C; ++c) {
            const double v = video.at(c, t, h, w);
            if (w + 1 < W) g += std::abs(video.at(c, t, h, w + 1) - v);
            if (h + 1 < H) g += std::abs(video.at(c, t, h + 1, w) - v);
        }
        return g / C;
    };
    double d_fg = 0.0, g_fg = 0.0, d_bg = 0.0, g_bg = 0.0;
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            double var = 0.0;
            for (int c = 0; c < C; ++c) {
                double m = 0.0;
                for (int t = 0; t < T; ++t) m += video.at(c, t, h, w);
                m /= T;
                for (int t = 0; t < T; ++t) {
                    const double e = video.at(c, t, h, w) - m;
                    var += e * e;
                }
            }
            var /= double(C) * T;
            double d = 0.0, g = 0.0;
            for (int t = 0; t + 1 < T; ++t) {
                for (int c = 0; c < C; ++c) d += std::abs(video.at(c, t + 1, h, w) - video.at(c, t, h, w)) / C;
                g += 0.5 * (grad(t, h, w) + grad(t + 1, h, w));
            }
            if (var > fg_threshold) {
                d_fg += d;
                g_fg += g;
            } else {
                d_bg += d;
                g_bg += g;
            }
        }
    const auto ratio = [](double d, double g) { return d > 0.0 ? d / std::max(g, 1e-12) : 0.0; };
    return {ratio(d_fg, g_fg), ratio(d_bg, g_bg)};
}

std::vector<TaskSample> filter_by_motion(const std::vector<TaskSample>& samples, double min_fg, double max_fg,
                                         double fg_threshold) {
    WAVER_REQUIRE(min_fg <= max_fg, ContractError, "filter_by_motion needs min_fg <= max_fg");
    std::vector<TaskSample> kept;
    for (const auto& s : samples) {
        const double fg = motion_score(s.latent, fg_threshold).fg;
        if (fg >= min_fg && fg <= max_fg) kept.push_back(s);
    }
    return kept;
}

// ---- manifest --------------------------------------------------------------

void write_manifest(std::ostream& os, const std::vector<DatasetRecord>& records) {
    os.precision(17);
    for (const auto& r : records) {
        os << r.seed << ' ' << to_string(r.kind) << ' ' << r.motion;
        for (int t : r.tokens) os << ' ' << t;
        os << '\n';
    }
}

std::vector<DatasetRecord> read_manifest(std::istream& is) {
    std::vector<DatasetRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        DatasetRecord r;
        std::string kind;
        if (!(ls >> r.seed >> kind >> r.motion)) throw IoError("manifest line " + std::to_string(lineno) + " is malformed");
        r.kind = task_kind_from_string(kind);
        for (int t; ls >> t;) r.tokens.push_back(t);
        if (!ls.eof()) throw IoError("manifest line " + std::to_string(lineno) + " has a non-integer token");
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace waver
