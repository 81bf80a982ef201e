#include <cmath>
#include <sstream>

#include "doctest.h"
#include "waver/error.hpp"
#include "waver/task_io.hpp"

using namespace waver;

namespace {

LatentVideo random_video(Rng& rng, int c, int t, int h, int w) {
    auto v = LatentVideo::zeros(c, t, h, w);
    for (double& x : v.data.mutable_data()) x = rng.normal();
    return v;
}

// Mass centroid of pixels with any nonzero channel in frame t.
std::pair<double, double> centroid(const LatentVideo& v, int t) {
    double sx = 0, sy = 0, n = 0;
    for (int h = 0; h < v.height(); ++h)
        for (int w = 0; w < v.width(); ++w) {
            bool on = false;
            for (int c = 0; c < v.channels(); ++c) on |= v.at(c, t, h, w) != 0.0;
            if (on) sx += w, sy += h, n += 1;
        }
    return {sx / n, sy / n};
}

// Straightforward re-derivation of the normal-flow motion score.
std::pair<double, double> motion_oracle(const LatentVideo& v, double thr) {
    const int C = v.channels(), T = v.frames(), H = v.height(), W = v.width();
    auto px = [&](int c, int t, int h, int w) { return v.at(c, t, h, w); };
    auto spatial = [&](int t, int h, int w) {
        double g = 0;
        for (int c = 0; c < C; ++c) {
            g += (w + 1 < W) ? std::abs(px(c, t, h, w + 1) - px(c, t, h, w)) : 0.0;
            g += (h + 1 < H) ? std::abs(px(c, t, h + 1, w) - px(c, t, h, w)) : 0.0;
        }
        return g / C;
    };
    double sums[2][2] = {{0, 0}, {0, 0}};  // [fg?][diff, grad]
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            double var = 0.0;
            for (int c = 0; c < C; ++c) {
                double mean = 0.0;
                for (int t = 0; t < T; ++t) mean += px(c, t, h, w) / T;
                for (int t = 0; t < T; ++t) var += std::pow(px(c, t, h, w) - mean, 2) / (C * T);
            }
            const int r = var > thr ? 1 : 0;
            for (int t = 1; t < T; ++t) {
                for (int c = 0; c < C; ++c) sums[r][0] += std::abs(px(c, t, h, w) - px(c, t - 1, h, w)) / C;
                sums[r][1] += (spatial(t - 1, h, w) + spatial(t, h, w)) / 2;
            }
        }
    auto q = [](double d, double g) { return d > 0 ? d / g : 0.0; };
    return {q(sums[1][0], sums[1][1]), q(sums[0][0], sums[0][1])};
}

SpriteScene one_sprite(int shape, double x, double y, double vx, double vy) {
    SpriteScene s;
    SpriteParams p;
    p.shape = shape;
    p.color = 0;
    p.x = x, p.y = y, p.vx = vx, p.vy = vy, p.radius = 2.5;
    s.sprites.push_back(p);
    return s;
}

}  // namespace

TEST_CASE("unified input for each task kind") {
    Rng rng(1);
    const int C = 3, T = 4, H = 4, W = 4;
    const auto clean = random_video(rng, C, T, H, W);
    const auto noisy = random_video(rng, C, T, H, W);
    const std::size_t plane = H * W, block = T * plane;

    SUBCASE("t2v: empty mask and black conditions") {
        const auto u = build_unified_input(make_task_sample(TaskKind::T2V, clean, {}, 0), noisy);
        CHECK(u.shape() == Shape{7, 4, 4, 4});
        for (std::size_t i = 0; i < C * block; ++i) CHECK(u.data()[i] == noisy.data.data()[i]);
        for (std::size_t i = C * block; i < u.numel(); ++i) CHECK(u.data()[i] == 0.0);
    }
    SUBCASE("i2v: first frame is the clean condition") {
        const auto u = build_unified_input(make_task_sample(TaskKind::I2V, clean, {}, 0), noisy);
        for (int c = 0; c < C; ++c)
            for (int t = 0; t < T; ++t)
                for (std::size_t p = 0; p < plane; ++p) {
                    const double cond = u.data()[(C + c) * block + t * plane + p];
                    CHECK(cond == (t == 0 ? clean.data.data()[c * block + t * plane + p] : 0.0));
                }
        for (int t = 0; t < T; ++t)
            for (std::size_t p = 0; p < plane; ++p) CHECK(u.data()[2 * C * block + t * plane + p] == (t == 0 ? 1.0 : 0.0));
    }
    SUBCASE("i2v with conditioning removed equals t2v") {
        const auto i2v = build_unified_input(make_task_sample(TaskKind::I2V, clean, {}, 0), noisy);
        const auto t2v = build_unified_input(make_task_sample(TaskKind::T2V, clean, {}, 0), noisy);
        auto stripped = i2v.clone();
        auto d = stripped.mutable_data();
        std::fill(d.begin() + C * block, d.end(), 0.0);
        for (std::size_t i = 0; i < d.size(); ++i) CHECK(d[i] == t2v.data()[i]);
    }
    SUBCASE("t2i: single frame, zero mask") {
        const auto img = random_video(rng, C, 1, H, W), nimg = random_video(rng, C, 1, H, W);
        const auto u = build_unified_input(make_task_sample(TaskKind::T2I, img, {}, 0), nimg);
        CHECK(u.shape() == Shape{7, 1, 4, 4});
        for (std::size_t i = 2 * C * plane; i < u.numel(); ++i) CHECK(u.data()[i] == 0.0);
    }
    SUBCASE("contract errors") {
        CHECK_THROWS_AS(build_unified_input(make_task_sample(TaskKind::T2V, clean, {}, 0), random_video(rng, C, T, H, 2)),
                        ContractError);
        CHECK_THROWS_AS(make_task_sample(TaskKind::T2I, clean, {}, 0), ContractError);
    }
}

TEST_CASE("task mixing frequency") {
    Rng rng(2);
    for (double p : {0.0, 1.0}) {
        for (int i = 0; i < 1000; ++i) CHECK(sample_task(rng, p) == (p == 1.0 ? TaskKind::I2V : TaskKind::T2V));
    }
    int i2v = 0;
    for (int i = 0; i < 10000; ++i) i2v += sample_task(rng, 0.2) == TaskKind::I2V;
    CHECK(std::abs(i2v / 10000.0 - 0.2) <= 0.01);
    CHECK_THROWS_AS(sample_task(rng, 1.5), ContractError);
}

TEST_CASE("sprite rendering") {
    SUBCASE("static sprite gives identical frames and zero motion") {
        const auto scene = one_sprite(0, 8, 8, 0, 0);
        const auto v = render_scene(scene, 4, 16, 16);
        for (int t = 1; t < 4; ++t)
            for (int c = 0; c < 3; ++c)
                for (int h = 0; h < 16; ++h)
                    for (int w = 0; w < 16; ++w) CHECK(v.at(c, t, h, w) == v.at(c, 0, h, w));
        CHECK(scene_motion(scene, 16, 16) == 0.0);
    }
    SUBCASE("unit velocity shifts the centroid one pixel per frame") {
        for (int shape = 0; shape < vocab::kNumShapes; ++shape) {
            const auto v = render_scene(one_sprite(shape, 5.3, 7.1, 1.0, 0.0), 4, 16, 16);
            const auto c0 = centroid(v, 0);
            for (int t = 1; t < 4; ++t) {
                const auto ct = centroid(v, t);
                CHECK(ct.first - c0.first == doctest::Approx(t).epsilon(1e-12));
                CHECK(ct.second == doctest::Approx(c0.second).epsilon(1e-12));
            }
        }
        CHECK(scene_motion(one_sprite(0, 5, 5, 1, 0), 16, 16) == 1.0);
    }
    SUBCASE("generation is deterministic given the seed") {
        const auto a = sprite_video_from_seed(99, 4, 16, 16), b = sprite_video_from_seed(99, 4, 16, 16);
        CHECK(std::equal(a.video.data.data().begin(), a.video.data.data().end(), b.video.data.data().begin()));
        CHECK(a.caption == b.caption);
    }
    SUBCASE("sprites stay inside the frame") {
        Rng rng(5);
        for (int i = 0; i < 500; ++i) {
            const auto scene = random_scene(rng, 4);
            for (const auto& s : scene.sprites)
                for (int t = 0; t < 4; ++t) {
                    CHECK(s.x + s.vx * t - s.radius >= -1e-12);
                    CHECK(s.x + s.vx * t + s.radius <= kCanonicalExtent + 1e-12);
                    CHECK(s.y + s.vy * t - s.radius >= -1e-12);
                    CHECK(s.y + s.vy * t + s.radius <= kCanonicalExtent + 1e-12);
                }
        }
    }
}

TEST_CASE("caption round trip") {
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
        const auto scene = random_scene(rng, 4);
        const auto labels = decode_caption(encode_caption(scene));
        REQUIRE(labels.sprites.size() == scene.sprites.size());
        for (std::size_t k = 0; k < scene.sprites.size(); ++k) {
            const auto& s = scene.sprites[k];
            CHECK(labels.sprites[k] == CaptionLabels::Sprite{s.shape, s.color, s.direction, s.speed});
        }
    }
    // every vocabulary entry
    for (int shape = 0; shape < vocab::kNumShapes; ++shape)
        for (int color = 0; color < vocab::kNumColors; ++color)
            for (int dir = 0; dir < vocab::kNumDirections; ++dir)
                for (int speed = 0; speed < vocab::kNumSpeeds; ++speed) {
                    SpriteScene s;
                    SpriteParams p;
                    p.shape = shape, p.color = color, p.direction = dir, p.speed = speed;
                    s.sprites = {p, p};
                    const auto tokens = encode_caption(s);
                    for (int t : tokens) CHECK(t < vocab::kSize);
                    CHECK(decode_caption(tokens).sprites[1] == CaptionLabels::Sprite{shape, color, dir, speed});
                }
    CHECK_THROWS_AS(decode_caption({vocab::kShapeBase}), ContractError);
    const auto prompt = prompt_tokens(2, {7, 8});
    CHECK(prompt == std::vector<int>{vocab::style_token(2), 7, 8});
}

TEST_CASE("motion score") {
    SUBCASE("static video") {
        const auto v = render_scene(one_sprite(1, 8, 8, 0, 0), 4, 16, 16);
        const auto m = motion_score(v, kDefaultFgThreshold);
        CHECK(m.fg == 0.0);
        CHECK(m.bg == 0.0);
    }
    SUBCASE("moving sprite on black background") {
        const auto m = motion_score(render_scene(one_sprite(0, 4, 8, 2, 0), 4, 16, 16), kDefaultFgThreshold);
        CHECK(m.fg > 0.0);
        CHECK(m.bg == 0.0);
    }
    SUBCASE("doubling velocity increases the foreground score") {
        // generated sprites at speed bucket 1 vs bucket 2 (twice the speed), same geometry
        CHECK(speed_units(2) == 2 * speed_units(1));
        Rng rng(4);
        for (int i = 0; i < 300; ++i) {
            SpriteParams p;
            p.shape = static_cast<int>(rng.below(vocab::kNumShapes));
            p.color = static_cast<int>(rng.below(vocab::kNumColors));
            p.direction = static_cast<int>(rng.below(vocab::kNumDirections));
            p.radius = rng.uniform(2.0, 3.0);
            p.speed = 2;
            assign_velocity(p);
            const auto place = [&](double v) {
                return rng.uniform(p.radius + std::max(0.0, -3 * v), kCanonicalExtent - p.radius - std::max(0.0, 3 * v));
            };
            p.x = place(p.vx);
            p.y = place(p.vy);
            SpriteParams slow_p = p;
            slow_p.speed = 1;
            assign_velocity(slow_p);
            SpriteScene slow, fast;
            slow.sprites = {slow_p};
            fast.sprites = {p};
            const auto a = motion_score(render_scene(slow, 4, 16, 16), kDefaultFgThreshold);
            const auto b = motion_score(render_scene(fast, 4, 16, 16), kDefaultFgThreshold);
            CAPTURE(i);
            CHECK(b.fg > a.fg);
        }
    }
    SUBCASE("tracks the true per-frame displacement") {
        Rng rng(8);
        for (int i = 0; i < 100; ++i) {
            SpriteScene s;
            SpriteParams p;
            p.shape = 0;
            p.speed = 1 + static_cast<int>(rng.below(3));
            p.direction = static_cast<int>(2 * rng.below(4));  // axis-aligned
            p.radius = 2.5;
            assign_velocity(p);
            p.x = p.vx >= 0 ? 3 : 13, p.y = p.vy >= 0 ? 3 : 13;
            s.sprites = {p};
            const double truth = scene_motion(s, 16, 16);
            const double est = motion_score(render_scene(s, 4, 16, 16), kDefaultFgThreshold).fg;
            CHECK(est > 0.5 * truth);
            CHECK(est < 1.5 * truth);
        }
    }
    SUBCASE("matches an independent re-derivation") {
        Rng rng(6);
        for (int i = 0; i < 20; ++i) {
            const auto v = generate_sprite_video(rng, 4, 16, 16);
            const auto m = motion_score(v.video, 0.03);
            const auto o = motion_oracle(v.video, 0.03);
            CHECK(m.fg == doctest::Approx(o.first).epsilon(1e-12));
            CHECK(m.bg == doctest::Approx(o.second).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(motion_score(LatentVideo::zeros(3, 1, 4, 4), 0.1), ContractError);
}

TEST_CASE("motion filtering") {
    Rng rng(7);
    std::vector<TaskSample> batch;
    for (int i = 0; i < 60; ++i) {
        const auto v = generate_sprite_video(rng, 4, 16, 16);
        batch.push_back(make_task_sample(TaskKind::T2V, v.video, v.caption, v.style_tag));
    }
    const auto all = filter_by_motion(batch, 0.0, std::numeric_limits<double>::infinity());
    REQUIRE(all.size() == batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) CHECK(all[i].caption_tokens == batch[i].caption_tokens);

    const double lo = 0.05, hi = 0.4;
    const auto kept = filter_by_motion(batch, lo, hi);
    std::vector<std::vector<int>> expected;
    for (const auto& s : batch) {
        const double fg = motion_oracle(s.latent, kDefaultFgThreshold).first;
        if (fg >= lo && fg <= hi) expected.push_back(s.caption_tokens);
    }
    REQUIRE(kept.size() == expected.size());
    CHECK(kept.size() < batch.size());
    for (std::size_t i = 0; i < kept.size(); ++i) CHECK(kept[i].caption_tokens == expected[i]);

    std::vector<TaskSample> with_static = {make_task_sample(TaskKind::T2V, render_scene(one_sprite(0, 8, 8, 0, 0), 4, 16, 16), {}, 0)};
    CHECK(filter_by_motion(with_static, 1e-9, 1.0).empty());
    CHECK_THROWS_AS(filter_by_motion(batch, 1.0, 0.5), ContractError);
}

TEST_CASE("dataset manifest round trip") {
    std::vector<DatasetRecord> recs = {{42, TaskKind::T2V, 0.123456789012345, {1, 5, 7}},
                                       {7, TaskKind::I2V, 1.0 / 3.0, {2, 6, 9, 12, 20, 28}},
                                       {9, TaskKind::T2I, 0.0, {}}};
    std::stringstream ss;
    write_manifest(ss, recs);
    CHECK(read_manifest(ss) == recs);
    std::stringstream bad("12 t2v notanumber 1 2\n");
    CHECK_THROWS_AS(read_manifest(bad), IoError);
}
