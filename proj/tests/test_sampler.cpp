#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "model_helpers.hpp"
#include "waver/error.hpp"
#include "waver/sampler.hpp"

using namespace waver;
using namespace waver::testing;

namespace {

Tensor noisy_channels(const Tensor& unified, std::size_t c) { return slice(unified, 0, 0, c); }

double frame_dot(const Tensor& a, const Tensor& b, std::size_t t) {
    const std::size_t C = a.dim(0), T = a.dim(1), P = a.dim(2) * a.dim(3);
    double s = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < P; ++i) s += a.at((c * T + t) * P + i) * b.at((c * T + t) * P + i);
    return s;
}

TaskSample request(TaskKind kind, const Tensor& x0, std::vector<int> caption = {1, 5, 7}) {
    return make_task_sample(kind, LatentVideo(x0), std::move(caption), 0);
}

}  // namespace

TEST_CASE("guidance modes") {
    Rng rng(1);
    const Tensor vc = random_tensor({3, 4, 3, 3}, rng, false), vu = random_tensor({3, 4, 3, 3}, rng, false);
    SUBCASE("w = 1 returns the conditional velocity bit-exactly") {
        for (Guidance g : {Guidance::None, Guidance::Cfg, Guidance::Apg}) {
            SamplerConfig c;
            c.guidance = g;
            c.scale = 1.0;
            c.apg_threshold = 0.01;
            CHECK(max_abs_diff(guided_velocity(vc, vu, c), vc) == 0.0);
        }
    }
    SUBCASE("none ignores the unconditional branch") {
        SamplerConfig c;
        c.scale = 7.0;
        CHECK(max_abs_diff(guided_velocity(vc, vu, c), vc) == 0.0);
    }
    SUBCASE("cfg is affine in w") {
        SamplerConfig a = SamplerConfig::cfg_preset(), b = a;
        b.scale = 8.0;
        const Tensor va = guided_velocity(vc, vu, a), vb = guided_velocity(vc, vu, b);
        for (std::size_t i = 0; i < vc.numel(); ++i)
            CHECK(vb.at(i) - va.at(i) == doctest::Approx(3.0 * (vc.at(i) - vu.at(i))).epsilon(1e-12));
    }
    SUBCASE("apg with eta 1 and no clamp equals cfg") {
        SamplerConfig apg = SamplerConfig::apg_preset(), cfg = SamplerConfig::cfg_preset();
        apg.apg_eta = 1.0;
        apg.apg_threshold = std::numeric_limits<double>::infinity();
        apg.scale = cfg.scale = 6.0;
        CHECK(max_abs_diff(guided_velocity(vc, vu, apg), guided_velocity(vc, vu, cfg)) < 1e-12);
    }
    SUBCASE("decomposition identities") {
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor d = random_tensor({2, 3, 4, 4}, rng, false), v = random_tensor({2, 3, 4, 4}, rng, false);
            const auto p = apg_decompose(d, v);
            CHECK(max_abs_diff(p.parallel + p.orthogonal, d) < 1e-12);
            for (std::size_t t = 0; t < 3; ++t) {
                CHECK(std::abs(frame_dot(p.parallel, p.orthogonal, t)) < 1e-9);
                CHECK(std::abs(frame_dot(p.orthogonal, v, t)) < 1e-9);
            }
        }
    }
    SUBCASE("zero conditional frame puts everything in the orthogonal part") {
        Tensor v = random_tensor({2, 2, 2, 2}, rng, false);
        auto vd = v.mutable_data();
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < 4; ++i) vd[(c * 2 + 1) * 4 + i] = 0.0;
        const Tensor d = random_tensor({2, 2, 2, 2}, rng, false);
        const auto p = apg_decompose(d, v);
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < 4; ++i) {
                CHECK(p.parallel.at((c * 2 + 1) * 4 + i) == 0.0);
                CHECK(p.orthogonal.at((c * 2 + 1) * 4 + i) == d.at((c * 2 + 1) * 4 + i));
            }
    }
    SUBCASE("per-frame clamp") {
        for (double r : {0.1, 1.0, 3.0, 100.0}) {
            SamplerConfig c = SamplerConfig::apg_preset();
            c.apg_threshold = r;
            c.apg_eta = 0.5;
            GuidanceStats st;
            const Tensor v = guided_velocity(vc, vu, c, &st);
            REQUIRE(st.update_norms.size() == 4);
            // recover the update from the output and check its norms independently
            const Tensor upd = (v - vc) * (1.0 / (c.scale - 1.0));
            const auto n = frame_norms(upd);
            for (std::size_t t = 0; t < 4; ++t) {
                CHECK(st.update_norms[t] <= r * (1 + 1e-12));
                CHECK(n[t] <= r * (1 + 1e-12));
            }
        }
    }
    SamplerConfig bad;
    bad.scale = 0.5;
    CHECK_THROWS_AS(bad.validate(), DomainError);
    bad = SamplerConfig{};
    bad.apg_threshold = 0.0;
    CHECK_THROWS_AS(bad.validate(), DomainError);
    CHECK(guidance_from_string("apg") == Guidance::Apg);
    CHECK_THROWS_AS(guidance_from_string("pag"), ContractError);
}

TEST_CASE("euler sampler with stub models") {
    Rng rng(2);
    const Tensor x0 = random_tensor({3, 3, 4, 4}, rng, false);
    SUBCASE("zero velocity returns the initial noise") {
        VelocityFn zero = [](const std::vector<DiTSample>& b) {
            std::vector<Tensor> out;
            for (const auto& s : b) out.push_back(Tensor::zeros({3, s.x.dim(1), s.x.dim(2), s.x.dim(3)}));
            return out;
        };
        SamplerConfig c;
        c.n_steps = 5;
        Rng r1(7), r2(7);
        const auto out = euler_sample(zero, request(TaskKind::T2V, x0), c, r1);
        for (std::size_t i = 0; i < x0.numel(); ++i) CHECK(out.data.at(i) == r2.normal());
    }
    SUBCASE("exact velocity recovers x0") {
        VelocityFn exact = [&](const std::vector<DiTSample>& b) {
            std::vector<Tensor> out;
            for (const auto& s : b) out.push_back((x0 - noisy_channels(s.x, 3)) * (1.0 / s.t));
            return out;
        };
        for (double shift : {1.0, 3.0}) {
            SamplerConfig c;
            c.n_steps = 64;
            c.shift = shift;
            Rng r(8);
            const auto out = euler_sample(exact, request(TaskKind::T2V, x0), c, r);
            CHECK(max_abs_diff(out.data, x0) < 1e-6);
        }
    }
    SUBCASE("image-to-video keeps the condition frame exactly") {
        VelocityFn wild = [&](const std::vector<DiTSample>& b) {
            std::vector<Tensor> out;
            for (const auto& s : b) out.push_back(noisy_channels(s.x, 3) * 3.0 + Tensor::full({3, 3, 4, 4}, 0.7));
            return out;
        };
        SamplerConfig c = SamplerConfig::apg_preset();
        c.n_steps = 6;
        Rng r(9);
        const auto out = euler_sample(wild, request(TaskKind::I2V, x0), c, r);
        for (int ch = 0; ch < 3; ++ch)
            for (int h = 0; h < 4; ++h)
                for (int w = 0; w < 4; ++w) CHECK(out.at(ch, 0, h, w) == x0.data()[LatentVideo(x0).index(ch, 0, h, w)]);
    }
    SUBCASE("divergence is reported with its step") {
        int calls = 0;
        VelocityFn blowup = [&](const std::vector<DiTSample>& b) {
            std::vector<Tensor> out;
            const double v = ++calls >= 3 ? std::numeric_limits<double>::infinity() : 0.0;
            for (std::size_t i = 0; i < b.size(); ++i) out.push_back(Tensor::full({3, 3, 4, 4}, v));
            return out;
        };
        SamplerConfig c;
        c.n_steps = 10;
        Rng r(10);
        try {
            euler_sample(blowup, request(TaskKind::T2V, x0), c, r);
            FAIL("expected divergence");
        } catch (const NumericDivergence& e) {
            CHECK(e.step() == 2);
        }
    }
    SUBCASE("apg trajectories respect the clamp at every step") {
        VelocityFn lin = [&](const std::vector<DiTSample>& b) {
            std::vector<Tensor> out;
            for (const auto& s : b) {
                const double g = s.text.empty() ? -4.0 : 5.0;
                out.push_back(noisy_channels(s.x, 3) * g + x0 * 2.0);
            }
            return out;
        };
        SamplerConfig c = SamplerConfig::apg_preset();
        c.apg_threshold = 0.5;
        c.n_steps = 12;
        SampleTrace trace;
        Rng r(11);
        euler_sample(lin, request(TaskKind::T2V, x0), c, r, &trace);
        REQUIRE(trace.steps.size() == 12);
        for (const auto& st : trace.steps)
            for (double n : st.update_norms) CHECK(n <= 0.5 * (1 + 1e-12));
    }
}

TEST_CASE("sampling the diffusion transformer") {
    Rng rng(3);
    HybridDiT model(tiny_config(1, 1), 4);
    perturb(model.params(), rng, 0.3);
    const auto fn = dit_velocity(model);
    const Tensor x0 = random_tensor({3, 2, 4, 4}, rng, false);
    SamplerConfig c = SamplerConfig::cfg_preset();
    c.n_steps = 4;
    SUBCASE("deterministic for a seed") {
        Rng a(5), b(5);
        CHECK(max_abs_diff(euler_sample(fn, request(TaskKind::T2V, x0), c, a).data,
                           euler_sample(fn, request(TaskKind::T2V, x0), c, b).data) == 0.0);
    }
    SUBCASE("negative tokens steer the output") {
        SamplerConfig n = c;
        n.neg_tokens = encode_negative({2, 3}, 32);
        Rng a(5), b(5);
        CHECK(max_abs_diff(euler_sample(fn, request(TaskKind::T2V, x0), c, a).data,
                           euler_sample(fn, request(TaskKind::T2V, x0), n, b).data) > 1e-9);
        SamplerConfig same = c;
        same.neg_tokens = {1, 5, 7};
        Rng d(5);
        const auto out = euler_sample(fn, request(TaskKind::T2V, x0), same, d);
        for (double v : out.data.data()) CHECK(std::isfinite(v));
    }
    SUBCASE("mac accounting") {
        SampleTrace tr;
        Rng a(5);
        euler_sample(fn, request(TaskKind::T2V, x0), c, a, &tr);
        CHECK(tr.forward_calls == 4);
        CHECK(tr.macs > 0);
    }
    CHECK_THROWS_AS(encode_negative({40}, 32), ContractError);
}
