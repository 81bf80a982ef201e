#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "model_helpers.hpp"
#include "waver/error.hpp"
#include "waver/hybrid_dit.hpp"

using namespace waver;
using namespace waver::testing;

namespace {

// Attention computed separately inside each group by gathering its rows;
// an independent block-diagonal oracle for masked attention.
Tensor blockwise_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                           const std::vector<int>& groups) {
    const std::size_t n = q.dim(0), width = q.dim(1), hd = width / heads;
    std::vector<double> out(n * width, 0.0);
    std::vector<int> ids(groups);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    for (int g : ids) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < n; ++i)
            if (groups[i] == g) rows.push_back(i);
        for (std::size_t h = 0; h < heads; ++h)
            for (auto i : rows) {
                std::vector<double> logits;
                double mx = -1e300;
                for (auto j : rows) {
                    double s = 0;
                    for (std::size_t e = 0; e < hd; ++e) s += q.data()[i * width + h * hd + e] * k.data()[j * width + h * hd + e];
                    logits.push_back(s / std::sqrt(double(hd)));
                    mx = std::max(mx, logits.back());
                }
                double z = 0;
                for (double& l : logits) z += (l = std::exp(l - mx));
                for (std::size_t r = 0; r < rows.size(); ++r)
                    for (std::size_t e = 0; e < hd; ++e)
                        out[i * width + h * hd + e] += logits[r] / z * v.data()[rows[r] * width + h * hd + e];
            }
    }
    return Tensor::from({n, width}, out);
}

JointLayout layout(const HybridDiT& m, Dim3 grid, std::size_t text) { return m.layout_for({grid}, {text}); }

}  // namespace

TEST_CASE("config invariants") {
    CHECK_NOTHROW(HybridDiTConfig::toy().validate());
    const auto ref = HybridDiTConfig::reference_scale();
    CHECK_NOTHROW(ref.validate());
    CHECK(ref.d_model == 3072);
    CHECK(ref.in_channels == 36);
    CHECK(ref.out_channels == 16);
    CHECK(ref.m_dual == 16);
    CHECK(ref.n_single == 40);
    CHECK(default_rope_split(32) == Dim3{8, 12, 12});
    CHECK(default_rope_split(16) == Dim3{4, 6, 6});
    CHECK(default_rope_split(128) == Dim3{32, 48, 48});
    auto bad = HybridDiTConfig::toy();
    bad.d_model = 100;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = HybridDiTConfig::toy();
    bad.rope_split = {7, 13, 12};
    CHECK_THROWS_AS(bad.validate(), ContractError);
    for (auto cfg : {tiny_config(1, 1), tiny_config(0, 2), tiny_config(2, 0), HybridDiTConfig::toy()}) {
        HybridDiT m(cfg, 1);
        CHECK(parameter_count(cfg) == m.params().scalar_count());
    }
}

TEST_CASE("patchify") {
    Rng rng(1);
    SUBCASE("unit patches are raw channel vectors") {
        const Tensor x = random_input(rng, 3, 2, 2, 2);
        const Tensor tok = patchify_raw(x, {1, 1, 1});
        CHECK(tok.shape() == Shape{8, 3});
        for (int t = 0; t < 2; ++t)
            for (int h = 0; h < 2; ++h)
                for (int w = 0; w < 2; ++w)
                    for (int c = 0; c < 3; ++c)
                        CHECK(tok.data()[((t * 2 + h) * 2 + w) * 3 + c] == x.data()[((c * 2 + t) * 2 + h) * 2 + w]);
    }
    SUBCASE("token count") { CHECK(patchify_raw(random_input(rng, 1, 1, 4, 4), {1, 2, 2}).dim(0) == 4); }
    SUBCASE("round trip with identity projection") {
        for (Dim3 p : {Dim3{1, 2, 2}, Dim3{2, 1, 2}, Dim3{2, 2, 2}, Dim3{1, 4, 4}}) {
            const Tensor x = random_input(rng, 7, 4, 4, 8);
            const Tensor tok = patchify_raw(x, p);
            const std::size_t e = tok.dim(1);
            std::vector<double> eye(e * e, 0.0);
            for (std::size_t i = 0; i < e; ++i) eye[i * e + i] = 1.0;
            const Tensor proj = matmul(tok, Tensor::from({e, e}, eye));
            const Tensor back = unpatchify_raw(proj, 7, 4, 4, 8, p);
            CHECK(back.shape() == x.shape());
            CHECK(max_abs_diff(back, x) == 0.0);
        }
    }
    CHECK_THROWS_AS(patchify_raw(random_input(rng, 1, 1, 5, 4), {1, 2, 2}), ContractError);
}

TEST_CASE("3d rotary embedding") {
    const Dim3 split{2, 4, 4};
    const int hd = 10;
    const Dim3 grid{3, 4, 5};
    const auto tab = rope_tables(grid, split, hd, 10000.0, 2);
    CHECK(tab.rows == 62);
    SUBCASE("origin and text rows are identity") {
        for (int c = 0; c < hd / 2; ++c) {
            CHECK(tab.cos[c] == 1.0);
            CHECK(tab.sin[c] == 0.0);
            CHECK(tab.cos[61 * 5 + c] == 1.0);
            CHECK(tab.sin[60 * 5 + c] == 0.0);
        }
    }
    Rng rng(2);
    const std::size_t n = tab.rows;
    const Tensor x = random_tensor({n, std::size_t(2 * hd)}, rng, false);
    const Tensor r = rope(x, 2, tab.cos, tab.sin);
    SUBCASE("pairs keep their norm") {
        for (std::size_t i = 0; i < n * hd; ++i) {
            const double a = std::hypot(x.data()[2 * i], x.data()[2 * i + 1]);
            const double b = std::hypot(r.data()[2 * i], r.data()[2 * i + 1]);
            CHECK(a == doctest::Approx(b).epsilon(1e-13));
        }
    }
    SUBCASE("logits depend only on the offset, per axis") {
        const auto row = [&](int t, int h, int w) { return std::size_t((t * grid.h + h) * grid.w + w); };
        std::vector<double> qv(hd), kv(hd);
        for (auto& v : qv) v = rng.normal();
        for (auto& v : kv) v = rng.normal();
        auto rotated_dot = [&](std::size_t a, std::size_t b) {
            auto rot = [&](const std::vector<double>& v, std::size_t rr) {
                std::vector<double> o(hd);
                for (int c = 0; c < hd / 2; ++c) {
                    const double cs = tab.cos[rr * 5 + c], sn = tab.sin[rr * 5 + c];
                    o[2 * c] = v[2 * c] * cs - v[2 * c + 1] * sn;
                    o[2 * c + 1] = v[2 * c] * sn + v[2 * c + 1] * cs;
                }
                return o;
            };
            const auto q = rot(qv, a), k = rot(kv, b);
            return std::inner_product(q.begin(), q.end(), k.begin(), 0.0);
        };
        const double base_t = rotated_dot(row(0, 1, 1), row(1, 1, 1)), shift_t = rotated_dot(row(1, 1, 1), row(2, 1, 1));
        CHECK(base_t == doctest::Approx(shift_t).epsilon(1e-12));
        const double base_h = rotated_dot(row(0, 0, 2), row(0, 2, 2)), shift_h = rotated_dot(row(0, 1, 2), row(0, 3, 2));
        CHECK(base_h == doctest::Approx(shift_h).epsilon(1e-12));
        const double base_w = rotated_dot(row(2, 3, 0), row(2, 3, 3)), shift_w = rotated_dot(row(2, 3, 1), row(2, 3, 4));
        CHECK(base_w == doctest::Approx(shift_w).epsilon(1e-12));
        CHECK(std::abs(base_w - rotated_dot(row(2, 3, 0), row(2, 3, 2))) > 1e-6);
    }
    CHECK_THROWS_AS(rope_tables(grid, {3, 3, 4}, 10, 10000.0, 0), ContractError);
}

TEST_CASE("factorized positional encoding") {
    Rng rng(3);
    const Dim3 g{2, 3, 4};
    SUBCASE("zero tables contribute nothing") {
        const Tensor z = factorized_pe(Tensor::zeros({4, 5}), Tensor::zeros({4, 5}), Tensor::zeros({4, 5}), g);
        CHECK(z.shape() == Shape{24, 5});
        for (double v : z.data()) CHECK(v == 0.0);
    }
    const Tensor et = random_tensor({4, 5}, rng), eh = random_tensor({4, 5}, rng), ew = random_tensor({4, 5}, rng);
    SUBCASE("width differences do not depend on t or h") {
        const Tensor pe = factorized_pe(et, eh, ew, g);
        auto at = [&](int t, int h, int w, int c) { return pe.data()[((t * 3 + h) * 4 + w) * 5 + c]; };
        for (int c = 0; c < 5; ++c) {
            const double ref = at(0, 0, 3, c) - at(0, 0, 1, c);
            for (int t = 0; t < 2; ++t)
                for (int h = 0; h < 3; ++h) CHECK(at(t, h, 3, c) - at(t, h, 1, c) == doctest::Approx(ref).epsilon(1e-14));
        }
    }
    SUBCASE("one-token loss touches exactly three rows") {
        const Tensor pe = factorized_pe(et, eh, ew, g);
        sum(slice(pe, 0, 17, 18)).backward();  // token (1, 1, 1)
        auto nonzero_rows = [](const Tensor& t) {
            std::vector<int> rows;
            for (std::size_t r = 0; r < t.dim(0); ++r)
                for (std::size_t c = 0; c < t.dim(1); ++c)
                    if (t.grad()[r * t.dim(1) + c] != 0.0) {
                        rows.push_back(int(r));
                        break;
                    }
            return rows;
        };
        CHECK(nonzero_rows(et) == std::vector<int>{1});
        CHECK(nonzero_rows(eh) == std::vector<int>{1});
        CHECK(nonzero_rows(ew) == std::vector<int>{1});
    }
    CHECK_THROWS_AS(factorized_pe(et, eh, ew, {5, 1, 1}), ContractError);
}

TEST_CASE("dual and single stream blocks") {
    Rng rng(4);
    const auto cfg = tiny_config(1, 1);
    HybridDiT model(cfg, 11);
    const Dim3 grid{2, 2, 2};
    const std::size_t nv = 8, nt = 3, d = 16;
    const Tensor video = random_tensor({nv, d}, rng, false), text = random_tensor({nt, d}, rng, false);
    const Tensor cond = model.time_condition({0.3});

    SUBCASE("zero gates make every block the identity") {
        const auto L = layout(model, grid, nt);
        const auto [v, t] = model.dual_block(0, video, text, cond, L, L.full_groups);
        CHECK(max_abs_diff(v, video) == 0.0);
        CHECK(max_abs_diff(t, text) == 0.0);
        const Tensor j = concat({video, text}, 0);
        CHECK(max_abs_diff(model.single_block(1, j, cond, L, L.full_groups), j) == 0.0);
    }

    perturb(model.params(), rng);
    const Tensor cond2 = model.time_condition({0.3});

    SUBCASE("empty text reduces to video self-attention") {
        // a single-stream block holding the video weights, run on video only
        HybridDiT ref(tiny_config(0, 1), 0);
        TensorList vals = ref.params().snapshot();
        for (auto& nt_ : vals) {
            const std::string name = nt_.name;
            const std::string key = "block.0.joint.";
            if (name.rfind(key, 0) == 0) nt_.tensor = model.params().get("block.0.video." + name.substr(key.size())).detach();
            else if (model.params().has(name)) nt_.tensor = model.params().get(name).detach();
        }
        ref.params().load(vals);
        const auto L = layout(model, grid, 0);
        const auto [v, t] = model.dual_block(0, video, Tensor(), cond2, L, L.full_groups);
        const Tensor s = ref.single_block(0, video, ref.time_condition({0.3}), L, L.full_groups);
        CHECK(max_abs_diff(v, s) < 1e-13);
    }

    SUBCASE("tying both streams reproduces the single-stream block") {
        HybridDiT single(tiny_config(0, 1), 0);
        TensorList vals = single.params().snapshot();
        for (auto& e : vals) {
            const std::string key = "block.0.joint.";
            if (e.name.rfind(key, 0) == 0) e.tensor = model.params().get("block.0.video." + e.name.substr(key.size())).detach();
            else if (model.params().has(e.name)) e.tensor = model.params().get(e.name).detach();
        }
        single.params().load(vals);
        HybridDiT tied(tiny_config(1, 0), 0);
        TensorList tv = tied.params().snapshot();
        for (auto& e : tv) {
            std::string name = e.name;
            const auto pos = name.find(".text.");
            if (name.rfind("block.", 0) == 0 && pos != std::string::npos) name.replace(pos, 6, ".video.");
            e.tensor = model.params().get(name).detach();
        }
        tied.params().load(tv);
        const auto L = layout(model, grid, nt);
        const auto [v, t] = tied.dual_block(0, video, text, cond2, L, L.full_groups);
        const Tensor j = single.single_block(0, concat({video, text}, 0), single.time_condition({0.3}), L, L.full_groups);
        CHECK(max_abs_diff(concat({v, t}, 0), j) < 1e-13);
    }

    SUBCASE("permuting text rows permutes text outputs and leaves video untouched") {
        const auto L = layout(model, grid, nt);
        const std::vector<std::size_t> perm{2, 0, 1};
        std::vector<std::size_t> idx;
        for (auto r : perm)
            for (std::size_t c = 0; c < d; ++c) idx.push_back(r * d + c);
        const Tensor text_p = gather(text, idx, {nt, d});
        const auto [v1, t1] = model.dual_block(0, video, text, cond2, L, L.full_groups);
        const auto [v2, t2] = model.dual_block(0, video, text_p, cond2, L, L.full_groups);
        CHECK(max_abs_diff(v1, v2) < 1e-13);
        CHECK(max_abs_diff(gather(t1, idx, {nt, d}), t2) < 1e-13);
        CHECK(max_abs_diff(v1, video) > 1e-3);
    }

    SUBCASE("single stream is permutation equivariant without positions") {
        auto L = layout(model, grid, nt);
        L.use_rope = false;
        const std::size_t n = nv + nt;
        const Tensor j = concat({video, text}, 0);
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::reverse(perm.begin(), perm.end());
        std::vector<std::size_t> idx;
        for (auto r : perm)
            for (std::size_t c = 0; c < d; ++c) idx.push_back(r * d + c);
        const Tensor out = model.single_block(1, j, cond2, L, L.full_groups);
        const Tensor out_p = model.single_block(1, gather(j, idx, {n, d}), cond2, L, L.full_groups);
        CHECK(max_abs_diff(gather(out, idx, {n, d}), out_p) < 1e-13);
    }
}

TEST_CASE("window attention") {
    Rng rng(5);
    const Dim3 grid{4, 4, 4};
    const std::size_t n = 64, heads = 2, width = 8;
    const Tensor q = random_tensor({n, width}, rng, false), k = random_tensor({n, width}, rng, false),
                 v = random_tensor({n, width}, rng, false);
    SUBCASE("whole-grid window equals full attention bitwise") {
        CHECK(max_abs_diff(window_attention(q, k, v, heads, grid, grid), attention(q, k, v, heads)) == 0.0);
    }
    SUBCASE("unit windows return the values") {
        CHECK(max_abs_diff(window_attention(q, k, v, heads, grid, {1, 1, 1}), v) == 0.0);
    }
    SUBCASE("arbitrary windows equal block-diagonal attention") {
        for (Dim3 w : {Dim3{1, 2, 2}, Dim3{2, 1, 1}, Dim3{4, 2, 1}, Dim3{2, 4, 4}, Dim3{1, 1, 4}}) {
            const Tensor a = window_attention(q, k, v, heads, grid, w);
            const Tensor b = blockwise_attention(q, k, v, heads, window_groups(grid, w));
            CHECK(max_abs_diff(a, b) < 1e-9);
        }
    }
    CHECK_THROWS_AS(window_groups(grid, {3, 1, 1}), ContractError);
}

TEST_CASE("layer window schedule") {
    auto cfg = tiny_config(1, 4);
    cfg.attn_mode = AttnMode::Window;
    cfg.full_attn_boundary_layers = 1;
    HybridDiT m(cfg, 1);
    const auto w = m.layer_windows();
    REQUIRE(w.size() == 5);
    CHECK_FALSE(w[0].has_value());
    CHECK_FALSE(w[4].has_value());
    CHECK(*w[1] == Dim3{1, 2, 2});
    CHECK(*w[2] == Dim3{2, 1, 1});
    CHECK(*w[3] == Dim3{1, 2, 2});
}

TEST_CASE("full forward") {
    Rng rng(6);
    const Tensor x = random_input(rng, 7, 4, 4, 4);
    const std::vector<int> text{1, 5, 8, 12};

    SUBCASE("identity blocks leave the projected embedding") {
        const auto cfg = tiny_config(1, 1);
        HybridDiT m(cfg, 3);
        const Tensor out = m.forward_one(x, text, 0.4);
        const auto& P = m.params();
        const Dim3 g{4, 2, 2};
        Tensor tok = linear(patchify_raw(x, cfg.patch), P.get("embed.patch.weight"), P.get("embed.patch.bias")) +
                     factorized_pe(P.get("pe.t"), P.get("pe.h"), P.get("pe.w"), g);
        const Tensor expect = unpatchify_raw(linear(rms_norm(tok, 1e-6), P.get("final.proj.weight"), P.get("final.proj.bias")),
                                             3, 4, 4, 4, cfg.patch);
        CHECK(max_abs_diff(out, expect) == 0.0);
    }
    SUBCASE("output shape and stream variants") {
        for (auto [m_, n_] : {std::pair{1, 1}, std::pair{0, 2}, std::pair{2, 0}}) {
            HybridDiT m(tiny_config(m_, n_), 3);
            perturb(m.params(), rng);
            const Tensor out = m.forward_one(x, text, 0.7);
            CHECK(out.shape() == Shape{3, 4, 4, 4});
            for (double v : out.data()) CHECK(std::isfinite(v));
        }
    }
    SUBCASE("captions change the output") {
        HybridDiT m(tiny_config(1, 1), 3);
        perturb(m.params(), rng);
        const Tensor a = m.forward_one(x, text, 0.5);
        const Tensor b = m.forward_one(x, {1, 5, 9, 12}, 0.5);
        CHECK(max_abs_diff(a, b) > 1e-6);
    }
    SUBCASE("deterministic given seed") {
        HybridDiT a(tiny_config(1, 1), 9), b(tiny_config(1, 1), 9);
        Rng r1(1), r2(1);
        perturb(a.params(), r1);
        perturb(b.params(), r2);
        CHECK(max_abs_diff(a.forward_one(x, text, 0.5), b.forward_one(x, text, 0.5)) == 0.0);
    }
    SUBCASE("packing two samples equals running them apart") {
        HybridDiT m(tiny_config(1, 1), 3);
        perturb(m.params(), rng);
        const Tensor x2 = random_input(rng, 7, 2, 4, 8);
        const auto packed = m.forward({{x, text, 0.2}, {x2, {3, 4}, 0.9}});
        CHECK(max_abs_diff(packed.velocity[0], m.forward_one(x, text, 0.2)) < 1e-12);
        CHECK(max_abs_diff(packed.velocity[1], m.forward_one(x2, {3, 4}, 0.9)) < 1e-12);
    }
    SUBCASE("contract errors") {
        HybridDiT m(tiny_config(1, 1), 3);
        CHECK_THROWS_AS(m.forward_one(random_input(rng, 5, 4, 4, 4), text, 0.5), DimensionError);
        CHECK_THROWS_AS(m.forward_one(x, {99}, 0.5), ContractError);
        CHECK_THROWS_AS(m.forward_one(x, text, 1.5), DomainError);
    }
}

TEST_CASE("full forward gradients match finite differences") {
    Rng rng(7);
    for (auto [m_, n_] : {std::pair{1, 1}, std::pair{2, 0}, std::pair{0, 2}}) {
        auto cfg = tiny_config(m_, n_);
        HybridDiT m(cfg, 5);
        perturb(m.params(), rng, 0.3);
        const Tensor x = random_input(rng, 7, 2, 4, 4);
        const Tensor w = random_tensor({3, 2, 4, 4}, rng, false);
        std::vector<Tensor> leaves;
        for (const auto& p : m.params().list()) leaves.push_back(p.tensor);
        const auto res = gradcheck(
            leaves, [&] { return sum(m.forward_one(x, {2, 7, 11}, 0.35) * w); }, 1e-5, 3);
        CAPTURE(res.worst);
        CHECK(res.max_rel_err < 1e-4);
    }
}

TEST_CASE("attention statistics") {
    SUBCASE("uniform rows") {
        const std::size_t n = 5;
        std::vector<double> p(n * n, 1.0 / n);
        const auto s = summarize_attention(p, 1, n, {}, 1, 0);
        CHECK(s[0].mean_entropy == doctest::Approx(std::log(5.0)).epsilon(1e-14));
        CHECK(s[0].mean_topk_mass == doctest::Approx(0.2).epsilon(1e-14));
    }
    SUBCASE("one-hot rows") {
        const std::size_t n = 4;
        std::vector<double> p(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) p[i * n + (i + 1) % n] = 1.0;
        const auto s = summarize_attention(p, 1, n, {}, 1, 0);
        CHECK(s[0].mean_entropy == 0.0);
        CHECK(s[0].mean_topk_mass == 1.0);
    }
    Rng rng(8);
    const Tensor x = random_input(rng, 7, 4, 4, 4);
    SUBCASE("statistics vary across layers and timesteps") {
        HybridDiT m(tiny_config(1, 2), 3);
        perturb(m.params(), rng, 0.5);
        ForwardOptions opt;
        opt.record_attention = true;
        std::vector<double> per_t;
        for (double t : {0.1, 0.5, 0.9}) {
            const auto r = m.forward({{x, {1, 2}, t}}, opt);
            REQUIRE(r.attention.size() == 3 * 2);
            double lo = 1e9, hi = -1e9, total = 0;
            for (const auto& h : r.attention) {
                lo = std::min(lo, h.mean_entropy);
                hi = std::max(hi, h.mean_entropy);
                total += h.mean_entropy;
                CHECK(h.mean_entropy <= h.mean_log_keys + 1e-12);
            }
            CHECK(hi - lo > 1e-6);
            per_t.push_back(total);
        }
        CHECK(std::abs(per_t[0] - per_t[2]) > 1e-9);
    }
    SUBCASE("window mode is rejected") {
        auto cfg = tiny_config(1, 2);
        cfg.attn_mode = AttnMode::Window;
        cfg.window_schedule = {{1, 1, 1}};
        HybridDiT m(cfg, 3);
        ForwardOptions opt;
        opt.record_attention = true;
        CHECK_THROWS_AS(m.forward({{x, {1}, 0.5}}, opt), UnsupportedMode);
    }
}
