#include <bit>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "waver/kernels.hpp"
#include "waver/rng.hpp"

using namespace waver;

namespace {
std::vector<double> random_vec(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
    return true;
}
}  // namespace

TEST_CASE("gemm backends agree bit for bit") {
    Rng rng(1);
    const std::size_t m = 37, k = 53, n = 29;
    auto a = random_vec(m * k, rng), b = random_vec(k * n, rng), bt = random_vec(n * k, rng),
         at = random_vec(k * m, rng);
    std::vector<double> c1(m * n), c2(m * n);
    kernels::serial::gemm_nn(m, k, n, a.data(), b.data(), c1.data(), false);
    kernels::parallel::gemm_nn(m, k, n, a.data(), b.data(), c2.data(), false);
    CHECK(bit_equal(c1, c2));

    std::vector<double> d1(m * n, 0.5), d2(m * n, 0.5);
    kernels::serial::gemm_nt(m, k, n, a.data(), bt.data(), d1.data());
    kernels::parallel::gemm_nt(m, k, n, a.data(), bt.data(), d2.data());
    CHECK(bit_equal(d1, d2));

    std::vector<double> e1(m * n, 0.0), e2(m * n, 0.0);
    kernels::serial::gemm_tn(m, k, n, at.data(), b.data(), e1.data());
    kernels::parallel::gemm_tn(m, k, n, at.data(), b.data(), e2.data());
    CHECK(bit_equal(e1, e2));

    // nn against a naive triple loop
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) s += a[i * k + kk] * b[kk * n + j];
            CHECK(std::abs(s - c1[i * n + j]) < 1e-12);
        }
}

TEST_CASE("attention backends agree bit for bit, with and without groups") {
    Rng rng(2);
    const kernels::AttentionDims d{41, 3, 8};
    const std::size_t w = d.heads * d.head_dim;
    auto q = random_vec(d.n * w, rng), k = random_vec(d.n * w, rng), v = random_vec(d.n * w, rng),
         dout = random_vec(d.n * w, rng);
    std::vector<int> groups(d.n);
    for (std::size_t i = 0; i < d.n; ++i) groups[i] = static_cast<int>((i * 7) % 5);
    for (bool use_groups : {false, true}) {
        kernels::GroupIds g = use_groups ? kernels::GroupIds(groups) : kernels::GroupIds();
        std::vector<double> o1(d.n * w), o2(d.n * w), p1(d.heads * d.n * d.n), p2(p1.size());
        kernels::serial::attention_forward(d, q.data(), k.data(), v.data(), g, 0.3, o1.data(), p1.data());
        kernels::parallel::attention_forward(d, q.data(), k.data(), v.data(), g, 0.3, o2.data(), p2.data());
        CHECK(bit_equal(o1, o2));
        CHECK(bit_equal(p1, p2));
        std::vector<double> dq1(d.n * w), dk1(d.n * w), dv1(d.n * w), s1(p1.size());
        std::vector<double> dq2(d.n * w), dk2(d.n * w), dv2(d.n * w), s2(p1.size());
        kernels::serial::attention_backward(d, q.data(), k.data(), v.data(), p1.data(), dout.data(), g, 0.3,
                                            dq1.data(), dk1.data(), dv1.data(), s1.data());
        kernels::parallel::attention_backward(d, q.data(), k.data(), v.data(), p1.data(), dout.data(), g, 0.3,
                                              dq2.data(), dk2.data(), dv2.data(), s2.data());
        CHECK(bit_equal(dq1, dq2));
        CHECK(bit_equal(dk1, dk2));
        CHECK(bit_equal(dv1, dv2));
    }
}

TEST_CASE("mac counter counts only unmasked attention pairs") {
    const kernels::AttentionDims d{4, 1, 2};
    std::vector<double> q(8, 0.1), o(8), p(16);
    std::vector<int> groups{0, 0, 1, 1};
    kernels::reset_mac_count();
    kernels::attention_forward(d, q.data(), q.data(), q.data(), {}, 1.0, o.data(), p.data());
    CHECK(kernels::mac_count() == 2u * 16u * 2u);
    kernels::reset_mac_count();
    kernels::attention_forward(d, q.data(), q.data(), q.data(), groups, 1.0, o.data(), p.data());
    CHECK(kernels::mac_count() == 2u * 8u * 2u);
    CHECK(p[0 * 4 + 2] == 0.0);
    CHECK(p[0 * 4 + 0] == 0.5);
}

TEST_CASE("backend scope restores the previous backend") {
    kernels::set_backend(kernels::Backend::Parallel);
    {
        kernels::BackendScope s(kernels::Backend::Serial);
        CHECK(kernels::backend() == kernels::Backend::Serial);
    }
    CHECK(kernels::backend() == kernels::Backend::Parallel);
}
