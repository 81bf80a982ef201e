#include "waver/kernels.hpp"

#include <atomic>
#include <unordered_map>

namespace waver::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::Parallel};
std::atomic<std::uint64_t> g_macs{0};

std::uint64_t allowed_pairs(std::size_t n, GroupIds groups) {
    if (groups.empty()) return static_cast<std::uint64_t>(n) * n;
    std::unordered_map<int, std::uint64_t> counts;
    for (int g : groups) ++counts[g];
    std::uint64_t total = 0;
    for (const auto& [g, c] : counts) total += c * c;
    return total;
}
}  // namespace

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

std::uint64_t mac_count() { return g_macs.load(); }
void reset_mac_count() { g_macs.store(0); }

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate) {
    g_macs += static_cast<std::uint64_t>(m) * k * n;
    if (backend() == Backend::Serial)
        serial::gemm_nn(m, k, n, a, b, c, accumulate);
    else
        parallel::gemm_nn(m, k, n, a, b, c, accumulate);
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    g_macs += static_cast<std::uint64_t>(m) * k * n;
    if (backend() == Backend::Serial)
        serial::gemm_nt(m, k, n, a, b, c);
    else
        parallel::gemm_nt(m, k, n, a, b, c);
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    g_macs += static_cast<std::uint64_t>(m) * k * n;
    if (backend() == Backend::Serial)
        serial::gemm_tn(m, k, n, a, b, c);
    else
        parallel::gemm_tn(m, k, n, a, b, c);
}

void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v, GroupIds groups,
                       double scale, double* out, double* probs) {
    g_macs += 2 * allowed_pairs(d.n, groups) * d.heads * d.head_dim;
    if (backend() == Backend::Serial)
        serial::attention_forward(d, q, k, v, groups, scale, out, probs);
    else
        parallel::attention_forward(d, q, k, v, groups, scale, out, probs);
}

void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, GroupIds groups, double scale, double* dq,
                        double* dk, double* dv, double* scratch) {
    g_macs += 4 * allowed_pairs(d.n, groups) * d.heads * d.head_dim;
    if (backend() == Backend::Serial)
        serial::attention_backward(d, q, k, v, probs, dout, groups, scale, dq, dk, dv, scratch);
    else
        parallel::attention_backward(d, q, k, v, probs, dout, groups, scale, dq, dk, dv, scratch);
}

}  // namespace waver::kernels
