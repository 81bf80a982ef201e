#pragma once

// Dense float64 compute kernels behind the autodiff ops. Every kernel has a
// serial reference version and an OpenMP version. Both assign each output
// element to exactly one loop iteration with the same reduction order, so the
// two backends agree bit-for-bit; tests rely on that.

#include <cstddef>
#include <cstdint>
#include <span>

namespace waver::kernels {

enum class Backend { Serial, Parallel };

void set_backend(Backend b);
Backend backend();

// RAII backend switch for tests and benchmarks.
class BackendScope {
public:
    explicit BackendScope(Backend b) : prev_(backend()) { set_backend(b); }
    ~BackendScope() { set_backend(prev_); }
    BackendScope(const BackendScope&) = delete;
    BackendScope& operator=(const BackendScope&) = delete;

private:
    Backend prev_;
};

// Running count of multiply-accumulates issued by gemm and attention kernels.
std::uint64_t mac_count();
void reset_mac_count();

struct AttentionDims {
    std::size_t n;         // tokens
    std::size_t heads;
    std::size_t head_dim;  // q/k/v rows are heads*head_dim wide
};

// Token i may attend to token j iff groups is empty or groups[i] == groups[j].
using GroupIds = std::span<const int>;

// C[m,n] = (accumulate ? C : 0) + A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate);
// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);

// out[n, heads*head_dim]; probs[heads, n, n] receives the softmax weights
// (exact zeros where attention is masked).
void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v, GroupIds groups,
                       double scale, double* out, double* probs);
// Accumulates into dq/dk/dv. scratch must hold heads*n*n doubles.
void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, GroupIds groups, double scale, double* dq,
                        double* dk, double* dv, double* scratch);

namespace serial {
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate);
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v, GroupIds groups,
                       double scale, double* out, double* probs);
void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, GroupIds groups, double scale, double* dq,
                        double* dk, double* dv, double* scratch);
}  // namespace serial

namespace parallel {
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate);
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v, GroupIds groups,
                       double scale, double* out, double* probs);
void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, GroupIds groups, double scale, double* dq,
                        double* dk, double* dv, double* scratch);
}  // namespace parallel

}  // namespace waver::kernels
