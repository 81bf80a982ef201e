#pragma once

// Dense float64 tensor with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared node; copying a Tensor aliases the
// same storage. Every op records its inputs and a backward closure when grad
// recording is enabled and at least one input requires grad. Calling
// backward() on a scalar accumulates d(loss)/d(leaf) into every leaf that
// requires grad; leaf gradients keep accumulating until zero_grad().

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace waver {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first written
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};
}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t dim(int axis) const;  // negative axes count from the end
    std::size_t ndim() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    // Writable view; only meant for leaves (initialisation, optimizer steps).
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t flat) const { return data()[flat]; }

    bool requires_grad() const;
    void set_requires_grad(bool v);
    bool has_grad() const;
    std::span<const double> grad() const;  // empty span when no grad yet
    std::span<double> mutable_grad();      // allocates zeros if needed
    void zero_grad();

    // Reverse pass from this scalar. Intermediate grads are reset first, so
    // running backward twice on one graph doubles the leaf grads exactly.
    void backward() const;

    // Same values, no history.
    Tensor detach() const;
    Tensor clone() const;

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

    // Used by op implementations.
    static Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                              detail::BackwardFn backward);

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;
};

// Disables tape recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Ops. Binary elementwise ops broadcast numpy-style.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// [..., m, k] @ [..., k, n] with broadcast batch dims; both operands need
// at least two dims.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// out.flat[i] = x.flat[index[i]]; the backward scatters-adds.
Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape out_shape);
// Rows of a [V, d] table; ids index the first axis. Result [ids.size(), d].
Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);

Tensor softmax(const Tensor& x, int axis);
// x / sqrt(mean(x^2) + eps) over the last axis, times weight[last] if given.
Tensor rms_norm(const Tensor& x, double eps, const Tensor& weight = Tensor());
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor silu(const Tensor& x);
// Cosine similarity along the last axis; result drops that axis.
Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-12);

// Multi-head scaled dot-product attention over rows of [n, heads*head_dim]
// tensors. groups (optional, size n) restricts token i to keys j with the
// same group id. When probs_out is non-null it receives a copy of the
// [heads, n, n] attention weights.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const std::vector<int>& groups = {}, std::vector<double>* probs_out = nullptr);

// Rotary embedding over rows of [n, heads*head_dim]. cos/sin are [n, head_dim/2]
// tables; pair p of every head rotates (x[2p], x[2p+1]) by the angle in column p.
Tensor rope(const Tensor& x, std::size_t heads, std::span<const double> cos_table,
            std::span<const double> sin_table);

}  // namespace waver
