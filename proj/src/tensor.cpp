#include "waver/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "waver/error.hpp"
#include "waver/kernels.hpp"

namespace waver {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace {

thread_local bool t_grad_enabled = true;

std::size_t norm_axis(int axis, std::size_t ndim) {
    const int n = static_cast<int>(ndim);
    const int a = axis < 0 ? axis + n : axis;
    WAVER_REQUIRE(a >= 0 && a < n, DimensionError,
                  "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(ndim));
    return static_cast<std::size_t>(a);
}

// outer x len x inner decomposition around one axis.
struct AxisSplit {
    std::size_t outer, len, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit r{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

std::vector<std::size_t> contiguous_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Numpy-style broadcast of two shapes; strides are 0 along broadcast axes.
struct Broadcast {
    Shape out;
    std::vector<std::size_t> stride_a, stride_b;
    bool same = false;
};

Broadcast make_broadcast(const Shape& a, const Shape& b) {
    Broadcast bc;
    if (a == b) {
        bc.out = a;
        bc.same = true;
        return bc;
    }
    const std::size_t nd = std::max(a.size(), b.size());
    bc.out.assign(nd, 1);
    bc.stride_a.assign(nd, 0);
    bc.stride_b.assign(nd, 0);
    const auto sa = contiguous_strides(a);
    const auto sb = contiguous_strides(b);
    for (std::size_t i = 0; i < nd; ++i) {
        const std::ptrdiff_t ia = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(nd - a.size());
        const std::ptrdiff_t ib = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(nd - b.size());
        const std::size_t da = ia >= 0 ? a[ia] : 1;
        const std::size_t db = ib >= 0 ? b[ib] : 1;
        if (da != db && da != 1 && db != 1)
            throw DimensionError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
        bc.out[i] = std::max(da, db);
        if (ia >= 0 && da != 1) bc.stride_a[i] = sa[ia];
        if (ib >= 0 && db != 1) bc.stride_b[i] = sb[ib];
    }
    return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
    const std::size_t total = shape_numel(bc.out);
    if (bc.same) {
        for (std::size_t o = 0; o < total; ++o) f(o, o, o);
        return;
    }
    const std::size_t nd = bc.out.size();
    std::vector<std::size_t> idx(nd, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < total; ++o) {
        f(o, ia, ib);
        for (std::size_t d = nd; d-- > 0;) {
            ++idx[d];
            ia += bc.stride_a[d];
            ib += bc.stride_b[d];
            if (idx[d] < bc.out[d]) break;
            ia -= bc.stride_a[d] * idx[d];
            ib -= bc.stride_b[d] * idx[d];
            idx[d] = 0;
        }
    }
}

bool wants_grad(const NodePtr& n) { return n && n->requires_grad; }

template <class Fwd, class Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd dydx) {
    const auto xs = x.data();
    std::vector<double> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
    return Tensor::make_result(x.shape(), std::move(out), {x}, [dydx](Node& self) {
        auto& in = self.inputs[0];
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dydx(in->data[i], self.data[i]);
    });
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
    auto bc = make_broadcast(a.shape(), b.shape());
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(shape_numel(bc.out));
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        switch (op) {
            case BinOp::Add: out[o] = ad[ia] + bd[ib]; break;
            case BinOp::Sub: out[o] = ad[ia] - bd[ib]; break;
            case BinOp::Mul: out[o] = ad[ia] * bd[ib]; break;
            case BinOp::Div: out[o] = ad[ia] / bd[ib]; break;
        }
    });
    Shape out_shape = bc.out;
    return Tensor::make_result(std::move(out_shape), std::move(out), {a, b}, [bc, op](Node& self) {
        const auto& A = self.inputs[0];
        const auto& B = self.inputs[1];
        const bool ga_on = wants_grad(A), gb_on = wants_grad(B);
        double* ga = ga_on ? A->ensure_grad().data() : nullptr;
        double* gb = gb_on ? B->ensure_grad().data() : nullptr;
        const double* g = self.grad.data();
        const double* av = A->data.data();
        const double* bv = B->data.data();
        for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            switch (op) {
                case BinOp::Add:
                    if (ga) ga[ia] += g[o];
                    if (gb) gb[ib] += g[o];
                    break;
                case BinOp::Sub:
                    if (ga) ga[ia] += g[o];
                    if (gb) gb[ib] -= g[o];
                    break;
                case BinOp::Mul:
                    if (ga) ga[ia] += g[o] * bv[ib];
                    if (gb) gb[ib] += g[o] * av[ia];
                    break;
                case BinOp::Div:
                    if (ga) ga[ia] += g[o] / bv[ib];
                    if (gb) gb[ib] -= g[o] * av[ia] / (bv[ib] * bv[ib]);
                    break;
            }
        });
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor core

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }
bool grad_enabled() { return t_grad_enabled; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> v(shape_numel(shape), value);
    return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape) WAVER_REQUIRE(d > 0, DimensionError, "tensor dims must be positive, got " + shape_str(shape));
    WAVER_REQUIRE(shape_numel(shape) == values.size(), DimensionError,
                  "shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

const Shape& Tensor::shape() const {
    WAVER_REQUIRE(node_, ContractError, "use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(int axis) const { return shape()[norm_axis(axis, ndim())]; }
std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
    WAVER_REQUIRE(node_, ContractError, "use of undefined tensor");
    return node_->data;
}

std::span<double> Tensor::mutable_data() {
    WAVER_REQUIRE(node_, ContractError, "use of undefined tensor");
    return node_->data;
}

double Tensor::item() const {
    WAVER_REQUIRE(numel() == 1, ContractError, "item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool v) {
    WAVER_REQUIRE(node_ && node_->is_leaf, ContractError, "requires_grad can only be set on leaves");
    node_->requires_grad = v;
}
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const {
    if (!node_) return {};
    return node_->grad;
}
std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }
void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<Node>();
    n->shape = shape();
    n->data = node_->data;
    return Tensor(std::move(n));
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.node_->requires_grad = node_->requires_grad && node_->is_leaf;
    return t;
}

Tensor Tensor::make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                           detail::BackwardFn backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool any = false;
    if (t_grad_enabled)
        for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
        n->requires_grad = true;
        n->is_leaf = false;
        n->inputs.reserve(inputs.size());
        for (const auto& in : inputs) n->inputs.push_back(in.node_);
        n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
}

void Tensor::backward() const {
    WAVER_REQUIRE(node_, ContractError, "backward on undefined tensor");
    WAVER_REQUIRE(node_->data.size() == 1, ContractError,
                  "backward requires a scalar loss, got shape " + shape_str(node_->shape));
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (Node* n : order)
        if (!n->is_leaf) n->grad.assign(n->data.size(), 0.0);
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Div); }

Tensor scale(const Tensor& x, double s) {
    return unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
    return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
    return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    for (double v : x.data()) WAVER_REQUIRE(v > 0.0, DomainError, "log of non-positive value");
    return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
    return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
    for (double v : x.data()) WAVER_REQUIRE(v >= 0.0, DomainError, "sqrt of negative value");
    return unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor gelu(const Tensor& x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    return unary(
        x,
        [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v))); },
        [](double v, double) {
            const double th = std::tanh(c * (v + k * v * v * v));
            return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * c * (1.0 + 3.0 * k * v * v);
        });
}

Tensor silu(const Tensor& x) {
    return unary(
        x, [](double v) { return v / (1.0 + std::exp(-v)); },
        [](double v, double) {
            const double s = 1.0 / (1.0 + std::exp(-v));
            return s * (1.0 + v * (1.0 - s));
        });
}

// ---------------------------------------------------------------------------
// Matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    WAVER_REQUIRE(as.size() >= 2 && bs.size() >= 2, DimensionError,
                  "matmul needs rank >= 2 operands, got " + shape_str(as) + " and " + shape_str(bs));
    const std::size_t m = as[as.size() - 2], k = as.back();
    const std::size_t k2 = bs[bs.size() - 2], n = bs.back();
    WAVER_REQUIRE(k == k2, DimensionError, "matmul inner dims differ: " + shape_str(as) + " @ " + shape_str(bs));

    Shape ba(as.begin(), as.end() - 2), bb(bs.begin(), bs.end() - 2);
    if (ba.empty()) ba = {1};
    if (bb.empty()) bb = {1};
    Broadcast bc;
    try {
        bc = make_broadcast(ba, bb);
    } catch (const DimensionError&) {
        throw DimensionError("matmul batch dims not broadcastable: " + shape_str(as) + " @ " + shape_str(bs));
    }
    struct Pair {
        std::size_t ia, ib;
    };
    std::vector<Pair> batches;
    for_each_broadcast(bc, [&](std::size_t, std::size_t ia, std::size_t ib) { batches.push_back({ia, ib}); });

    Shape out_shape;
    if (as.size() == 2 && bs.size() == 2) {
        out_shape = {m, n};
    } else {
        out_shape = bc.out;
        out_shape.push_back(m);
        out_shape.push_back(n);
    }
    std::vector<double> out(batches.size() * m * n);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t t = 0; t < batches.size(); ++t)
        kernels::gemm_nn(m, k, n, ad + batches[t].ia * m * k, bd + batches[t].ib * k * n, out.data() + t * m * n,
                         false);

    return Tensor::make_result(std::move(out_shape), std::move(out), {a, b}, [batches, m, k, n](Node& self) {
        const auto& A = self.inputs[0];
        const auto& B = self.inputs[1];
        for (std::size_t t = 0; t < batches.size(); ++t) {
            const double* g = self.grad.data() + t * m * n;
            if (wants_grad(A))
                kernels::gemm_nt(m, n, k, g, B->data.data() + batches[t].ib * k * n,
                                 A->ensure_grad().data() + batches[t].ia * m * k);
            if (wants_grad(B))
                kernels::gemm_tn(k, m, n, A->data.data() + batches[t].ia * m * k, g,
                                 B->ensure_grad().data() + batches[t].ib * k * n);
        }
    });
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& x, Shape shape) {
    WAVER_REQUIRE(shape_numel(shape) == x.numel(), DimensionError,
                  "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    std::vector<double> out(x.data().begin(), x.data().end());
    return Tensor::make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape out_shape) {
    WAVER_REQUIRE(shape_numel(out_shape) == index.size(), DimensionError,
                  "gather index count does not match output shape " + shape_str(out_shape));
    const auto xd = x.data();
    std::vector<double> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        WAVER_REQUIRE(index[i] < xd.size(), DimensionError, "gather index out of range");
        out[i] = xd[index[i]];
    }
    return Tensor::make_result(std::move(out_shape), std::move(out), {x},
                               [index = std::move(index)](Node& self) {
                                   auto& g = self.inputs[0]->ensure_grad();
                                   for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
                               });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
    const Shape& s = x.shape();
    WAVER_REQUIRE(order.size() == s.size(), DimensionError, "permute order has wrong rank");
    std::vector<bool> used(s.size(), false);
    for (auto o : order) {
        WAVER_REQUIRE(o < s.size() && !used[o], DimensionError, "permute order is not a permutation");
        used[o] = true;
    }
    const auto in_strides = contiguous_strides(s);
    Shape out_shape(s.size());
    std::vector<std::size_t> st(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        out_shape[i] = s[order[i]];
        st[i] = in_strides[order[i]];
    }
    std::vector<std::size_t> index(x.numel());
    std::vector<std::size_t> idx(s.size(), 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < index.size(); ++o) {
        index[o] = src;
        for (std::size_t d = s.size(); d-- > 0;) {
            ++idx[d];
            src += st[d];
            if (idx[d] < out_shape[d]) break;
            src -= st[d] * idx[d];
            idx[d] = 0;
        }
    }
    return gather(x, std::move(index), std::move(out_shape));
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
    std::vector<std::size_t> order(x.ndim());
    std::iota(order.begin(), order.end(), 0);
    std::swap(order[norm_axis(axis0, x.ndim())], order[norm_axis(axis1, x.ndim())]);
    return permute(x, order);
}

Tensor slice(const Tensor& x, int axis_, std::size_t begin, std::size_t end) {
    const std::size_t axis = norm_axis(axis_, x.ndim());
    const Shape& s = x.shape();
    WAVER_REQUIRE(begin < end && end <= s[axis], DimensionError,
                  "slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                      shape_str(s) + " axis " + std::to_string(axis));
    const auto sp = split_at(s, axis);
    const std::size_t w = end - begin;
    Shape out_shape = s;
    out_shape[axis] = w;
    std::vector<double> out(sp.outer * w * sp.inner);
    const auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(xd.data() + (o * sp.len + begin) * sp.inner, w * sp.inner, out.data() + o * w * sp.inner);
    return Tensor::make_result(std::move(out_shape), std::move(out), {x}, [sp, begin, w](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            double* dst = g.data() + (o * sp.len + begin) * sp.inner;
            const double* src = self.grad.data() + o * w * sp.inner;
            for (std::size_t i = 0; i < w * sp.inner; ++i) dst[i] += src[i];
        }
    });
}

Tensor concat(const std::vector<Tensor>& parts, int axis_) {
    WAVER_REQUIRE(!parts.empty(), ContractError, "concat of zero tensors");
    if (parts.size() == 1) return parts[0];
    const std::size_t axis = norm_axis(axis_, parts[0].ndim());
    Shape out_shape = parts[0].shape();
    out_shape[axis] = 0;
    std::vector<std::size_t> lens;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == out_shape.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == out_shape[d];
        WAVER_REQUIRE(ok, DimensionError,
                      "concat shape mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(s));
        lens.push_back(s[axis]);
        out_shape[axis] += s[axis];
    }
    const auto sp = split_at(out_shape, axis);
    std::vector<double> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto pd = parts[p].data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(pd.data() + o * lens[p] * sp.inner, lens[p] * sp.inner,
                        out.data() + (o * sp.len + offset) * sp.inner);
        offset += lens[p];
    }
    return Tensor::make_result(std::move(out_shape), std::move(out), parts, [sp, lens](Node& self) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < lens.size(); ++p) {
            const auto& in = self.inputs[p];
            if (wants_grad(in)) {
                auto& g = in->ensure_grad();
                for (std::size_t o = 0; o < sp.outer; ++o) {
                    const double* src = self.grad.data() + (o * sp.len + offset) * sp.inner;
                    double* dst = g.data() + o * lens[p] * sp.inner;
                    for (std::size_t i = 0; i < lens[p] * sp.inner; ++i) dst[i] += src[i];
                }
            }
            offset += lens[p];
        }
    });
}

Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids) {
    WAVER_REQUIRE(table.ndim() == 2, DimensionError, "embedding table must be [V, d]");
    WAVER_REQUIRE(!ids.empty(), ContractError, "embedding lookup with no ids");
    const std::size_t V = table.dim(0), d = table.dim(1);
    for (auto id : ids)
        WAVER_REQUIRE(id < V, ContractError,
                      "embedding id " + std::to_string(id) + " outside table of size " + std::to_string(V));
    const auto td = table.data();
    std::vector<double> out(ids.size() * d);
    for (std::size_t r = 0; r < ids.size(); ++r) std::copy_n(td.data() + ids[r] * d, d, out.data() + r * d);
    return Tensor::make_result({ids.size(), d}, std::move(out), {table}, [ids, d](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t r = 0; r < ids.size(); ++r)
            for (std::size_t c = 0; c < d; ++c) g[ids[r] * d + c] += self.grad[r * d + c];
    });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return Tensor::make_result({1}, {s}, {x}, [](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, int axis_, bool keepdim) {
    const std::size_t axis = norm_axis(axis_, x.ndim());
    const auto sp = split_at(x.shape(), axis);
    Shape out_shape = x.shape();
    if (keepdim || out_shape.size() == 1)
        out_shape[axis] = 1;
    else
        out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    const auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xd[(o * sp.len + l) * sp.inner + i];
    return Tensor::make_result(std::move(out_shape), std::move(out), {x}, [sp](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t l = 0; l < sp.len; ++l)
                for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.len + l) * sp.inner + i] += self.grad[o * sp.inner + i];
    });
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
    return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Normalisation / attention building blocks

Tensor softmax(const Tensor& x, int axis_) {
    const std::size_t axis = norm_axis(axis_, x.ndim());
    const auto sp = split_at(x.shape(), axis);
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            double mx = xd[base];
            for (std::size_t l = 1; l < sp.len; ++l) mx = std::max(mx, xd[base + l * sp.inner]);
            double s = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) {
                const double e = std::exp(xd[base + l * sp.inner] - mx);
                out[base + l * sp.inner] = e;
                s += e;
            }
            for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= s;
        }
    return Tensor::make_result(x.shape(), std::move(out), {x}, [sp](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const auto& y = self.data;
        const auto& gy = self.grad;
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.len * sp.inner + i;
                double dot = 0.0;
                for (std::size_t l = 0; l < sp.len; ++l) dot += gy[base + l * sp.inner] * y[base + l * sp.inner];
                for (std::size_t l = 0; l < sp.len; ++l) {
                    const std::size_t p = base + l * sp.inner;
                    g[p] += y[p] * (gy[p] - dot);
                }
            }
    });
}

Tensor rms_norm(const Tensor& x, double eps, const Tensor& weight) {
    const std::size_t D = x.shape().back();
    const std::size_t rows = x.numel() / D;
    if (weight.defined())
        WAVER_REQUIRE(weight.numel() == D, DimensionError,
                      "rms_norm weight " + shape_str(weight.shape()) + " does not match last dim of " +
                          shape_str(x.shape()));
    const auto xd = x.data();
    std::vector<double> u(xd.size()), r(rows);
    for (std::size_t row = 0; row < rows; ++row) {
        double ss = 0.0;
        for (std::size_t j = 0; j < D; ++j) ss += xd[row * D + j] * xd[row * D + j];
        r[row] = 1.0 / std::sqrt(ss / static_cast<double>(D) + eps);
        for (std::size_t j = 0; j < D; ++j) u[row * D + j] = xd[row * D + j] * r[row];
    }
    std::vector<double> out = u;
    if (weight.defined()) {
        const auto w = weight.data();
        for (std::size_t row = 0; row < rows; ++row)
            for (std::size_t j = 0; j < D; ++j) out[row * D + j] *= w[j];
    }
    std::vector<Tensor> inputs{x};
    if (weight.defined()) inputs.push_back(weight);
    return Tensor::make_result(x.shape(), std::move(out), inputs,
                               [u = std::move(u), r = std::move(r), rows, D](Node& self) {
                                   const bool has_w = self.inputs.size() > 1;
                                   const double* w = has_w ? self.inputs[1]->data.data() : nullptr;
                                   const auto& gy = self.grad;
                                   if (has_w && wants_grad(self.inputs[1])) {
                                       auto& gw = self.inputs[1]->ensure_grad();
                                       for (std::size_t row = 0; row < rows; ++row)
                                           for (std::size_t j = 0; j < D; ++j)
                                               gw[j] += gy[row * D + j] * u[row * D + j];
                                   }
                                   if (!wants_grad(self.inputs[0])) return;
                                   auto& gx = self.inputs[0]->ensure_grad();
                                   std::vector<double> gu(D);
                                   for (std::size_t row = 0; row < rows; ++row) {
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < D; ++j) {
                                           gu[j] = gy[row * D + j] * (w ? w[j] : 1.0);
                                           dot += gu[j] * u[row * D + j];
                                       }
                                       dot /= static_cast<double>(D);
                                       for (std::size_t j = 0; j < D; ++j)
                                           gx[row * D + j] += r[row] * (gu[j] - u[row * D + j] * dot);
                                   }
                               });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps) {
    WAVER_REQUIRE(a.shape() == b.shape(), DimensionError,
                  "cosine_similarity shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t D = a.shape().back();
    const std::size_t rows = a.numel() / D;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    if (out_shape.empty()) out_shape = {1};
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(rows), na(rows), nb(rows), den(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0, sa = 0.0, sb = 0.0;
        for (std::size_t j = 0; j < D; ++j) {
            dot += ad[r * D + j] * bd[r * D + j];
            sa += ad[r * D + j] * ad[r * D + j];
            sb += bd[r * D + j] * bd[r * D + j];
        }
        na[r] = std::sqrt(sa);
        nb[r] = std::sqrt(sb);
        den[r] = std::max(na[r] * nb[r], eps);
        out[r] = dot / den[r];
    }
    return Tensor::make_result(std::move(out_shape), std::move(out), {a, b},
                               [na, nb, den, rows, D](Node& self) {
                                   const auto& A = self.inputs[0];
                                   const auto& B = self.inputs[1];
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       const double g = self.grad[r];
                                       const double c = self.data[r];
                                       const bool clamped = na[r] * nb[r] < den[r];
                                       for (std::size_t j = 0; j < D; ++j) {
                                           const double av = A->data[r * D + j], bv = B->data[r * D + j];
                                           if (wants_grad(A)) {
                                               double d = bv / den[r];
                                               if (!clamped) d -= c * av / (na[r] * na[r]);
                                               A->ensure_grad()[r * D + j] += g * d;
                                           }
                                           if (wants_grad(B)) {
                                               double d = av / den[r];
                                               if (!clamped) d -= c * bv / (nb[r] * nb[r]);
                                               B->ensure_grad()[r * D + j] += g * d;
                                           }
                                       }
                                   }
                               });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, const std::vector<int>& groups,
                 std::vector<double>* probs_out) {
    WAVER_REQUIRE(q.ndim() == 2 && q.shape() == k.shape() && q.shape() == v.shape(), DimensionError,
                  "attention expects equal [n, width] q/k/v, got " + shape_str(q.shape()) + ", " +
                      shape_str(k.shape()) + ", " + shape_str(v.shape()));
    const std::size_t n = q.dim(0), width = q.dim(1);
    WAVER_REQUIRE(heads > 0 && width % heads == 0, DimensionError, "attention width not divisible by heads");
    WAVER_REQUIRE(groups.empty() || groups.size() == n, DimensionError, "attention groups must have one id per token");
    const kernels::AttentionDims dims{n, heads, width / heads};
    const double sc = 1.0 / std::sqrt(static_cast<double>(dims.head_dim));
    auto probs = std::make_shared<std::vector<double>>(heads * n * n);
    std::vector<double> out(n * width);
    kernels::attention_forward(dims, q.data().data(), k.data().data(), v.data().data(), groups, sc, out.data(),
                               probs->data());
    if (probs_out) *probs_out = *probs;
    return Tensor::make_result({n, width}, std::move(out), {q, k, v}, [dims, sc, probs, groups](Node& self) {
        const std::size_t sz = dims.n * dims.heads * dims.head_dim;
        std::vector<double> dq(sz, 0.0), dk(sz, 0.0), dv(sz, 0.0), scratch(dims.heads * dims.n * dims.n);
        const auto& Q = self.inputs[0];
        const auto& K = self.inputs[1];
        const auto& V = self.inputs[2];
        kernels::attention_backward(dims, Q->data.data(), K->data.data(), V->data.data(), probs->data(),
                                    self.grad.data(), groups, sc, dq.data(), dk.data(), dv.data(), scratch.data());
        const std::vector<double>* parts[3] = {&dq, &dk, &dv};
        for (int i = 0; i < 3; ++i) {
            if (!wants_grad(self.inputs[i])) continue;
            auto& g = self.inputs[i]->ensure_grad();
            for (std::size_t j = 0; j < sz; ++j) g[j] += (*parts[i])[j];
        }
    });
}

Tensor rope(const Tensor& x, std::size_t heads, std::span<const double> cos_table, std::span<const double> sin_table) {
    WAVER_REQUIRE(x.ndim() == 2, DimensionError, "rope expects [n, heads*head_dim]");
    const std::size_t n = x.dim(0), width = x.dim(1);
    WAVER_REQUIRE(width % heads == 0 && (width / heads) % 2 == 0, DimensionError,
                  "rope head_dim must be even and divide the width");
    const std::size_t half = width / heads / 2;
    WAVER_REQUIRE(cos_table.size() == n * half && sin_table.size() == n * half, DimensionError,
                  "rope tables must be [n, head_dim/2]");
    std::vector<double> c(cos_table.begin(), cos_table.end()), s(sin_table.begin(), sin_table.end());
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t p = 0; p < half; ++p) {
                const std::size_t i = r * width + h * 2 * half + 2 * p;
                const double cv = c[r * half + p], sv = s[r * half + p];
                out[i] = xd[i] * cv - xd[i + 1] * sv;
                out[i + 1] = xd[i] * sv + xd[i + 1] * cv;
            }
    return Tensor::make_result(x.shape(), std::move(out), {x},
                               [c = std::move(c), s = std::move(s), n, heads, half, width](Node& self) {
                                   auto& g = self.inputs[0]->ensure_grad();
                                   const auto& gy = self.grad;
                                   for (std::size_t r = 0; r < n; ++r)
                                       for (std::size_t h = 0; h < heads; ++h)
                                           for (std::size_t p = 0; p < half; ++p) {
                                               const std::size_t i = r * width + h * 2 * half + 2 * p;
                                               const double cv = c[r * half + p], sv = s[r * half + p];
                                               g[i] += gy[i] * cv + gy[i + 1] * sv;
                                               g[i + 1] += -gy[i] * sv + gy[i + 1] * cv;
                                           }
                               });
}

}  // namespace waver
