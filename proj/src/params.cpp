#include "waver/params.hpp"

#include <algorithm>

#include "waver/error.hpp"

namespace waver {

const Tensor& ParamStore::add(const std::string& name, Tensor t) {
    WAVER_REQUIRE(!has(name), ContractError, "duplicate parameter '" + name + "'");
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back({name, std::move(t)});
    return params_.back().tensor;
}

const Tensor& ParamStore::get(const std::string& name) const {
    const auto it = index_.find(name);
    WAVER_REQUIRE(it != index_.end(), ContractError, "unknown parameter '" + name + "'");
    return params_[it->second].tensor;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

TensorList ParamStore::snapshot() const {
    TensorList out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back({p.name, p.tensor.detach().clone()});
    return out;
}

void ParamStore::load(const TensorList& values) {
    require_same_schema(params_, values);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto src = values[i].tensor.data();
        auto dst = params_[i].tensor.mutable_data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

void require_same_schema(const TensorList& a, const TensorList& b) {
    const std::size_t n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) {
        WAVER_REQUIRE(a[i].name == b[i].name, ContractError,
                      "parameter schemas diverge at index " + std::to_string(i) + ": '" + a[i].name + "' vs '" +
                          b[i].name + "'");
        WAVER_REQUIRE(a[i].tensor.shape() == b[i].tensor.shape(), ContractError,
                      "parameter '" + a[i].name + "' has shape " + shape_str(a[i].tensor.shape()) + " vs " +
                          shape_str(b[i].tensor.shape()));
    }
    WAVER_REQUIRE(a.size() == b.size(), ContractError,
                  "parameter schemas diverge at index " + std::to_string(n) + ": '" +
                      (a.size() > n ? a[n].name : b[n].name) + "' present on one side only");
}

}  // namespace waver
