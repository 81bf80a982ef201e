#pragma once

// Named, ordered collection of trainable tensors. Order is insertion order
// and is what checkpoints and the optimizer iterate over.

#include <string>
#include <unordered_map>

#include "waver/checkpoint.hpp"
#include "waver/tensor.hpp"

namespace waver {

class ParamStore {
public:
    // Registers a leaf that requires grad; names must be unique.
    const Tensor& add(const std::string& name, Tensor t);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const TensorList& list() const { return params_; }
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;

    void zero_grad();

    // Deep copy of current values, detached.
    TensorList snapshot() const;
    // Copies values in place; names, order and shapes must match exactly.
    void load(const TensorList& values);

private:
    TensorList params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Throws ContractError naming the first divergent entry when two lists do
// not share names and shapes in the same order.
void require_same_schema(const TensorList& a, const TensorList& b);

}  // namespace waver
