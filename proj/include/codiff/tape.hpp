#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "codiff/params.hpp"
#include "codiff/tensor.hpp"

namespace codiff {

// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const { return id != static_cast<std::size_t>(-1); }
};

// Reverse-mode recording of one forward pass. Parameter nodes alias the
// ParamStore tensors and accumulate their gradients straight into the
// store's grad slots during backward().
template <typename T>
class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    Var constant(Tensor<T> value) {
        Node n;
        n.value = std::move(value);
        return push_node(std::move(n));
    }

    // Trainable leaf (gradients accumulate into the store).
    Var leaf(Tensor<T>& value, Tensor<T>& grad) {
        Node n;
        n.ref = &value;
        n.ext_grad = &grad;
        n.requires_grad = true;
        return push_node(std::move(n));
    }

    Var param(ParamStore<T>& store, const std::string& name, bool trainable = true) {
        const auto key = std::make_pair(&store, name);
        auto it = params_.find(key_string(key));
        if (it != params_.end() && nodes_[it->second.id].requires_grad == trainable) return it->second;
        Param<T>& p = store.at(name);
        Node n;
        n.ref = &p.value;
        if (trainable) {
            n.ext_grad = &p.grad;
            n.requires_grad = true;
        }
        Var v = push_node(std::move(n));
        params_[key_string(key)] = v;
        return v;
    }

    // Records an op result. The backward closure is kept only when some input
    // requires a gradient.
    Var record(Tensor<T> value, std::initializer_list<Var> inputs, Backward backward) {
        Node n;
        n.value = std::move(value);
        for (Var in : inputs) {
            check(in);
            if (nodes_[in.id].requires_grad) n.requires_grad = true;
        }
        if (n.requires_grad) n.backward = std::move(backward);
        return push_node(std::move(n));
    }

    const Tensor<T>& value(Var v) const {
        check(v);
        const Node& n = nodes_[v.id];
        return n.ref ? *n.ref : n.value;
    }

    bool requires_grad(Var v) const {
        check(v);
        return nodes_[v.id].requires_grad;
    }

    // Gradient accumulator for a node, allocated on first use.
    Tensor<T>& grad(Var v) {
        check(v);
        Node& n = nodes_[v.id];
        if (n.ext_grad) return *n.ext_grad;
        if (n.grad.data.size() != value(v).size() || n.grad.shape != value(v).shape) n.grad = Tensor<T>(value(v).shape);
        return n.grad;
    }

    bool has_grad(Var v) const {
        check(v);
        const Node& n = nodes_[v.id];
        return n.ext_grad != nullptr || !n.grad.empty() || value(v).empty();
    }

    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and runs recorded closures in reverse order.
    void backward(Var loss) {
        if (nodes_.empty()) throw std::logic_error("backward: nothing has been recorded on this tape");
        check(loss);
        if (value(loss).size() != 1)
            throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(value(loss).shape));
        if (backward_done_) throw std::logic_error("backward: tape has already been differentiated");
        backward_done_ = true;
        if (!nodes_[loss.id].requires_grad) return;
        grad(loss)[0] += T{1};
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.empty()) continue;
            n.backward(*this, i);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        const Tensor<T>* ref = nullptr;
        Tensor<T> grad;
        Tensor<T>* ext_grad = nullptr;
        bool requires_grad = false;
        Backward backward;
    };

    static std::string key_string(const std::pair<const void*, std::string>& key) {
        return std::to_string(reinterpret_cast<std::uintptr_t>(key.first)) + ":" + key.second;
    }

    Var push_node(Node n) {
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    void check(Var v) const {
        if (!v.valid() || v.id >= nodes_.size()) throw std::logic_error("tape: variable was not recorded on this tape");
    }

    std::vector<Node> nodes_;
    std::unordered_map<std::string, Var> params_;
    bool backward_done_ = false;
};

}  // namespace codiff
