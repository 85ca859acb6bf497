#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "codiff/rng.hpp"
#include "codiff/tensor.hpp"

namespace codiff {

template <typename T>
struct Param {
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> adam_m;
    Tensor<T> adam_v;
};

// Named parameter tensors with gradient and Adam slots, ordered by name.
template <typename T>
class ParamStore {
public:
    using Map = std::map<std::string, Param<T>>;

    Param<T>& add(const std::string& name, Tensor<T> init) {
        if (entries_.count(name)) throw std::invalid_argument("param store: duplicate parameter '" + name + "'");
        Param<T> p;
        p.grad = Tensor<T>(init.shape);
        p.adam_m = Tensor<T>(init.shape);
        p.adam_v = Tensor<T>(init.shape);
        p.value = std::move(init);
        return entries_.emplace(name, std::move(p)).first->second;
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    Param<T>& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("param store: no parameter '" + name + "'");
        return it->second;
    }
    const Param<T>& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("param store: no parameter '" + name + "'");
        return it->second;
    }

    Tensor<T>& value(const std::string& name) { return at(name).value; }
    const Tensor<T>& value(const std::string& name) const { return at(name).value; }

    std::vector<std::string> names(std::string_view prefix = {}) const {
        std::vector<std::string> out;
        for (const auto& [name, p] : entries_)
            if (name.starts_with(prefix)) out.push_back(name);
        return out;
    }

    std::size_t parameter_count(std::string_view prefix = {}) const {
        std::size_t n = 0;
        for (const auto& [name, p] : entries_)
            if (name.starts_with(prefix)) n += p.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& [name, p] : entries_) p.grad.fill(T{0});
    }

    void reset_optimizer() {
        for (auto& [name, p] : entries_) {
            p.adam_m.fill(T{0});
            p.adam_v.fill(T{0});
        }
        step_ = 0;
    }

    std::int64_t step() const { return step_; }
    void set_step(std::int64_t s) { step_ = s; }

    Map& entries() { return entries_; }
    const Map& entries() const { return entries_; }

    // Changes the scalar type, dropping gradients and optimizer state.
    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [name, p] : entries_) out.add(name, p.value.template cast<U>());
        return out;
    }

private:
    Map entries_;
    std::int64_t step_ = 0;
};

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline bool has_any_prefix(std::string_view name, const std::vector<std::string>& prefixes) {
    if (prefixes.empty()) return true;
    for (const auto& p : prefixes)
        if (name.starts_with(p)) return true;
    return false;
}

// Bias-corrected Adam over every parameter whose name matches one of
// `trainable` (all when empty). Increments the step counter and zeroes all
// gradient slots.
template <typename T>
void adam_step(ParamStore<T>& store, const AdamOptions& opt = {}, const std::vector<std::string>& trainable = {}) {
    store.set_step(store.step() + 1);
    const double t = static_cast<double>(store.step());
    const double correction1 = 1.0 - std::pow(opt.beta1, t);
    const double correction2 = 1.0 - std::pow(opt.beta2, t);
    for (auto& [name, p] : store.entries()) {
        if (has_any_prefix(name, trainable)) {
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i];
                const double m = opt.beta1 * p.adam_m[i] + (1.0 - opt.beta1) * g;
                const double v = opt.beta2 * p.adam_v[i] + (1.0 - opt.beta2) * g * g;
                p.adam_m[i] = static_cast<T>(m);
                p.adam_v[i] = static_cast<T>(v);
                const double m_hat = m / correction1;
                const double v_hat = v / correction2;
                p.value[i] = static_cast<T>(p.value[i] - opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps));
            }
        }
        p.grad.fill(T{0});
    }
}

// Initializers.
template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    return t;
}

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
    return t;
}

}  // namespace codiff
