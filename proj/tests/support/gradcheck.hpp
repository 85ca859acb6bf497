#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "codiff/ops.hpp"
#include "codiff/params.hpp"
#include "codiff/tape.hpp"

namespace codiff::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;  // "name[index]"
    std::size_t checked = 0;
};

// Builds a scalar loss from the store on a fresh tape.
using LossBuilder = std::function<Var(Tape<double>&, ParamStore<double>&)>;

// Compares reverse-mode gradients of every store entry against central
// differences. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult grad_check(ParamStore<double>& store, const LossBuilder& build, double step = 1e-5,
                                  double floor = 1e-3) {
    store.zero_grad();
    {
        Tape<double> tape;
        tape.backward(build(tape, store));
    }
    GradCheckResult result;
    auto eval = [&] {
        Tape<double> tape;
        return tape.value(build(tape, store)).item();
    };
    for (auto& [name, p] : store.entries()) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double saved = p.value[i];
            p.value[i] = saved + step;
            const double up = eval();
            p.value[i] = saved - step;
            const double down = eval();
            p.value[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = p.grad[i];
            const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst = name + "[" + std::to_string(i) + "]";
            }
            ++result.checked;
        }
    }
    return result;
}

// sum(x * weights) for fixed random weights, so every output element gets a
// distinct upstream gradient.
inline Var probe(Tape<double>& tape, Var x, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> w(tape.value(x).shape);
    for (auto& v : w.data) v = rng.normal();
    return ops::sum(tape, ops::mul(tape, x, tape.constant(std::move(w))));
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

}  // namespace codiff::testing
