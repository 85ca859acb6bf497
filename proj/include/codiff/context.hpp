#pragma once

#include <string>

#include "codiff/params.hpp"
#include "codiff/rng.hpp"
#include "codiff/tape.hpp"

namespace codiff {

// Everything a sub-network needs for one forward pass: where to record, where
// parameters live, the random stream, whether dropout is active (`train`) and
// whether parameters receive gradients (`trainable`).
template <typename T>
struct ForwardContext {
    Tape<T>& tape;
    ParamStore<T>& params;
    Rng& rng;
    bool train = false;
    bool trainable = true;

    Var param(const std::string& name) const { return tape.param(params, name, trainable); }
};

namespace detail {

// PyTorch-style fan-in uniform init for a dense layer stored as [in, out].
template <typename T>
void add_linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    store.add(name + ".weight", uniform_init<T>(Shape{in, out}, bound, rng));
    store.add(name + ".bias", uniform_init<T>(Shape{out}, bound, rng));
}

}  // namespace detail

}  // namespace codiff
