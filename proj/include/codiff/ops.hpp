#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "codiff/rng.hpp"
#include "codiff/tape.hpp"
#include "codiff/tensor.hpp"

// Differentiable kernels recorded on a Tape. Sequences are laid out as
// (batch, length, channels); "row" ops treat every leading axis as a row and
// act on the last axis. Shape errors throw std::invalid_argument naming the op.
namespace codiff::ops {

// tokens: batch*length indices into table rows [vocab+1, embed].
template <typename T>
Var embed_lookup(Tape<T>& tape, Var table, std::span<const std::int32_t> tokens, std::size_t batch,
                 std::size_t length);

// Stride 1, zero padding so the output keeps the input length; for even
// kernels the extra pad goes on the right. weight [K, C_in, C_out], bias [C_out].
template <typename T>
Var conv1d(Tape<T>& tape, Var x, Var weight, Var bias);

// Splits the last axis into halves (a, b) and returns a * sigmoid(b).
template <typename T>
Var glu(Tape<T>& tape, Var x);

template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta, double eps = 1e-5);

// Inverted dropout: kept units are scaled by 1/(1-rate). Identity when
// rate == 0 or train == false.
template <typename T>
Var dropout(Tape<T>& tape, Var x, double rate, bool train, Rng& rng);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b);

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);

// [B, L, C] -> [B, C]
template <typename T>
Var global_max_pool(Tape<T>& tape, Var x);

// Max over positions with valid[b * L + l] != 0 only; rows without a valid
// position pool to zero.
template <typename T>
Var global_max_pool(Tape<T>& tape, Var x, std::span<const std::uint8_t> valid);

// x [..., in] @ weight [in, out] + bias [out]
template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias);

template <typename T>
Var relu(Tape<T>& tape, Var x);

template <typename T>
Var exp(Tape<T>& tape, Var x);

// Gradient is zero where the input lies outside [lo, hi].
template <typename T>
Var clamp(Tape<T>& tape, Var x, double lo, double hi);

// Concatenation along the last axis; leading axes must agree.
template <typename T>
Var concat(Tape<T>& tape, Var a, Var b);

// scale * h + shift, with scale/shift [B, C] broadcast over the length axis
// when h is [B, L, C].
template <typename T>
Var film_modulate(Tape<T>& tape, Var h, Var scale, Var shift);

// Multiplies row r of x (viewed as rows x last axis) by coeffs[r].
template <typename T>
Var scale_rows(Tape<T>& tape, Var x, std::vector<T> coeffs);

// out[i] = x[rows[i]] for x [N, D]; gradients scatter-add back.
template <typename T>
Var gather_rows(Tape<T>& tape, Var x, std::vector<std::size_t> rows);

template <typename T>
Var scale(Tape<T>& tape, Var x, double c);

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape);

template <typename T>
Var sum(Tape<T>& tape, Var x);

template <typename T>
Var mean(Tape<T>& tape, Var x);

// mean((a - b)^2) over every element.
template <typename T>
Var mean_squared_error(Tape<T>& tape, Var a, Var b);

// Standard sinusoidal embedding of integer steps: for dim E, frequencies
// 10000^(-2i/E), i < E/2, with the sin half followed by the cos half.
template <typename T>
Tensor<T> sinusoidal_time_embed(std::span<const int> steps, std::size_t dim);

}  // namespace codiff::ops
