#include "codiff/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace codiff::ops {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

void require_same(const std::string& op, const Shape& a, const Shape& b) {
    if (a != b) shape_error(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
    return ConstMatMap<T>(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
    return MatMap<T>(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
T sigmoid(T x) {
    return T{1} / (T{1} + std::exp(-x));
}

}  // namespace

template <typename T>
Var embed_lookup(Tape<T>& tape, Var table, std::span<const std::int32_t> tokens, std::size_t batch,
                 std::size_t length) {
    const Tensor<T>& w = tape.value(table);
    if (w.rank() != 2) shape_error("embed_lookup", "table must be rank 2, got " + shape_str(w.shape));
    if (tokens.size() != batch * length)
        shape_error("embed_lookup", std::to_string(tokens.size()) + " tokens for batch " + std::to_string(batch) +
                                        " x length " + std::to_string(length));
    const std::size_t rows = w.dim(0);
    const std::size_t dim = w.dim(1);
    std::vector<std::int32_t> idx(tokens.begin(), tokens.end());
    for (std::int32_t t : idx)
        if (t < 0 || static_cast<std::size_t>(t) >= rows)
            throw std::out_of_range("embed_lookup: token " + std::to_string(t) + " outside [0, " +
                                    std::to_string(rows - 1) + "]");
    Tensor<T> out(Shape{batch, length, dim});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(w.data.begin() + idx[i] * dim, dim, out.data.begin() + i * dim);
    return tape.record(std::move(out), {table}, [table, idx = std::move(idx), dim](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        Tensor<T>& gw = tp.grad(table);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < dim; ++c) gw[idx[i] * dim + c] += g[i * dim + c];
    });
}

template <typename T>
Var conv1d(Tape<T>& tape, Var x, Var weight, Var bias) {
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& wv = tape.value(weight);
    const Tensor<T>& bv = tape.value(bias);
    if (xv.rank() != 3 || wv.rank() != 3 || bv.rank() != 1 || xv.dim(2) != wv.dim(1) || bv.dim(0) != wv.dim(2))
        shape_error("conv1d", "x " + shape_str(xv.shape) + ", weight " + shape_str(wv.shape) + ", bias " +
                                  shape_str(bv.shape));
    const std::size_t batch = xv.dim(0), len = xv.dim(1), cin = xv.dim(2);
    const std::size_t kernel = wv.dim(0), cout = wv.dim(2);
    const std::ptrdiff_t pad_left = static_cast<std::ptrdiff_t>((kernel - 1) / 2);

    // Output rows [lo, hi) that read input rows shifted by (k - pad_left).
    auto valid_range = [len, pad_left](std::size_t k) {
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - pad_left;
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
        const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(len),
                                                           static_cast<std::ptrdiff_t>(len) - shift);
        return std::array<std::ptrdiff_t, 3>{lo, hi, shift};
    };

    Tensor<T> out(Shape{batch, len, cout});
    for (std::size_t b = 0; b < batch; ++b) {
        auto X = ConstMatMap<T>(xv.data.data() + b * len * cin, len, cin);
        auto Y = MatMap<T>(out.data.data() + b * len * cout, len, cout);
        Y.rowwise() = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.data.data(), cout);
        for (std::size_t k = 0; k < kernel; ++k) {
            const auto [lo, hi, shift] = valid_range(k);
            if (hi <= lo) continue;
            auto W = ConstMatMap<T>(wv.data.data() + k * cin * cout, cin, cout);
            Y.middleRows(lo, hi - lo).noalias() += X.middleRows(lo + shift, hi - lo) * W;
        }
    }
    return tape.record(std::move(out), {x, weight, bias},
                       [x, weight, bias, batch, len, cin, cout, kernel, valid_range](Tape<T>& tp, std::size_t self) {
                           const Tensor<T>& g = tp.grad(Var{self});
                           const Tensor<T>& xv = tp.value(x);
                           const Tensor<T>& wv = tp.value(weight);
                           const bool need_x = tp.requires_grad(x);
                           const bool need_w = tp.requires_grad(weight);
                           const bool need_b = tp.requires_grad(bias);
                           Tensor<T>* gx = need_x ? &tp.grad(x) : nullptr;
                           Tensor<T>* gw = need_w ? &tp.grad(weight) : nullptr;
                           Tensor<T>* gb = need_b ? &tp.grad(bias) : nullptr;
                           for (std::size_t b = 0; b < batch; ++b) {
                               auto G = ConstMatMap<T>(g.data.data() + b * len * cout, len, cout);
                               auto X = ConstMatMap<T>(xv.data.data() + b * len * cin, len, cin);
                               if (gb) {
                                   Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> GB(gb->data.data(), cout);
                                   for (Eigen::Index r = 0; r < G.rows(); ++r) GB += G.row(r);
                               }
                               for (std::size_t k = 0; k < kernel; ++k) {
                                   const auto [lo, hi, shift] = valid_range(k);
                                   if (hi <= lo) continue;
                                   auto W = ConstMatMap<T>(wv.data.data() + k * cin * cout, cin, cout);
                                   if (gx) {
                                       auto GX = MatMap<T>(gx->data.data() + b * len * cin, len, cin);
                                       GX.middleRows(lo + shift, hi - lo).noalias() +=
                                           G.middleRows(lo, hi - lo) * W.transpose();
                                   }
                                   if (gw) {
                                       auto GW = MatMap<T>(gw->data.data() + k * cin * cout, cin, cout);
                                       GW.noalias() +=
                                           X.middleRows(lo + shift, hi - lo).transpose() * G.middleRows(lo, hi - lo);
                                   }
                               }
                           }
                       });
}

template <typename T>
Var glu(Tape<T>& tape, Var x) {
    const Tensor<T>& xv = tape.value(x);
    if (xv.rank() == 0 || xv.cols() % 2 != 0)
        shape_error("glu", "last axis must be even, got " + shape_str(xv.shape));
    const std::size_t rows = xv.rows(), half = xv.cols() / 2, width = xv.cols();
    Shape shape = xv.shape;
    shape.back() = half;
    Tensor<T> out(shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data.data() + r * width;
        T* o = out.data.data() + r * half;
        for (std::size_t c = 0; c < half; ++c) o[c] = in[c] * sigmoid(in[half + c]);
    }
    return tape.record(std::move(out), {x}, [x, rows, half, width](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const Tensor<T>& xv = tp.value(x);
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* in = xv.data.data() + r * width;
            T* gi = gx.data.data() + r * width;
            const T* go = g.data.data() + r * half;
            for (std::size_t c = 0; c < half; ++c) {
                const T s = sigmoid(in[half + c]);
                gi[c] += go[c] * s;
                gi[half + c] += go[c] * in[c] * s * (T{1} - s);
            }
        }
    });
}

template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta, double eps) {
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& gv = tape.value(gamma);
    const Tensor<T>& bv = tape.value(beta);
    if (xv.rank() == 0 || gv.shape != Shape{xv.cols()} || bv.shape != Shape{xv.cols()})
        shape_error("layer_norm", "x " + shape_str(xv.shape) + ", gamma " + shape_str(gv.shape) + ", beta " +
                                      shape_str(bv.shape));
    const std::size_t rows = xv.rows(), n = xv.cols();
    Tensor<T> out(xv.shape);
    Tensor<T> xhat(xv.shape);
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data.data() + r * n;
        double mu = 0.0;
        for (std::size_t c = 0; c < n; ++c) mu += in[c];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) var += (in[c] - mu) * (in[c] - mu);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = static_cast<T>(inv);
        for (std::size_t c = 0; c < n; ++c) {
            const T h = static_cast<T>((in[c] - mu) * inv);
            xhat[r * n + c] = h;
            out[r * n + c] = gv[c] * h + bv[c];
        }
    }
    return tape.record(std::move(out), {x, gamma, beta},
                       [x, gamma, beta, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                           Tape<T>& tp, std::size_t self) {
                           const Tensor<T>& g = tp.grad(Var{self});
                           const Tensor<T>& gv = tp.value(gamma);
                           Tensor<T>* gx = tp.requires_grad(x) ? &tp.grad(x) : nullptr;
                           Tensor<T>* gg = tp.requires_grad(gamma) ? &tp.grad(gamma) : nullptr;
                           Tensor<T>* gb = tp.requires_grad(beta) ? &tp.grad(beta) : nullptr;
                           std::vector<double> dxhat(n);
                           for (std::size_t r = 0; r < rows; ++r) {
                               const T* go = g.data.data() + r * n;
                               const T* h = xhat.data.data() + r * n;
                               double sum_d = 0.0, sum_dh = 0.0;
                               for (std::size_t c = 0; c < n; ++c) {
                                   dxhat[c] = static_cast<double>(go[c]) * gv[c];
                                   sum_d += dxhat[c];
                                   sum_dh += dxhat[c] * h[c];
                                   if (gg) (*gg)[c] += go[c] * h[c];
                                   if (gb) (*gb)[c] += go[c];
                               }
                               if (gx) {
                                   const double scale = inv_std[r] / static_cast<double>(n);
                                   T* gi = gx->data.data() + r * n;
                                   for (std::size_t c = 0; c < n; ++c)
                                       gi[c] += static_cast<T>(scale * (static_cast<double>(n) * dxhat[c] - sum_d -
                                                                        h[c] * sum_dh));
                               }
                           }
                       });
}

template <typename T>
Var dropout(Tape<T>& tape, Var x, double rate, bool train, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
    if (!train || rate == 0.0) return x;
    const Tensor<T>& xv = tape.value(x);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    Tensor<T> mask(xv.shape);
    Tensor<T> out(xv.shape);
    for (std::size_t i = 0; i < xv.size(); ++i) {
        mask[i] = rng.uniform() >= rate ? keep_scale : T{0};
        out[i] = xv[i] * mask[i];
    }
    return tape.record(std::move(out), {x}, [x, mask = std::move(mask)](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    require_same("add", av.shape, bv.shape);
    Tensor<T> out(av.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        for (Var v : {a, b}) {
            if (!tp.requires_grad(v)) continue;
            Tensor<T>& gv = tp.grad(v);
            for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
        }
    });
}

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    require_same("sub", av.shape, bv.shape);
    Tensor<T> out(av.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        if (tp.requires_grad(a)) {
            Tensor<T>& ga = tp.grad(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tp.requires_grad(b)) {
            Tensor<T>& gb = tp.grad(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    require_same("mul", av.shape, bv.shape);
    Tensor<T> out(av.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const Tensor<T>& av = tp.value(a);
        const Tensor<T>& bv = tp.value(b);
        if (tp.requires_grad(a)) {
            Tensor<T>& ga = tp.grad(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (tp.requires_grad(b)) {
            Tensor<T>& gb = tp.grad(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <typename T>
Var global_max_pool(Tape<T>& tape, Var x, std::span<const std::uint8_t> valid) {
    const Tensor<T>& xv = tape.value(x);
    if (xv.rank() != 3 || xv.dim(1) == 0) shape_error("global_max_pool", "expected [B, L>0, C], got " + shape_str(xv.shape));
    const std::size_t batch = xv.dim(0), len = xv.dim(1), ch = xv.dim(2);
    if (!valid.empty() && valid.size() != batch * len)
        shape_error("global_max_pool", "mask of " + std::to_string(valid.size()) + " entries for " + shape_str(xv.shape));
    constexpr std::size_t kNone = static_cast<std::size_t>(-1);
    Tensor<T> out(Shape{batch, ch});
    std::vector<std::size_t> argmax(batch * ch, kNone);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < ch; ++c) {
            std::size_t best = kNone;
            T best_v{0};
            for (std::size_t l = 0; l < len; ++l) {
                if (!valid.empty() && !valid[b * len + l]) continue;
                const T v = xv[(b * len + l) * ch + c];
                if (best == kNone || v > best_v) {
                    best_v = v;
                    best = l;
                }
            }
            if (best == kNone) continue;
            out[b * ch + c] = best_v;
            argmax[b * ch + c] = (b * len + best) * ch + c;
        }
    }
    return tape.record(std::move(out), {x}, [x, argmax = std::move(argmax)](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t i = 0; i < argmax.size(); ++i)
            if (argmax[i] != kNone) gx[argmax[i]] += g[i];
    });
}

template <typename T>
Var global_max_pool(Tape<T>& tape, Var x) {
    return global_max_pool(tape, x, std::span<const std::uint8_t>{});
}

template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& wv = tape.value(weight);
    const Tensor<T>& bv = tape.value(bias);
    if (xv.rank() == 0 || wv.rank() != 2 || xv.cols() != wv.dim(0) || bv.shape != Shape{wv.dim(1)})
        shape_error("linear", "x " + shape_str(xv.shape) + ", weight " + shape_str(wv.shape) + ", bias " +
                                  shape_str(bv.shape));
    const std::size_t rows = xv.rows(), in = wv.dim(0), outw = wv.dim(1);
    Shape shape = xv.shape;
    shape.back() = outw;
    Tensor<T> out(shape);
    auto Y = as_matrix(out, rows, outw);
    Y.noalias() = as_matrix(xv, rows, in) * as_matrix(wv, in, outw);
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.data.data(), outw);
    return tape.record(std::move(out), {x, weight, bias}, [x, weight, bias, rows, in, outw](Tape<T>& tp, std::size_t self) {
        const auto G = as_matrix(tp.grad(Var{self}), rows, outw);
        if (tp.requires_grad(x)) as_matrix(tp.grad(x), rows, in).noalias() += G * as_matrix(tp.value(weight), in, outw).transpose();
        if (tp.requires_grad(weight))
            as_matrix(tp.grad(weight), in, outw).noalias() += as_matrix(tp.value(x), rows, in).transpose() * G;
        if (tp.requires_grad(bias)) {
            // Row-by-row keeps the summation order independent of buffer
            // alignment; colwise().sum() does not.
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> GB(tp.grad(bias).data.data(), outw);
            for (Eigen::Index r = 0; r < G.rows(); ++r) GB += G.row(r);
        }
    });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
    const Tensor<T>& xv = tape.value(x);
    Tensor<T> out(xv.shape);
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
    return tape.record(std::move(out), {x}, [x](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const Tensor<T>& xv = tp.value(x);
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > T{0}) gx[i] += g[i];
    });
}

template <typename T>
Var exp(Tape<T>& tape, Var x) {
    const Tensor<T>& xv = tape.value(x);
    Tensor<T> out(xv.shape);
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::exp(xv[i]);
    Var y = tape.record(std::move(out), {x}, [x](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const Tensor<T>& yv = tp.value(Var{self});
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i];
    });
    return y;
}

template <typename T>
Var clamp(Tape<T>& tape, Var x, double lo, double hi) {
    const Tensor<T>& xv = tape.value(x);
    Tensor<T> out(xv.shape);
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::clamp(xv[i], static_cast<T>(lo), static_cast<T>(hi));
    return tape.record(std::move(out), {x}, [x, lo, hi](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const Tensor<T>& xv = tp.value(x);
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] >= static_cast<T>(lo) && xv[i] <= static_cast<T>(hi)) gx[i] += g[i];
    });
}

template <typename T>
Var concat(Tape<T>& tape, Var a, Var b) {
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    if (av.rank() == 0 || av.rank() != bv.rank() || av.rows() != bv.rows() ||
        !std::equal(av.shape.begin(), av.shape.end() - 1, bv.shape.begin()))
        shape_error("concat", "incompatible shapes " + shape_str(av.shape) + " and " + shape_str(bv.shape));
    const std::size_t rows = av.rows(), p = av.cols(), q = bv.cols();
    Shape shape = av.shape;
    shape.back() = p + q;
    Tensor<T> out(shape);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(av.data.begin() + r * p, p, out.data.begin() + r * (p + q));
        std::copy_n(bv.data.begin() + r * q, q, out.data.begin() + r * (p + q) + p);
    }
    return tape.record(std::move(out), {a, b}, [a, b, rows, p, q](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        if (tp.requires_grad(a)) {
            Tensor<T>& ga = tp.grad(a);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < p; ++c) ga[r * p + c] += g[r * (p + q) + c];
        }
        if (tp.requires_grad(b)) {
            Tensor<T>& gb = tp.grad(b);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < q; ++c) gb[r * q + c] += g[r * (p + q) + p + c];
        }
    });
}

template <typename T>
Var film_modulate(Tape<T>& tape, Var h, Var scale, Var shift) {
    const Tensor<T>& hv = tape.value(h);
    const Tensor<T>& sv = tape.value(scale);
    const Tensor<T>& tv = tape.value(shift);
    if ((hv.rank() != 2 && hv.rank() != 3) || sv.rank() != 2 || sv.shape != tv.shape || sv.dim(0) != hv.dim(0) ||
        sv.dim(1) != hv.cols())
        shape_error("film_modulate", "h " + shape_str(hv.shape) + ", scale " + shape_str(sv.shape) + ", shift " +
                                         shape_str(tv.shape));
    const std::size_t batch = hv.dim(0), ch = hv.cols();
    const std::size_t len = hv.rank() == 3 ? hv.dim(1) : 1;
    Tensor<T> out(hv.shape);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t l = 0; l < len; ++l)
            for (std::size_t c = 0; c < ch; ++c) {
                const std::size_t i = (b * len + l) * ch + c;
                out[i] = sv[b * ch + c] * hv[i] + tv[b * ch + c];
            }
    return tape.record(std::move(out), {h, scale, shift}, [h, scale, shift, batch, len, ch](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const Tensor<T>& hv = tp.value(h);
        const Tensor<T>& sv = tp.value(scale);
        Tensor<T>* gh = tp.requires_grad(h) ? &tp.grad(h) : nullptr;
        Tensor<T>* gs = tp.requires_grad(scale) ? &tp.grad(scale) : nullptr;
        Tensor<T>* gt = tp.requires_grad(shift) ? &tp.grad(shift) : nullptr;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t l = 0; l < len; ++l)
                for (std::size_t c = 0; c < ch; ++c) {
                    const std::size_t i = (b * len + l) * ch + c;
                    if (gh) (*gh)[i] += g[i] * sv[b * ch + c];
                    if (gs) (*gs)[b * ch + c] += g[i] * hv[i];
                    if (gt) (*gt)[b * ch + c] += g[i];
                }
    });
}

template <typename T>
Var scale_rows(Tape<T>& tape, Var x, std::vector<T> coeffs) {
    const Tensor<T>& xv = tape.value(x);
    if (coeffs.size() != xv.rows())
        shape_error("scale_rows", std::to_string(coeffs.size()) + " coefficients for x " + shape_str(xv.shape));
    const std::size_t rows = xv.rows(), cols = xv.cols();
    Tensor<T> out(xv.shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] * coeffs[r];
    return tape.record(std::move(out), {x}, [x, rows, cols, coeffs = std::move(coeffs)](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * coeffs[r];
    });
}

template <typename T>
Var gather_rows(Tape<T>& tape, Var x, std::vector<std::size_t> rows) {
    const Tensor<T>& xv = tape.value(x);
    if (xv.rank() != 2) shape_error("gather_rows", "x must be [N, D], got " + shape_str(xv.shape));
    const std::size_t n = xv.dim(0), cols = xv.dim(1);
    for (std::size_t r : rows)
        if (r >= n) shape_error("gather_rows", "row " + std::to_string(r) + " outside [0, " + std::to_string(n) + ")");
    Tensor<T> out(Shape{rows.size(), cols});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(xv.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * cols), cols,
                    out.data.begin() + static_cast<std::ptrdiff_t>(i * cols));
    return tape.record(std::move(out), {x}, [x, cols, rows = std::move(rows)](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < cols; ++c) gx[rows[i] * cols + c] += g[i * cols + c];
    });
}

template <typename T>
Var scale(Tape<T>& tape, Var x, double c) {
    const Tensor<T>& xv = tape.value(x);
    Tensor<T> out(xv.shape);
    const T k = static_cast<T>(c);
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * k;
    return tape.record(std::move(out), {x}, [x, k](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * k;
    });
}

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
    const Tensor<T>& xv = tape.value(x);
    if (shape_size(shape) != xv.size())
        shape_error("reshape", "cannot view " + shape_str(xv.shape) + " as " + shape_str(shape));
    Tensor<T> out(std::move(shape), xv.data);
    return tape.record(std::move(out), {x}, [x](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
    const Tensor<T>& xv = tape.value(x);
    double s = 0.0;
    for (T v : xv.data) s += v;
    return tape.record(scalar_tensor(static_cast<T>(s)), {x}, [x](Tape<T>& tp, std::size_t self) {
        const T g = tp.grad(Var{self})[0];
        Tensor<T>& gx = tp.grad(x);
        for (auto& v : gx.data) v += g;
    });
}

template <typename T>
Var mean(Tape<T>& tape, Var x) {
    const std::size_t n = tape.value(x).size();
    if (n == 0) shape_error("mean", "empty tensor");
    return scale(tape, sum(tape, x), 1.0 / static_cast<double>(n));
}

template <typename T>
Var mean_squared_error(Tape<T>& tape, Var a, Var b) {
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    require_same("mean_squared_error", av.shape, bv.shape);
    if (av.empty()) shape_error("mean_squared_error", "empty tensors");
    const std::size_t n = av.size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        s += d * d;
    }
    return tape.record(scalar_tensor(static_cast<T>(s / static_cast<double>(n))), {a, b},
                       [a, b, n](Tape<T>& tp, std::size_t self) {
                           const double g = tp.grad(Var{self})[0];
                           const Tensor<T>& av = tp.value(a);
                           const Tensor<T>& bv = tp.value(b);
                           const double k = 2.0 * g / static_cast<double>(n);
                           Tensor<T>* ga = tp.requires_grad(a) ? &tp.grad(a) : nullptr;
                           Tensor<T>* gb = tp.requires_grad(b) ? &tp.grad(b) : nullptr;
                           for (std::size_t i = 0; i < n; ++i) {
                               const T d = static_cast<T>(k * (static_cast<double>(av[i]) - static_cast<double>(bv[i])));
                               if (ga) (*ga)[i] += d;
                               if (gb) (*gb)[i] -= d;
                           }
                       });
}

template <typename T>
Tensor<T> sinusoidal_time_embed(std::span<const int> steps, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_time_embed: dim must be even and positive");
    const std::size_t half = dim / 2;
    Tensor<T> out(Shape{steps.size(), dim});
    for (std::size_t r = 0; r < steps.size(); ++r) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
            const double angle = static_cast<double>(steps[r]) * freq;
            out[r * dim + i] = static_cast<T>(std::sin(angle));
            out[r * dim + half + i] = static_cast<T>(std::cos(angle));
        }
    }
    return out;
}

#define CODIFF_INSTANTIATE_OPS(T)                                                                               \
    template Var embed_lookup<T>(Tape<T>&, Var, std::span<const std::int32_t>, std::size_t, std::size_t);      \
    template Var conv1d<T>(Tape<T>&, Var, Var, Var);                                                            \
    template Var glu<T>(Tape<T>&, Var);                                                                         \
    template Var layer_norm<T>(Tape<T>&, Var, Var, Var, double);                                                \
    template Var dropout<T>(Tape<T>&, Var, double, bool, Rng&);                                                 \
    template Var add<T>(Tape<T>&, Var, Var);                                                                    \
    template Var sub<T>(Tape<T>&, Var, Var);                                                                    \
    template Var mul<T>(Tape<T>&, Var, Var);                                                                    \
    template Var global_max_pool<T>(Tape<T>&, Var);                                                             \
    template Var global_max_pool<T>(Tape<T>&, Var, std::span<const std::uint8_t>);                              \
    template Var linear<T>(Tape<T>&, Var, Var, Var);                                                            \
    template Var relu<T>(Tape<T>&, Var);                                                                        \
    template Var exp<T>(Tape<T>&, Var);                                                                         \
    template Var clamp<T>(Tape<T>&, Var, double, double);                                                       \
    template Var concat<T>(Tape<T>&, Var, Var);                                                                 \
    template Var film_modulate<T>(Tape<T>&, Var, Var, Var);                                                     \
    template Var scale_rows<T>(Tape<T>&, Var, std::vector<T>);                                                  \
    template Var gather_rows<T>(Tape<T>&, Var, std::vector<std::size_t>);                                       \
    template Var scale<T>(Tape<T>&, Var, double);                                                               \
    template Var reshape<T>(Tape<T>&, Var, Shape);                                                              \
    template Var sum<T>(Tape<T>&, Var);                                                                         \
    template Var mean<T>(Tape<T>&, Var);                                                                        \
    template Var mean_squared_error<T>(Tape<T>&, Var, Var);                                                     \
    template Tensor<T> sinusoidal_time_embed<T>(std::span<const int>, std::size_t);

CODIFF_INSTANTIATE_OPS(float)
CODIFF_INSTANTIATE_OPS(double)

#undef CODIFF_INSTANTIATE_OPS

}  // namespace codiff::ops
