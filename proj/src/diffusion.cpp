#include "codiff/diffusion.hpp"

#include <cmath>
#include <stdexcept>

#include "codiff/ops.hpp"

namespace codiff::diffusion {

std::size_t NoiseSchedule::checked(int k) const {
    if (k < 1 || k > steps)
        throw std::out_of_range("diffusion step " + std::to_string(k) + " outside [1, " + std::to_string(steps) + "]");
    return static_cast<std::size_t>(k - 1);
}

nlohmann::json NoiseSchedule::to_json() const {
    return {{"steps", steps}, {"beta_start", beta_start}, {"beta_end", beta_end}};
}

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw std::invalid_argument("build_schedule: T must be at least 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("build_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.steps = steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    const auto n = static_cast<std::size_t>(steps);
    s.beta.resize(n);
    s.alpha.resize(n);
    s.alpha_bar.resize(n);
    s.sqrt_alpha_bar.resize(n);
    s.sqrt_one_minus_alpha_bar.resize(n);
    double running = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
        s.beta[i] = beta_start + frac * (beta_end - beta_start);
        s.alpha[i] = 1.0 - s.beta[i];
        running *= s.alpha[i];
        s.alpha_bar[i] = running;
        s.sqrt_alpha_bar[i] = std::sqrt(running);
        s.sqrt_one_minus_alpha_bar[i] = std::sqrt(1.0 - running);
    }
    return s;
}

std::vector<int> sample_steps(std::size_t batch, const NoiseSchedule& schedule, Rng& rng) {
    std::vector<int> k(batch);
    for (auto& v : k) v = static_cast<int>(rng.integer(1, schedule.steps));
    return k;
}

template <typename T>
Tensor<T> standard_normal(Shape shape, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.normal());
    return t;
}

namespace {

template <typename T>
void check_rows(const char* op, const Tensor<T>& a, const Tensor<T>& b, std::span<const int> k) {
    if (a.shape != b.shape || a.rank() != 2 || k.size() != a.dim(0))
        throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a.shape) + " / " + shape_str(b.shape) +
                                    " with " + std::to_string(k.size()) + " steps");
}

}  // namespace

template <typename T>
Tensor<T> forward_noise(const Tensor<T>& z0, std::span<const int> k, const Tensor<T>& eps,
                        const NoiseSchedule& schedule) {
    check_rows("forward_noise", z0, eps, k);
    Tensor<T> zk(z0.shape);
    const std::size_t cols = z0.cols();
    for (std::size_t r = 0; r < z0.rows(); ++r) {
        const double a = schedule.sqrt_alpha_bar_at(k[r]);
        const double b = schedule.sqrt_one_minus_alpha_bar_at(k[r]);
        for (std::size_t c = 0; c < cols; ++c)
            zk[r * cols + c] = static_cast<T>(a * z0[r * cols + c] + b * eps[r * cols + c]);
    }
    return zk;
}

template <typename T>
Tensor<T> reconstruct_z0(const Tensor<T>& zk, const Tensor<T>& eps_hat, std::span<const int> k,
                         const NoiseSchedule& schedule) {
    check_rows("reconstruct_z0", zk, eps_hat, k);
    Tensor<T> z0(zk.shape);
    const std::size_t cols = zk.cols();
    for (std::size_t r = 0; r < zk.rows(); ++r) {
        const double a = schedule.sqrt_alpha_bar_at(k[r]);
        const double b = schedule.sqrt_one_minus_alpha_bar_at(k[r]);
        for (std::size_t c = 0; c < cols; ++c)
            z0[r * cols + c] = static_cast<T>((zk[r * cols + c] - b * eps_hat[r * cols + c]) / a);
    }
    return z0;
}

template <typename T>
Var reconstruct_z0(Tape<T>& tape, Var zk, Var eps_hat, std::span<const int> k, const NoiseSchedule& schedule) {
    check_rows("reconstruct_z0", tape.value(zk), tape.value(eps_hat), k);
    std::vector<T> inv_a(k.size()), ratio(k.size());
    for (std::size_t r = 0; r < k.size(); ++r) {
        const double a = schedule.sqrt_alpha_bar_at(k[r]);
        inv_a[r] = static_cast<T>(1.0 / a);
        ratio[r] = static_cast<T>(schedule.sqrt_one_minus_alpha_bar_at(k[r]) / a);
    }
    return ops::sub(tape, ops::scale_rows(tape, zk, std::move(inv_a)), ops::scale_rows(tape, eps_hat, std::move(ratio)));
}

template <typename T>
double diffusion_loss(const Tensor<T>& eps, const Tensor<T>& eps_hat) {
    if (eps.shape != eps_hat.shape || eps.empty())
        throw std::invalid_argument("diffusion_loss: shapes " + shape_str(eps.shape) + " / " + shape_str(eps_hat.shape));
    double s = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double d = static_cast<double>(eps[i]) - static_cast<double>(eps_hat[i]);
        s += d * d;
    }
    return s / static_cast<double>(eps.size());
}

template <typename T>
Var diffusion_loss(Tape<T>& tape, Var eps, Var eps_hat) {
    return ops::mean_squared_error(tape, eps, eps_hat);
}

void DenoiserConfig::validate() const {
    if (latent_dim == 0) throw std::invalid_argument("denoiser config: latent_dim must be positive");
    if (widths.empty()) throw std::invalid_argument("denoiser config: widths must not be empty");
    for (std::size_t w : widths)
        if (w == 0) throw std::invalid_argument("denoiser config: widths must be positive");
    if (time_embed_dim == 0 || time_embed_dim % 2 != 0)
        throw std::invalid_argument("denoiser config: time_embed_dim must be positive and even");
}

nlohmann::json DenoiserConfig::to_json() const {
    return {{"latent_dim", latent_dim}, {"widths", widths}, {"time_embed_dim", time_embed_dim}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.widths = j.value("widths", c.widths);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    return c;
}

namespace {

// Stage names and (input, output) widths in forward order.
struct Stage {
    std::string name;
    std::size_t in;
    std::size_t out;
};

std::vector<Stage> denoiser_stages(const DenoiserConfig& cfg) {
    std::vector<Stage> stages;
    std::vector<std::size_t> dims = {cfg.latent_dim};
    dims.insert(dims.end(), cfg.widths.begin(), cfg.widths.end());
    for (std::size_t i = 0; i < cfg.widths.size(); ++i)
        stages.push_back({"down" + std::to_string(i), dims[i], dims[i + 1]});
    stages.push_back({"mid", dims.back(), dims.back()});
    // up{i} consumes concat(previous, skip from down{i}) and restores dims[i].
    for (std::size_t i = cfg.widths.size(); i-- > 0;)
        stages.push_back({"up" + std::to_string(i), 2 * dims[i + 1], dims[i]});
    return stages;
}

}  // namespace

template <typename T>
void init_denoiser(ParamStore<T>& store, const std::string& prefix, const DenoiserConfig& cfg, Rng& rng) {
    cfg.validate();
    for (const auto& st : denoiser_stages(cfg)) {
        const std::string base = prefix + "." + st.name;
        detail::add_linear(store, base, st.in, st.out, rng);
        // Scale starts near 1 and shift near 0 so each stage begins close to
        // an unmodulated layer.
        const double bound = 0.1 / std::sqrt(static_cast<double>(cfg.time_embed_dim));
        store.add(base + ".film_scale.weight", uniform_init<T>(Shape{cfg.time_embed_dim, st.out}, bound, rng));
        store.add(base + ".film_scale.bias", Tensor<T>(Shape{st.out}, T{1}));
        store.add(base + ".film_shift.weight", uniform_init<T>(Shape{cfg.time_embed_dim, st.out}, bound, rng));
        store.add(base + ".film_shift.bias", Tensor<T>(Shape{st.out}, T{0}));
    }
}

template <typename T>
Var denoise_eps(ForwardContext<T>& ctx, const std::string& prefix, const DenoiserConfig& cfg, Var zk,
                std::span<const int> k) {
    auto& tape = ctx.tape;
    const Tensor<T>& zv = tape.value(zk);
    if (zv.rank() != 2 || zv.dim(1) != cfg.latent_dim || k.size() != zv.dim(0))
        throw std::invalid_argument("denoise_eps: expected [B, " + std::to_string(cfg.latent_dim) + "] with B steps, got " +
                                    shape_str(zv.shape) + " and " + std::to_string(k.size()) + " steps");
    Var temb = tape.constant(ops::sinusoidal_time_embed<T>(k, cfg.time_embed_dim));

    auto stage = [&](const std::string& name, Var x, bool activate) {
        const std::string base = prefix + "." + name;
        Var h = ops::linear(tape, x, ctx.param(base + ".weight"), ctx.param(base + ".bias"));
        Var s = ops::linear(tape, temb, ctx.param(base + ".film_scale.weight"), ctx.param(base + ".film_scale.bias"));
        Var t = ops::linear(tape, temb, ctx.param(base + ".film_shift.weight"), ctx.param(base + ".film_shift.bias"));
        h = ops::film_modulate(tape, h, s, t);
        return activate ? ops::relu(tape, h) : h;
    };

    std::vector<Var> skips;
    Var h = zk;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
        h = stage("down" + std::to_string(i), h, true);
        skips.push_back(h);
    }
    h = stage("mid", h, true);
    for (std::size_t i = cfg.widths.size(); i-- > 0;) {
        h = ops::concat(tape, h, skips[i]);
        h = stage("up" + std::to_string(i), h, i != 0);
    }
    return h;
}

#define CODIFF_INSTANTIATE_DIFFUSION(T)                                                                           \
    template Tensor<T> standard_normal<T>(Shape, Rng&);                                                           \
    template Tensor<T> forward_noise<T>(const Tensor<T>&, std::span<const int>, const Tensor<T>&,                 \
                                        const NoiseSchedule&);                                                    \
    template Tensor<T> reconstruct_z0<T>(const Tensor<T>&, const Tensor<T>&, std::span<const int>,                \
                                         const NoiseSchedule&);                                                   \
    template Var reconstruct_z0<T>(Tape<T>&, Var, Var, std::span<const int>, const NoiseSchedule&);               \
    template double diffusion_loss<T>(const Tensor<T>&, const Tensor<T>&);                                        \
    template Var diffusion_loss<T>(Tape<T>&, Var, Var);                                                           \
    template void init_denoiser<T>(ParamStore<T>&, const std::string&, const DenoiserConfig&, Rng&);              \
    template Var denoise_eps<T>(ForwardContext<T>&, const std::string&, const DenoiserConfig&, Var,               \
                                std::span<const int>);

CODIFF_INSTANTIATE_DIFFUSION(float)
CODIFF_INSTANTIATE_DIFFUSION(double)

#undef CODIFF_INSTANTIATE_DIFFUSION

}  // namespace codiff::diffusion
