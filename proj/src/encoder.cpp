#include "codiff/encoder.hpp"

#include <cmath>
#include <stdexcept>

#include "codiff/ops.hpp"

namespace codiff::encoder {

void EncoderConfig::validate() const {
    if (vocab_size == 0) throw std::invalid_argument("encoder config: vocab_size must be positive");
    if (embed_dim == 0) throw std::invalid_argument("encoder config: embed_dim must be positive");
    if (conv_channels.empty()) throw std::invalid_argument("encoder config: conv_channels must not be empty");
    for (std::size_t c : conv_channels)
        if (c == 0 || c % 2 != 0)
            throw std::invalid_argument("encoder config: conv channel counts must be positive and even");
    if (kernel == 0) throw std::invalid_argument("encoder config: kernel must be positive");
    if (conv_dropout < 0.0 || conv_dropout >= 1.0) throw std::invalid_argument("encoder config: conv_dropout in [0, 1)");
    if (latent_dim == 0) throw std::invalid_argument("encoder config: latent_dim must be positive");
    if (!(log_sigma_min < log_sigma_max)) throw std::invalid_argument("encoder config: empty log_sigma clamp range");
}

nlohmann::json EncoderConfig::to_json() const {
    return {{"vocab_size", vocab_size},     {"embed_dim", embed_dim},   {"conv_channels", conv_channels},
            {"kernel", kernel},             {"conv_dropout", conv_dropout}, {"latent_dim", latent_dim},
            {"log_sigma_min", log_sigma_min}, {"log_sigma_max", log_sigma_max},
            {"mask_padding", mask_padding}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.conv_channels = j.value("conv_channels", c.conv_channels);
    c.kernel = j.value("kernel", c.kernel);
    c.conv_dropout = j.value("conv_dropout", c.conv_dropout);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.log_sigma_min = j.value("log_sigma_min", c.log_sigma_min);
    c.log_sigma_max = j.value("log_sigma_max", c.log_sigma_max);
    c.mask_padding = j.value("mask_padding", c.mask_padding);
    return c;
}

template <typename T>
void init_params(ParamStore<T>& store, const std::string& prefix, const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    store.add(prefix + ".embed", normal_init<T>(Shape{cfg.vocab_size + 1, cfg.embed_dim}, 1.0, rng));
    std::size_t c_in = cfg.embed_dim;
    for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
        const std::size_t c_out = cfg.conv_channels[i];
        const std::string block = prefix + ".block" + std::to_string(i);
        const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.kernel * c_in));
        store.add(block + ".conv.weight", uniform_init<T>(Shape{cfg.kernel, c_in, 2 * c_out}, bound, rng));
        store.add(block + ".conv.bias", uniform_init<T>(Shape{2 * c_out}, bound, rng));
        store.add(block + ".norm.gamma", Tensor<T>(Shape{c_out}, T{1}));
        store.add(block + ".norm.beta", Tensor<T>(Shape{c_out}, T{0}));
        if (c_in != c_out) detail::add_linear(store, block + ".proj", c_in, c_out, rng);
        c_in = c_out;
    }
    detail::add_linear(store, prefix + ".out", c_in, cfg.latent_dim, rng);
    detail::add_linear(store, prefix + ".mu", cfg.latent_dim, cfg.latent_dim, rng);
    detail::add_linear(store, prefix + ".log_sigma", cfg.latent_dim, cfg.latent_dim, rng);
}

template <typename T>
Var gated_conv_block(ForwardContext<T>& ctx, const std::string& prefix, Var x, std::size_t c_in, std::size_t c_out,
                     double dropout) {
    auto& tape = ctx.tape;
    const Tensor<T>& xv = tape.value(x);
    if (xv.rank() != 3 || xv.dim(2) != c_in)
        throw std::invalid_argument("gated_conv_block: expected [B, L, " + std::to_string(c_in) + "], got " +
                                    shape_str(xv.shape));
    Var h = ops::conv1d(tape, x, ctx.param(prefix + ".conv.weight"), ctx.param(prefix + ".conv.bias"));
    h = ops::glu(tape, h);
    h = ops::layer_norm(tape, h, ctx.param(prefix + ".norm.gamma"), ctx.param(prefix + ".norm.beta"));
    h = ops::dropout(tape, h, dropout, ctx.train, ctx.rng);
    Var residual = x;
    if (c_in != c_out) residual = ops::linear(tape, x, ctx.param(prefix + ".proj.weight"), ctx.param(prefix + ".proj.bias"));
    return ops::add(tape, residual, h);
}

template <typename T>
Var encode(ForwardContext<T>& ctx, const std::string& prefix, const EncoderConfig& cfg,
           std::span<const std::int32_t> tokens, std::size_t batch) {
    if (batch == 0 || tokens.size() % batch != 0)
        throw std::invalid_argument("encode: " + std::to_string(tokens.size()) + " tokens do not split into " +
                                    std::to_string(batch) + " rows");
    const std::size_t length = tokens.size() / batch;
    for (std::int32_t t : tokens)
        if (t < 0 || static_cast<std::size_t>(t) > cfg.vocab_size)
            throw std::out_of_range("encode: token " + std::to_string(t) + " outside [0, " +
                                    std::to_string(cfg.vocab_size) + "]");
    Var x = ops::embed_lookup(ctx.tape, ctx.param(prefix + ".embed"), tokens, batch, length);
    std::size_t c_in = cfg.embed_dim;
    for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
        x = gated_conv_block(ctx, prefix + ".block" + std::to_string(i), x, c_in, cfg.conv_channels[i], cfg.conv_dropout);
        c_in = cfg.conv_channels[i];
    }
    std::vector<std::uint8_t> valid;
    if (cfg.mask_padding) {
        valid.resize(tokens.size());
        for (std::size_t i = 0; i < tokens.size(); ++i) valid[i] = tokens[i] != 0;
    }
    Var pooled = ops::global_max_pool(ctx.tape, x, std::span<const std::uint8_t>(valid));
    return ops::linear(ctx.tape, pooled, ctx.param(prefix + ".out.weight"), ctx.param(prefix + ".out.bias"));
}

template <typename T>
LatentVars<T> sample_latent(ForwardContext<T>& ctx, const std::string& prefix, const EncoderConfig& cfg, Var h,
                            Tensor<T> eps) {
    auto& tape = ctx.tape;
    Var mu = ops::linear(tape, h, ctx.param(prefix + ".mu.weight"), ctx.param(prefix + ".mu.bias"));
    Var log_sigma = ops::linear(tape, h, ctx.param(prefix + ".log_sigma.weight"), ctx.param(prefix + ".log_sigma.bias"));
    log_sigma = ops::clamp(tape, log_sigma, cfg.log_sigma_min, cfg.log_sigma_max);
    if (eps.shape != tape.value(mu).shape)
        throw std::invalid_argument("sample_latent: eps shape " + shape_str(eps.shape) + " vs mu " +
                                    shape_str(tape.value(mu).shape));
    Var noise = tape.constant(eps);
    Var z0 = ops::add(tape, mu, ops::mul(tape, ops::exp(tape, log_sigma), noise));
    return {mu, log_sigma, z0, std::move(eps)};
}

template <typename T>
LatentVars<T> sample_latent(ForwardContext<T>& ctx, const std::string& prefix, const EncoderConfig& cfg, Var h) {
    const Tensor<T>& hv = ctx.tape.value(h);
    if (hv.rank() != 2) throw std::invalid_argument("sample_latent: h must be [B, D], got " + shape_str(hv.shape));
    Tensor<T> eps(Shape{hv.dim(0), cfg.latent_dim});
    for (auto& v : eps.data) v = static_cast<T>(ctx.rng.normal());
    return sample_latent(ctx, prefix, cfg, h, std::move(eps));
}

#define CODIFF_INSTANTIATE_ENCODER(T)                                                                            \
    template void init_params<T>(ParamStore<T>&, const std::string&, const EncoderConfig&, Rng&);                \
    template Var gated_conv_block<T>(ForwardContext<T>&, const std::string&, Var, std::size_t, std::size_t,      \
                                     double);                                                                    \
    template Var encode<T>(ForwardContext<T>&, const std::string&, const EncoderConfig&,                         \
                           std::span<const std::int32_t>, std::size_t);                                          \
    template LatentVars<T> sample_latent<T>(ForwardContext<T>&, const std::string&, const EncoderConfig&, Var);  \
    template LatentVars<T> sample_latent<T>(ForwardContext<T>&, const std::string&, const EncoderConfig&, Var,   \
                                            Tensor<T>);

CODIFF_INSTANTIATE_ENCODER(float)
CODIFF_INSTANTIATE_ENCODER(double)

#undef CODIFF_INSTANTIATE_ENCODER

}  // namespace codiff::encoder
