#include "codiff/regressor.hpp"

#include <stdexcept>

#include "codiff/ops.hpp"

namespace codiff::regressor {

void RegressorConfig::validate() const {
    if (latent_dim == 0) throw std::invalid_argument("regressor config: latent_dim must be positive");
    if (hidden.empty() || hidden.back() != 1)
        throw std::invalid_argument("regressor config: hidden widths must end with 1");
    for (std::size_t h : hidden)
        if (h == 0) throw std::invalid_argument("regressor config: hidden widths must be positive");
    if (fc_dropout < 0.0 || fc_dropout >= 1.0) throw std::invalid_argument("regressor config: fc_dropout in [0, 1)");
}

nlohmann::json RegressorConfig::to_json() const {
    return {{"latent_dim", latent_dim}, {"hidden", hidden}, {"fc_dropout", fc_dropout}};
}

RegressorConfig RegressorConfig::from_json(const nlohmann::json& j) {
    RegressorConfig c;
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.fc_dropout = j.value("fc_dropout", c.fc_dropout);
    return c;
}

template <typename T>
void init_params(ParamStore<T>& store, const std::string& prefix, const RegressorConfig& cfg, Rng& rng) {
    cfg.validate();
    detail::add_linear(store, prefix + ".proj_drug", cfg.latent_dim, cfg.latent_dim, rng);
    detail::add_linear(store, prefix + ".proj_target", cfg.latent_dim, cfg.latent_dim, rng);
    std::size_t in = 2 * cfg.latent_dim;
    for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
        detail::add_linear(store, prefix + ".fc" + std::to_string(i), in, cfg.hidden[i], rng);
        in = cfg.hidden[i];
    }
}

template <typename T>
void set_output_bias(ParamStore<T>& store, const std::string& prefix, const RegressorConfig& cfg, double value) {
    store.value(prefix + ".fc" + std::to_string(cfg.hidden.size() - 1) + ".bias").fill(static_cast<T>(value));
}

template <typename T>
Var predict_affinity(ForwardContext<T>& ctx, const std::string& prefix, const RegressorConfig& cfg, Var z_drug,
                     Var z_target) {
    auto& tape = ctx.tape;
    const auto& dv = tape.value(z_drug);
    const auto& tv = tape.value(z_target);
    if (dv.rank() != 2 || dv.shape != tv.shape || dv.dim(1) != cfg.latent_dim)
        throw std::invalid_argument("predict_affinity: expected two [B, " + std::to_string(cfg.latent_dim) +
                                    "] latents, got " + shape_str(dv.shape) + " and " + shape_str(tv.shape));
    Var d = ops::linear(tape, z_drug, ctx.param(prefix + ".proj_drug.weight"), ctx.param(prefix + ".proj_drug.bias"));
    Var t = ops::linear(tape, z_target, ctx.param(prefix + ".proj_target.weight"),
                        ctx.param(prefix + ".proj_target.bias"));
    Var h = ops::concat(tape, d, t);
    for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
        const std::string fc = prefix + ".fc" + std::to_string(i);
        h = ops::linear(tape, h, ctx.param(fc + ".weight"), ctx.param(fc + ".bias"));
        if (i + 1 < cfg.hidden.size()) {
            h = ops::relu(tape, h);
            h = ops::dropout(tape, h, cfg.fc_dropout, ctx.train, ctx.rng);
        }
    }
    return h;
}

double coreg_loss(std::span<const double> y, std::span<const double> y_hat, double lambda) {
    if (y.size() != y_hat.size() || y.empty())
        throw std::invalid_argument("coreg_loss: " + std::to_string(y.size()) + " labels vs " +
                                    std::to_string(y_hat.size()) + " predictions");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
    return lambda * s / static_cast<double>(y.size());
}

template <typename T>
Var coreg_loss(Tape<T>& tape, std::span<const double> y, Var y_hat, double lambda) {
    const auto& pv = tape.value(y_hat);
    if (pv.size() != y.size() || y.empty())
        throw std::invalid_argument("coreg_loss: " + std::to_string(y.size()) + " labels vs prediction shape " +
                                    shape_str(pv.shape));
    Tensor<T> labels(pv.shape);
    for (std::size_t i = 0; i < y.size(); ++i) labels[i] = static_cast<T>(y[i]);
    return ops::scale(tape, ops::mean_squared_error(tape, tape.constant(std::move(labels)), y_hat), lambda);
}

#define CODIFF_INSTANTIATE_REGRESSOR(T)                                                                   \
    template void init_params<T>(ParamStore<T>&, const std::string&, const RegressorConfig&, Rng&);       \
    template void set_output_bias<T>(ParamStore<T>&, const std::string&, const RegressorConfig&, double); \
    template Var predict_affinity<T>(ForwardContext<T>&, const std::string&, const RegressorConfig&, Var, \
                                     Var);                                                                \
    template Var coreg_loss<T>(Tape<T>&, std::span<const double>, Var, double);

CODIFF_INSTANTIATE_REGRESSOR(float)
CODIFF_INSTANTIATE_REGRESSOR(double)

#undef CODIFF_INSTANTIATE_REGRESSOR

}  // namespace codiff::regressor
