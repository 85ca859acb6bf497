#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "codiff/context.hpp"
#include "codiff/tensor.hpp"

// Token arrays -> pre-variational features -> Gaussian latents.
namespace codiff::encoder {

struct EncoderConfig {
    std::size_t vocab_size = 0;  // excluding the pad index
    std::size_t embed_dim = 128;
    std::vector<std::size_t> conv_channels = {256, 512, 768};  // post-GLU widths
    std::size_t kernel = 4;
    double conv_dropout = 0.2;
    std::size_t latent_dim = 384;
    double log_sigma_min = -10.0;
    double log_sigma_max = 10.0;
    bool mask_padding = false;  // exclude pad positions from the max-pool

    void validate() const;
    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json& j);
};

// Creates every parameter under `prefix` (e.g. "encoder.drug").
template <typename T>
void init_params(ParamStore<T>& store, const std::string& prefix, const EncoderConfig& cfg, Rng& rng);

// y = x' + dropout(layer_norm(glu(conv1d(x)))), where x' is x or its 1x1
// projection when the width changes. x: [B, L, c_in] -> [B, L, c_out].
template <typename T>
Var gated_conv_block(ForwardContext<T>& ctx, const std::string& prefix, Var x, std::size_t c_in, std::size_t c_out,
                     double dropout);

// tokens: batch * length indices in [0, vocab_size]. Returns h [B, latent_dim].
template <typename T>
Var encode(ForwardContext<T>& ctx, const std::string& prefix, const EncoderConfig& cfg,
           std::span<const std::int32_t> tokens, std::size_t batch);

// Values of one reparameterized draw. log_sigma is already clamped.
template <typename T>
struct VariationalLatent {
    Tensor<T> mu;
    Tensor<T> log_sigma;
    Tensor<T> eps;
    Tensor<T> z0;
};

template <typename T>
struct LatentVars {
    Var mu;
    Var log_sigma;
    Var z0;
    Tensor<T> eps;

    VariationalLatent<T> values(const Tape<T>& tape) const {
        return {tape.value(mu), tape.value(log_sigma), eps, tape.value(z0)};
    }
};

// z0 = mu + exp(log_sigma) * eps with eps ~ N(0, I) drawn from ctx.rng.
template <typename T>
LatentVars<T> sample_latent(ForwardContext<T>& ctx, const std::string& prefix, const EncoderConfig& cfg, Var h);

// Same with a caller-supplied eps (e.g. zeros for the mean latent).
template <typename T>
LatentVars<T> sample_latent(ForwardContext<T>& ctx, const std::string& prefix, const EncoderConfig& cfg, Var h,
                            Tensor<T> eps);

}  // namespace codiff::encoder
