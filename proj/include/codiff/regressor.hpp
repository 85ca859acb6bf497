#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "codiff/context.hpp"
#include "codiff/tensor.hpp"

// Affinity heads over a (drug, target) latent pair.
namespace codiff::regressor {

struct RegressorConfig {
    std::size_t latent_dim = 384;                  // per modality
    std::vector<std::size_t> hidden = {512, 64, 1};  // fc widths, last must be 1
    double fc_dropout = 0.1;

    void validate() const;
    nlohmann::json to_json() const;
    static RegressorConfig from_json(const nlohmann::json& j);
};

// Creates `prefix.proj_drug`, `prefix.proj_target` (latent -> latent) and
// `prefix.fc{i}`.
template <typename T>
void init_params(ParamStore<T>& store, const std::string& prefix, const RegressorConfig& cfg, Rng& rng);

// Sets the output bias so an untrained head predicts `value` offsets from zero.
template <typename T>
void set_output_bias(ParamStore<T>& store, const std::string& prefix, const RegressorConfig& cfg, double value);

// z_drug, z_target [B, latent_dim] -> [B, 1]. Relu and dropout sit between
// hidden layers; the last layer is linear.
template <typename T>
Var predict_affinity(ForwardContext<T>& ctx, const std::string& prefix, const RegressorConfig& cfg, Var z_drug,
                     Var z_target);

// lambda * mean((y - y_hat)^2)
double coreg_loss(std::span<const double> y, std::span<const double> y_hat, double lambda);

// y_hat [B, 1] or [B]; y holds B labels.
template <typename T>
Var coreg_loss(Tape<T>& tape, std::span<const double> y, Var y_hat, double lambda);

}  // namespace codiff::regressor
