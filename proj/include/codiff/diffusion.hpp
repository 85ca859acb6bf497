#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "codiff/context.hpp"
#include "codiff/tensor.hpp"

// Linear-beta DDPM in latent space.
namespace codiff::diffusion {

// Steps are 1-based: k in [1, T]; arrays are stored 0-based (index k - 1).
struct NoiseSchedule {
    int steps = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> sqrt_alpha_bar;
    std::vector<double> sqrt_one_minus_alpha_bar;

    double beta_at(int k) const { return beta.at(checked(k)); }
    double alpha_bar_at(int k) const { return alpha_bar.at(checked(k)); }
    double sqrt_alpha_bar_at(int k) const { return sqrt_alpha_bar.at(checked(k)); }
    double sqrt_one_minus_alpha_bar_at(int k) const { return sqrt_one_minus_alpha_bar.at(checked(k)); }

    nlohmann::json to_json() const;

private:
    std::size_t checked(int k) const;
};

inline constexpr int kDefaultSteps = 1000;
inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 4e-4;

// beta[k] = beta_start + (k - 1) / (T - 1) * (beta_end - beta_start).
NoiseSchedule build_schedule(int steps = kDefaultSteps, double beta_start = kDefaultBetaStart,
                             double beta_end = kDefaultBetaEnd);

// One k per row, uniform on [1, T].
std::vector<int> sample_steps(std::size_t batch, const NoiseSchedule& schedule, Rng& rng);

template <typename T>
Tensor<T> standard_normal(Shape shape, Rng& rng);

// z_k = sqrt(abar_k) z0 + sqrt(1 - abar_k) eps, row-wise with k[row].
template <typename T>
Tensor<T> forward_noise(const Tensor<T>& z0, std::span<const int> k, const Tensor<T>& eps,
                        const NoiseSchedule& schedule);

// z0_hat = (z_k - sqrt(1 - abar_k) eps_hat) / sqrt(abar_k), row-wise.
template <typename T>
Tensor<T> reconstruct_z0(const Tensor<T>& zk, const Tensor<T>& eps_hat, std::span<const int> k,
                         const NoiseSchedule& schedule);

// Recorded variant; gradients flow into zk and eps_hat.
template <typename T>
Var reconstruct_z0(Tape<T>& tape, Var zk, Var eps_hat, std::span<const int> k, const NoiseSchedule& schedule);

// mean((eps - eps_hat)^2)
template <typename T>
double diffusion_loss(const Tensor<T>& eps, const Tensor<T>& eps_hat);

template <typename T>
Var diffusion_loss(Tape<T>& tape, Var eps, Var eps_hat);

// U-shaped MLP over the flat latent: down latent -> widths..., a bottleneck
// at the last width, then back up with concatenative skips. Every stage is
// FiLM-modulated by a linear map of the sinusoidal embedding of k.
struct DenoiserConfig {
    std::size_t latent_dim = 384;
    std::vector<std::size_t> widths = {192, 96};
    std::size_t time_embed_dim = 128;

    void validate() const;
    nlohmann::json to_json() const;
    static DenoiserConfig from_json(const nlohmann::json& j);
};

template <typename T>
void init_denoiser(ParamStore<T>& store, const std::string& prefix, const DenoiserConfig& cfg, Rng& rng);

// zk [B, latent_dim], one step per row -> eps_hat [B, latent_dim].
template <typename T>
Var denoise_eps(ForwardContext<T>& ctx, const std::string& prefix, const DenoiserConfig& cfg, Var zk,
                std::span<const int> k);

// One modality within a training step.
template <typename T>
struct LatentBatch {
    Tensor<T> z0;
    std::vector<int> k;
    Tensor<T> eps;
    Tensor<T> zk;
    Tensor<T> z0_hat;
};

}  // namespace codiff::diffusion
