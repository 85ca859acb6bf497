#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "codiff/data.hpp"
#include "codiff/diffusion.hpp"
#include "codiff/encoder.hpp"
#include "codiff/metrics.hpp"
#include "codiff/params.hpp"
#include "codiff/regressor.hpp"

// Two-stage training: Stage I fits the encoders and the var head on affinity
// alone; Stage II freezes the encoders and fits both denoisers plus the diff
// head.
namespace codiff::training {

inline const std::string kDrugEncoder = "encoder.drug";
inline const std::string kTargetEncoder = "encoder.target";
inline const std::string kDrugDenoiser = "diffusion.drug";
inline const std::string kTargetDenoiser = "diffusion.target";
inline const std::string kVarHead = "regressor.var";
inline const std::string kDiffHead = "regressor.diff";

struct ModelConfig {
    encoder::EncoderConfig drug_encoder;
    encoder::EncoderConfig target_encoder;
    diffusion::DenoiserConfig denoiser;
    regressor::RegressorConfig regressor;
    bool tie_heads = false;  // diff head reuses the var head's parameters

    // "full": the reference widths. "compact": a small network for desk-scale
    // runs. Vocabulary sizes exclude the pad index.
    static ModelConfig preset(const std::string& name, std::size_t drug_vocab, std::size_t target_vocab);

    std::size_t latent_dim() const { return drug_encoder.latent_dim; }
    const std::string& diff_head() const { return tie_heads ? kVarHead : kDiffHead; }

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

struct Model {
    ModelConfig config;
    diffusion::NoiseSchedule schedule;
    ParamStore<float> params;

    // Every parameter is drawn from Rng(seed) in a fixed order.
    Model(ModelConfig cfg, diffusion::NoiseSchedule sched, std::uint64_t seed);
};

// Tokenized pairs with drugs and targets deduplicated into tables, so frozen
// encoders can run once per entity.
struct EncodedDataset {
    std::size_t drug_len = 0;
    std::size_t target_len = 0;
    std::vector<std::int32_t> drug_table;    // drug_count * drug_len
    std::vector<std::int32_t> target_table;  // target_count * target_len
    std::vector<std::size_t> drug_of;        // per pair
    std::vector<std::size_t> target_of;      // per pair
    std::vector<double> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t drug_count() const { return drug_len ? drug_table.size() / drug_len : 0; }
    std::size_t target_count() const { return target_len ? target_table.size() / target_len : 0; }
    bool empty() const { return labels.empty(); }

    static EncodedDataset from_pairs(const std::vector<data::TokenizedPair>& pairs, std::size_t drug_len,
                                     std::size_t target_len);
    EncodedDataset subset(std::span<const std::size_t> indices) const;

    // Flattened token rows for the given pairs.
    std::vector<std::int32_t> drug_tokens(std::span<const std::size_t> pairs) const;
    std::vector<std::int32_t> target_tokens(std::span<const std::size_t> pairs) const;
};

enum class StageSelection { one, two, both };
std::string to_string(StageSelection s);
StageSelection stage_selection_from_string(const std::string& name);

inline constexpr int kRunConfigSchema = 1;

struct RunConfig {
    int schema_version = kRunConfigSchema;
    int epochs = 100;
    std::size_t batch_size = 256;
    double lr = 1e-3;
    double lambda = 1.0;
    double kl_weight = 0.0;
    int patience = 20;
    std::uint64_t seed = 0;
    StageSelection stage = StageSelection::both;
    int diffusion_steps = diffusion::kDefaultSteps;
    double beta_start = diffusion::kDefaultBetaStart;
    double beta_end = diffusion::kDefaultBetaEnd;
    int k_star = 0;  // 0 means T / 2
    int mc_samples = 1;
    std::string model_preset = "full";
    nlohmann::json model_overrides = nlohmann::json::object();
    bool init_output_bias = true;  // start each head's output bias at the mean label
    std::string dataset_dir;
    std::string split_path;
    std::string checkpoint_dir;

    void validate() const;
    int inference_step() const { return k_star > 0 ? k_star : diffusion_steps / 2; }
    diffusion::NoiseSchedule schedule() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

struct LossComponents {
    double coreg = 0.0;
    double kl = 0.0;
    double drug_diff = 0.0;
    double target_diff = 0.0;
    double total = 0.0;
};

struct EpochLog {
    int stage = 1;
    int epoch = 0;  // 1-based within the stage
    std::size_t batches = 0;
    LossComponents train;
    // Per setting; absent when the setting has no validation pairs, and a
    // metric is null when it is undefined for the data (e.g. tied labels).
    std::vector<std::pair<std::string, nlohmann::json>> validation;
    std::optional<double> selection_mse;  // mean validation MSE over settings

    nlohmann::json to_json() const;
};

// Replaces the denoiser's output in tests: receives the modality ("drug" or
// "target"), z_k, the per-row steps and the true noise, returns eps_hat.
using DenoiserOverride = std::function<Tensor<float>(const std::string& modality, const Tensor<float>& zk,
                                                     std::span<const int> k, const Tensor<float>& eps)>;

struct EpochOptions {
    std::size_t batch_size = 256;
    AdamOptions adam;
    double lambda = 1.0;
    double kl_weight = 0.0;
    DenoiserOverride denoiser_override;
};

std::vector<std::string> stage_one_trainable(const ModelConfig& cfg);
std::vector<std::string> stage_two_trainable(const ModelConfig& cfg);

// One pass over `train` in a seeded random order.
EpochLog stage_one_epoch(Model& model, const EncodedDataset& train, const EpochOptions& opt, Rng& rng);

// Posterior means and log-sigmas of each unique entity under frozen encoders.
struct LatentCache {
    Tensor<float> drug_mu;
    Tensor<float> drug_log_sigma;
    Tensor<float> target_mu;
    Tensor<float> target_log_sigma;
};

LatentCache encode_entities(Model& model, const EncodedDataset& data, std::size_t batch_size = 256);

// Posterior means for one modality's token table [n * len].
Tensor<float> encode_means(Model& model, const std::string& modality, std::span<const std::int32_t> table,
                           std::size_t len, std::size_t batch_size = 256);

EpochLog stage_two_epoch(Model& model, const EncodedDataset& train, const LatentCache& cache,
                         const EpochOptions& opt, Rng& rng);

enum class PredictMode { var, diff };
std::string to_string(PredictMode m);
PredictMode predict_mode_from_string(const std::string& name);

struct PredictOptions {
    PredictMode mode = PredictMode::var;
    std::uint64_t seed = 0;
    int k_star = 0;  // 0 means T / 2
    int mc_samples = 1;
    std::size_t batch_size = 256;
    DenoiserOverride denoiser_override;
};

// Eval-mode predictions. In diff mode pair i uses its own noise stream derived
// from (seed, i), so the noise does not depend on batching.
std::vector<double> predict(Model& model, const EncodedDataset& data, const PredictOptions& opt);

// Validation metrics for one setting, with null for undefined metrics.
nlohmann::json validation_metrics(std::span<const double> y, std::span<const double> y_hat,
                                  const std::string& setting);

struct ValidationSet {
    std::string setting;
    EncodedDataset data;
};

using EpochCallback = std::function<void(const EpochLog&)>;

struct StageResult {
    std::vector<EpochLog> logs;
    int best_epoch = 0;  // 0 when no validation data drove selection
    std::optional<double> best_selection_mse;
};

// Full stage with early stopping on the mean validation MSE. The best
// parameters are restored at the end. Optimizer state is reset first.
StageResult train_stage_one(Model& model, const EncodedDataset& train, const std::vector<ValidationSet>& validation,
                            const RunConfig& run, Rng& rng, const EpochCallback& on_epoch = {});

StageResult train_stage_two(Model& model, const EncodedDataset& train, const std::vector<ValidationSet>& validation,
                            const RunConfig& run, Rng& rng, const EpochCallback& on_epoch = {},
                            const DenoiserOverride& denoiser_override = {});

// Checkpoint helpers. Stage-two files carry meta.stage = 2 and the schedule.
void save_checkpoint(const Model& model, int stage, const std::filesystem::path& path);
// Returns the stage recorded in the file.
int load_checkpoint(Model& model, const std::filesystem::path& path);

}  // namespace codiff::training
