#include "codiff/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "codiff/checkpoint.hpp"
#include "codiff/ops.hpp"

namespace codiff::training {

namespace {

constexpr std::uint64_t kPairStreamStride = 0x9E3779B97F4A7C15ULL;

}  // namespace

ModelConfig ModelConfig::preset(const std::string& name, std::size_t drug_vocab, std::size_t target_vocab) {
    ModelConfig c;
    if (name == "compact") {
        for (auto* e : {&c.drug_encoder, &c.target_encoder}) {
            e->embed_dim = 16;
            e->conv_channels = {16, 32, 32};
            e->latent_dim = 32;
        }
        c.denoiser = {32, {16, 8}, 16};
        c.regressor = {32, {64, 16, 1}, 0.1};
    } else if (name != "full") {
        throw std::invalid_argument("unknown model preset '" + name + "' (expected full or compact)");
    }
    c.drug_encoder.vocab_size = drug_vocab;
    c.target_encoder.vocab_size = target_vocab;
    return c;
}

void ModelConfig::validate() const {
    drug_encoder.validate();
    target_encoder.validate();
    denoiser.validate();
    regressor.validate();
    const std::size_t d = drug_encoder.latent_dim;
    if (target_encoder.latent_dim != d || denoiser.latent_dim != d || regressor.latent_dim != d)
        throw std::invalid_argument("model config: encoder, denoiser and regressor latent sizes must agree");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"drug_encoder", drug_encoder.to_json()},
            {"target_encoder", target_encoder.to_json()},
            {"denoiser", denoiser.to_json()},
            {"regressor", regressor.to_json()},
            {"tie_heads", tie_heads}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.drug_encoder = encoder::EncoderConfig::from_json(j.value("drug_encoder", nlohmann::json::object()));
    c.target_encoder = encoder::EncoderConfig::from_json(j.value("target_encoder", nlohmann::json::object()));
    c.denoiser = diffusion::DenoiserConfig::from_json(j.value("denoiser", nlohmann::json::object()));
    c.regressor = regressor::RegressorConfig::from_json(j.value("regressor", nlohmann::json::object()));
    c.tie_heads = j.value("tie_heads", false);
    return c;
}

Model::Model(ModelConfig cfg, diffusion::NoiseSchedule sched, std::uint64_t seed)
    : config(std::move(cfg)), schedule(std::move(sched)) {
    config.validate();
    Rng rng(seed);
    encoder::init_params(params, kDrugEncoder, config.drug_encoder, rng);
    encoder::init_params(params, kTargetEncoder, config.target_encoder, rng);
    diffusion::init_denoiser(params, kDrugDenoiser, config.denoiser, rng);
    diffusion::init_denoiser(params, kTargetDenoiser, config.denoiser, rng);
    regressor::init_params(params, kVarHead, config.regressor, rng);
    if (!config.tie_heads) regressor::init_params(params, kDiffHead, config.regressor, rng);
}

EncodedDataset EncodedDataset::from_pairs(const std::vector<data::TokenizedPair>& pairs, std::size_t drug_len,
                                          std::size_t target_len) {
    EncodedDataset d;
    d.drug_len = drug_len;
    d.target_len = target_len;
    std::map<std::vector<std::int32_t>, std::size_t> drugs, targets;
    auto intern = [](std::map<std::vector<std::int32_t>, std::size_t>& seen, std::vector<std::int32_t>& table,
                     const std::vector<std::int32_t>& row, std::size_t len) {
        if (row.size() != len)
            throw std::invalid_argument("encoded dataset: token row of length " + std::to_string(row.size()) +
                                        ", expected " + std::to_string(len));
        auto [it, inserted] = seen.emplace(row, seen.size());
        if (inserted) table.insert(table.end(), row.begin(), row.end());
        return it->second;
    };
    for (const auto& p : pairs) {
        d.drug_of.push_back(intern(drugs, d.drug_table, p.drug_tokens, drug_len));
        d.target_of.push_back(intern(targets, d.target_table, p.target_tokens, target_len));
        d.labels.push_back(p.label);
    }
    return d;
}

EncodedDataset EncodedDataset::subset(std::span<const std::size_t> indices) const {
    EncodedDataset d;
    d.drug_len = drug_len;
    d.target_len = target_len;
    d.drug_table = drug_table;
    d.target_table = target_table;
    for (std::size_t i : indices) {
        if (i >= size()) throw std::out_of_range("encoded dataset: subset index " + std::to_string(i) + " out of range");
        d.drug_of.push_back(drug_of[i]);
        d.target_of.push_back(target_of[i]);
        d.labels.push_back(labels[i]);
    }
    return d;
}

namespace {

std::vector<std::int32_t> gather_rows(const std::vector<std::int32_t>& table, std::size_t len,
                                      const std::vector<std::size_t>& entity_of, std::span<const std::size_t> pairs) {
    std::vector<std::int32_t> out;
    out.reserve(pairs.size() * len);
    for (std::size_t p : pairs) {
        const auto begin = table.begin() + static_cast<std::ptrdiff_t>(entity_of.at(p) * len);
        out.insert(out.end(), begin, begin + static_cast<std::ptrdiff_t>(len));
    }
    return out;
}

}  // namespace

std::vector<std::int32_t> EncodedDataset::drug_tokens(std::span<const std::size_t> pairs) const {
    return gather_rows(drug_table, drug_len, drug_of, pairs);
}

std::vector<std::int32_t> EncodedDataset::target_tokens(std::span<const std::size_t> pairs) const {
    return gather_rows(target_table, target_len, target_of, pairs);
}

std::string to_string(StageSelection s) {
    switch (s) {
        case StageSelection::one: return "1";
        case StageSelection::two: return "2";
        case StageSelection::both: return "both";
    }
    return "both";
}

StageSelection stage_selection_from_string(const std::string& name) {
    if (name == "1" || name == "one") return StageSelection::one;
    if (name == "2" || name == "two") return StageSelection::two;
    if (name == "both") return StageSelection::both;
    throw std::invalid_argument("unknown stage '" + name + "' (expected 1, 2 or both)");
}

void RunConfig::validate() const {
    if (schema_version != kRunConfigSchema)
        throw std::invalid_argument("run config: unsupported schema_version " + std::to_string(schema_version));
    if (epochs < 1 || epochs > 100) throw std::invalid_argument("run config: epochs must be in [1, 100]");
    if (batch_size == 0) throw std::invalid_argument("run config: batch_size must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("run config: lr must be positive");
    if (!(lambda >= 0.0)) throw std::invalid_argument("run config: lambda must be non-negative");
    if (!(kl_weight >= 0.0)) throw std::invalid_argument("run config: kl_weight must be non-negative");
    if (patience < 1) throw std::invalid_argument("run config: patience must be positive");
    if (mc_samples < 1) throw std::invalid_argument("run config: mc_samples must be positive");
    if (k_star < 0 || k_star > diffusion_steps) throw std::invalid_argument("run config: k_star outside [0, T]");
    schedule();
}

diffusion::NoiseSchedule RunConfig::schedule() const {
    return diffusion::build_schedule(diffusion_steps, beta_start, beta_end);
}

nlohmann::json RunConfig::to_json() const {
    return {{"schema_version", schema_version},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"lambda", lambda},
            {"kl_weight", kl_weight},
            {"patience", patience},
            {"seed", seed},
            {"stage", to_string(stage)},
            {"schedule", {{"steps", diffusion_steps}, {"beta_start", beta_start}, {"beta_end", beta_end}}},
            {"k_star", k_star},
            {"mc_samples", mc_samples},
            {"model_preset", model_preset},
            {"model_overrides", model_overrides},
            {"init_output_bias", init_output_bias},
            {"dataset_dir", dataset_dir},
            {"split_path", split_path},
            {"checkpoint_dir", checkpoint_dir}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {
        "schema_version", "epochs",         "batch_size",     "lr",          "lambda",     "kl_weight",
        "patience",       "seed",           "stage",          "schedule",    "k_star",     "mc_samples",
        "model_preset",   "model_overrides", "init_output_bias", "dataset_dir", "split_path", "checkpoint_dir"};
    for (const auto& [key, value] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw std::invalid_argument("run config: unknown key '" + key + "'");
    RunConfig c;
    c.schema_version = j.value("schema_version", c.schema_version);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.lambda = j.value("lambda", c.lambda);
    c.kl_weight = j.value("kl_weight", c.kl_weight);
    c.patience = j.value("patience", c.patience);
    c.seed = j.value("seed", c.seed);
    if (j.contains("stage")) {
        const auto& s = j.at("stage");
        c.stage = stage_selection_from_string(s.is_number() ? std::to_string(s.get<int>()) : s.get<std::string>());
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        c.diffusion_steps = s.value("steps", c.diffusion_steps);
        c.beta_start = s.value("beta_start", c.beta_start);
        c.beta_end = s.value("beta_end", c.beta_end);
    }
    c.k_star = j.value("k_star", c.k_star);
    c.mc_samples = j.value("mc_samples", c.mc_samples);
    c.model_preset = j.value("model_preset", c.model_preset);
    c.model_overrides = j.value("model_overrides", c.model_overrides);
    c.init_output_bias = j.value("init_output_bias", c.init_output_bias);
    c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
    c.split_path = j.value("split_path", c.split_path);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    return c;
}

nlohmann::json EpochLog::to_json() const {
    nlohmann::json val = nlohmann::json::object();
    for (const auto& [setting, metrics] : validation) val[setting] = metrics;
    return {{"stage", stage},
            {"epoch", epoch},
            {"batches", batches},
            {"train",
             {{"coreg", train.coreg},
              {"kl", train.kl},
              {"drug_diff", train.drug_diff},
              {"target_diff", train.target_diff},
              {"total", train.total}}},
            {"validation", val},
            {"selection_mse", selection_mse ? nlohmann::json(*selection_mse) : nlohmann::json(nullptr)}};
}

std::vector<std::string> stage_one_trainable(const ModelConfig&) { return {"encoder.", kVarHead + "."}; }

std::vector<std::string> stage_two_trainable(const ModelConfig& cfg) { return {"diffusion.", cfg.diff_head() + "."}; }

namespace {

std::vector<std::vector<std::size_t>> batch_order(std::size_t n, std::size_t batch_size, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size)
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
    return batches;
}

std::vector<double> gather_labels(const EncodedDataset& data, std::span<const std::size_t> rows) {
    std::vector<double> y;
    y.reserve(rows.size());
    for (std::size_t i : rows) y.push_back(data.labels.at(i));
    return y;
}

double scalar(const Tape<float>& tape, Var v) { return static_cast<double>(tape.value(v).item()); }

void require_finite(double loss, int stage, std::size_t batch) {
    if (!std::isfinite(loss))
        throw std::runtime_error("stage " + std::to_string(stage) + ": non-finite loss at batch " +
                                 std::to_string(batch));
}

// 0.5 * mean(sigma^2 + mu^2 - 2 log sigma) per element; the constant -0.5 of
// the Gaussian KL is added by the caller when reporting.
Var kl_to_standard_normal(Tape<float>& tape, Var mu, Var log_sigma) {
    Var var_term = ops::exp(tape, ops::scale(tape, log_sigma, 2.0));
    Var mu_term = ops::mul(tape, mu, mu);
    Var s = ops::sub(tape, ops::add(tape, var_term, mu_term), ops::scale(tape, log_sigma, 2.0));
    return ops::scale(tape, ops::mean(tape, s), 0.5);
}

void accumulate(LossComponents& sum, const LossComponents& batch, double weight) {
    sum.coreg += weight * batch.coreg;
    sum.kl += weight * batch.kl;
    sum.drug_diff += weight * batch.drug_diff;
    sum.target_diff += weight * batch.target_diff;
    sum.total += weight * batch.total;
}

const encoder::EncoderConfig& encoder_config(const Model& model, const std::string& modality) {
    if (modality == "drug") return model.config.drug_encoder;
    if (modality == "target") return model.config.target_encoder;
    throw std::invalid_argument("unknown modality '" + modality + "' (expected drug or target)");
}

std::string encoder_prefix(const std::string& modality) { return modality == "drug" ? kDrugEncoder : kTargetEncoder; }

// Eval-mode posterior for rows of a token table.
std::pair<Tensor<float>, Tensor<float>> encode_posterior(Model& model, const std::string& modality,
                                                         std::span<const std::int32_t> table, std::size_t len,
                                                         std::size_t batch_size) {
    const auto& cfg = encoder_config(model, modality);
    const std::string prefix = encoder_prefix(modality);
    if (len == 0 || table.size() % len != 0) throw std::invalid_argument("encode: token table does not split into rows");
    const std::size_t n = table.size() / len;
    const std::size_t d = cfg.latent_dim;
    Tensor<float> mu(Shape{n, d}), log_sigma(Shape{n, d});
    Rng unused(0);
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t rows = std::min(batch_size, n - start);
        Tape<float> tape;
        ForwardContext<float> ctx{tape, model.params, unused, false, false};
        Var h = encoder::encode(ctx, prefix, cfg, table.subspan(start * len, rows * len), rows);
        auto latent = encoder::sample_latent(ctx, prefix, cfg, h, Tensor<float>(Shape{rows, d}));
        const auto& m = tape.value(latent.mu);
        const auto& s = tape.value(latent.log_sigma);
        std::copy(m.data.begin(), m.data.end(), mu.data.begin() + static_cast<std::ptrdiff_t>(start * d));
        std::copy(s.data.begin(), s.data.end(), log_sigma.data.begin() + static_cast<std::ptrdiff_t>(start * d));
    }
    return {std::move(mu), std::move(log_sigma)};
}

// z0 rows for the given pairs: mu + sigma * eps with eps from rng.
Tensor<float> sample_rows(const Tensor<float>& mu, const Tensor<float>& log_sigma,
                          const std::vector<std::size_t>& entity_of, std::span<const std::size_t> pairs, Rng& rng) {
    const std::size_t d = mu.cols();
    Tensor<float> z(Shape{pairs.size(), d});
    for (std::size_t r = 0; r < pairs.size(); ++r) {
        const std::size_t e = entity_of.at(pairs[r]);
        for (std::size_t c = 0; c < d; ++c)
            z[r * d + c] = static_cast<float>(mu[e * d + c] + std::exp(static_cast<double>(log_sigma[e * d + c])) * rng.normal());
    }
    return z;
}

Tensor<float> gather_latents(const Tensor<float>& table, const std::vector<std::size_t>& entity_of,
                             std::span<const std::size_t> pairs) {
    const std::size_t d = table.cols();
    Tensor<float> z(Shape{pairs.size(), d});
    for (std::size_t r = 0; r < pairs.size(); ++r) {
        const std::size_t e = entity_of.at(pairs[r]);
        std::copy_n(table.data.begin() + static_cast<std::ptrdiff_t>(e * d), d,
                    z.data.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    return z;
}

// Noise, denoise and reconstruct one modality on the tape. Returns (z0_hat, eps_hat).
std::pair<Var, Var> denoise_branch(ForwardContext<float>& ctx, Model& model, const std::string& modality,
                                   const Tensor<float>& zk, std::span<const int> k, const Tensor<float>& eps,
                                   const DenoiserOverride& override_fn) {
    auto& tape = ctx.tape;
    Var zk_var = tape.constant(zk);
    Var eps_hat;
    if (override_fn) {
        Tensor<float> out = override_fn(modality, zk, k, eps);
        if (out.shape != zk.shape)
            throw std::invalid_argument("denoiser override returned shape " + shape_str(out.shape));
        eps_hat = tape.constant(std::move(out));
    } else {
        const std::string prefix = modality == "drug" ? kDrugDenoiser : kTargetDenoiser;
        eps_hat = diffusion::denoise_eps(ctx, prefix, model.config.denoiser, zk_var, k);
    }
    return {diffusion::reconstruct_z0(tape, zk_var, eps_hat, k, model.schedule), eps_hat};
}

// Encodes each distinct entity of the batch once, then gathers per-pair rows
// and draws one reparameterized latent per pair.
encoder::LatentVars<float> encode_batch(ForwardContext<float>& ctx, const std::string& prefix,
                                        const encoder::EncoderConfig& cfg, const std::vector<std::int32_t>& table,
                                        std::size_t len, const std::vector<std::size_t>& entity_of,
                                        std::span<const std::size_t> rows) {
    std::map<std::size_t, std::size_t> slot;
    std::vector<std::size_t> entities, positions;
    for (std::size_t p : rows) {
        auto [it, inserted] = slot.emplace(entity_of.at(p), entities.size());
        if (inserted) entities.push_back(it->first);
        positions.push_back(it->second);
    }
    std::vector<std::int32_t> tokens;
    tokens.reserve(entities.size() * len);
    for (std::size_t e : entities)
        tokens.insert(tokens.end(), table.begin() + static_cast<std::ptrdiff_t>(e * len),
                      table.begin() + static_cast<std::ptrdiff_t>((e + 1) * len));
    Var h = encoder::encode(ctx, prefix, cfg, tokens, entities.size());
    h = ops::gather_rows(ctx.tape, h, std::move(positions));
    return encoder::sample_latent(ctx, prefix, cfg, h);
}

void check_encoders_frozen(const ParamStore<float>& params) {
    for (const auto& [name, p] : params.entries()) {
        if (!name.starts_with("encoder.")) continue;
        for (float g : p.grad.data)
            if (g != 0.0f)
                throw std::logic_error("stage 2: encoder gradient nonzero for '" + name + "' (freeze violated)");
    }
}

}  // namespace

EpochLog stage_one_epoch(Model& model, const EncodedDataset& train, const EpochOptions& opt, Rng& rng) {
    if (train.empty()) throw std::invalid_argument("stage 1: empty training set");
    if (opt.batch_size == 0) throw std::invalid_argument("stage 1: batch_size must be positive");
    const auto& cfg = model.config;
    const auto trainable = stage_one_trainable(cfg);
    EpochLog log;
    log.stage = 1;
    for (const auto& rows : batch_order(train.size(), opt.batch_size, rng)) {
        const std::size_t b = rows.size();
        Tape<float> tape;
        ForwardContext<float> ctx{tape, model.params, rng, true, true};
        auto ld = encode_batch(ctx, kDrugEncoder, cfg.drug_encoder, train.drug_table, train.drug_len, train.drug_of,
                               rows);
        auto lt = encode_batch(ctx, kTargetEncoder, cfg.target_encoder, train.target_table, train.target_len,
                               train.target_of, rows);
        Var y_hat = regressor::predict_affinity(ctx, kVarHead, cfg.regressor, ld.z0, lt.z0);
        const auto y = gather_labels(train, rows);
        Var coreg = regressor::coreg_loss(tape, y, y_hat, opt.lambda);
        LossComponents batch;
        batch.coreg = scalar(tape, coreg);
        Var total = coreg;
        if (opt.kl_weight > 0.0) {
            Var kl = ops::add(tape, kl_to_standard_normal(tape, ld.mu, ld.log_sigma),
                              kl_to_standard_normal(tape, lt.mu, lt.log_sigma));
            batch.kl = scalar(tape, kl) - 1.0;
            total = ops::add(tape, coreg, ops::scale(tape, kl, opt.kl_weight));
        }
        batch.total = batch.coreg + opt.kl_weight * batch.kl;
        require_finite(batch.total, 1, log.batches);
        tape.backward(total);
        adam_step(model.params, opt.adam, trainable);
        accumulate(log.train, batch, static_cast<double>(b) / static_cast<double>(train.size()));
        ++log.batches;
    }
    return log;
}

Tensor<float> encode_means(Model& model, const std::string& modality, std::span<const std::int32_t> table,
                           std::size_t len, std::size_t batch_size) {
    return encode_posterior(model, modality, table, len, batch_size).first;
}

LatentCache encode_entities(Model& model, const EncodedDataset& data, std::size_t batch_size) {
    LatentCache c;
    std::tie(c.drug_mu, c.drug_log_sigma) = encode_posterior(model, "drug", data.drug_table, data.drug_len, batch_size);
    std::tie(c.target_mu, c.target_log_sigma) =
        encode_posterior(model, "target", data.target_table, data.target_len, batch_size);
    return c;
}

EpochLog stage_two_epoch(Model& model, const EncodedDataset& train, const LatentCache& cache,
                         const EpochOptions& opt, Rng& rng) {
    if (train.empty()) throw std::invalid_argument("stage 2: empty training set");
    if (opt.batch_size == 0) throw std::invalid_argument("stage 2: batch_size must be positive");
    if (cache.drug_mu.rows() != train.drug_count() || cache.target_mu.rows() != train.target_count())
        throw std::invalid_argument("stage 2: latent cache does not match the dataset entity tables");
    const auto& cfg = model.config;
    const auto trainable = stage_two_trainable(cfg);
    const std::size_t d = cfg.latent_dim();
    EpochLog log;
    log.stage = 2;
    for (const auto& rows : batch_order(train.size(), opt.batch_size, rng)) {
        const std::size_t b = rows.size();
        const Tensor<float> z0_drug = sample_rows(cache.drug_mu, cache.drug_log_sigma, train.drug_of, rows, rng);
        const Tensor<float> z0_target = sample_rows(cache.target_mu, cache.target_log_sigma, train.target_of, rows, rng);
        const auto k_drug = diffusion::sample_steps(b, model.schedule, rng);
        const auto eps_drug = diffusion::standard_normal<float>(Shape{b, d}, rng);
        const auto k_target = diffusion::sample_steps(b, model.schedule, rng);
        const auto eps_target = diffusion::standard_normal<float>(Shape{b, d}, rng);
        const auto zk_drug = diffusion::forward_noise(z0_drug, k_drug, eps_drug, model.schedule);
        const auto zk_target = diffusion::forward_noise(z0_target, k_target, eps_target, model.schedule);

        Tape<float> tape;
        ForwardContext<float> ctx{tape, model.params, rng, true, true};
        auto [z0_hat_drug, eps_hat_drug] =
            denoise_branch(ctx, model, "drug", zk_drug, k_drug, eps_drug, opt.denoiser_override);
        auto [z0_hat_target, eps_hat_target] =
            denoise_branch(ctx, model, "target", zk_target, k_target, eps_target, opt.denoiser_override);
        Var y_hat = regressor::predict_affinity(ctx, cfg.diff_head(), cfg.regressor, z0_hat_drug, z0_hat_target);
        const auto y = gather_labels(train, rows);
        Var coreg = regressor::coreg_loss(tape, y, y_hat, opt.lambda);
        Var diff_drug = diffusion::diffusion_loss(tape, tape.constant(eps_drug), eps_hat_drug);
        Var diff_target = diffusion::diffusion_loss(tape, tape.constant(eps_target), eps_hat_target);
        Var total = ops::add(tape, ops::add(tape, coreg, diff_drug), diff_target);

        LossComponents batch;
        batch.coreg = scalar(tape, coreg);
        batch.drug_diff = scalar(tape, diff_drug);
        batch.target_diff = scalar(tape, diff_target);
        batch.total = scalar(tape, total);
        require_finite(batch.total, 2, log.batches);
        tape.backward(total);
        check_encoders_frozen(model.params);
        adam_step(model.params, opt.adam, trainable);
        accumulate(log.train, batch, static_cast<double>(b) / static_cast<double>(train.size()));
        ++log.batches;
    }
    return log;
}

std::string to_string(PredictMode m) { return m == PredictMode::var ? "var" : "diff"; }

PredictMode predict_mode_from_string(const std::string& name) {
    if (name == "var") return PredictMode::var;
    if (name == "diff") return PredictMode::diff;
    throw std::invalid_argument("unknown prediction mode '" + name + "' (expected var or diff)");
}

std::vector<double> predict(Model& model, const EncodedDataset& data, const PredictOptions& opt) {
    if (opt.batch_size == 0) throw std::invalid_argument("predict: batch_size must be positive");
    if (opt.mc_samples < 1) throw std::invalid_argument("predict: mc_samples must be positive");
    const auto& cfg = model.config;
    const std::size_t d = cfg.latent_dim();
    const int k_star = opt.k_star > 0 ? opt.k_star : model.schedule.steps / 2;
    // Eval-mode encoders are deterministic, so each entity is encoded once.
    const Tensor<float> drug_mu = encode_means(model, "drug", data.drug_table, data.drug_len, opt.batch_size);
    const Tensor<float> target_mu = encode_means(model, "target", data.target_table, data.target_len, opt.batch_size);
    std::vector<double> out;
    out.reserve(data.size());
    Rng unused(0);
    for (std::size_t start = 0; start < data.size(); start += opt.batch_size) {
        const std::size_t b = std::min(opt.batch_size, data.size() - start);
        std::vector<std::size_t> rows(b);
        std::iota(rows.begin(), rows.end(), start);
        const Tensor<float> mu_drug = gather_latents(drug_mu, data.drug_of, rows);
        const Tensor<float> mu_target = gather_latents(target_mu, data.target_of, rows);
        if (opt.mode == PredictMode::var) {
            Tape<float> tape;
            ForwardContext<float> ctx{tape, model.params, unused, false, false};
            Var y_hat = regressor::predict_affinity(ctx, kVarHead, cfg.regressor, tape.constant(mu_drug),
                                                    tape.constant(mu_target));
            for (float v : tape.value(y_hat).data) out.push_back(v);
            continue;
        }
        std::vector<Rng> streams;
        streams.reserve(b);
        for (std::size_t i : rows) streams.emplace_back(opt.seed + kPairStreamStride * (i + 1));
        const std::vector<int> k(b, k_star);
        std::vector<double> acc(b, 0.0);
        for (int s = 0; s < opt.mc_samples; ++s) {
            Tensor<float> eps_drug(Shape{b, d}), eps_target(Shape{b, d});
            for (std::size_t r = 0; r < b; ++r) {
                for (std::size_t c = 0; c < d; ++c) eps_drug[r * d + c] = static_cast<float>(streams[r].normal());
                for (std::size_t c = 0; c < d; ++c) eps_target[r * d + c] = static_cast<float>(streams[r].normal());
            }
            const auto zk_drug = diffusion::forward_noise(mu_drug, k, eps_drug, model.schedule);
            const auto zk_target = diffusion::forward_noise(mu_target, k, eps_target, model.schedule);
            Tape<float> tape;
            ForwardContext<float> ctx{tape, model.params, unused, false, false};
            Var z0_drug = denoise_branch(ctx, model, "drug", zk_drug, k, eps_drug, opt.denoiser_override).first;
            Var z0_target = denoise_branch(ctx, model, "target", zk_target, k, eps_target, opt.denoiser_override).first;
            Var y_hat = regressor::predict_affinity(ctx, cfg.diff_head(), cfg.regressor, z0_drug, z0_target);
            const auto& yv = tape.value(y_hat);
            for (std::size_t r = 0; r < b; ++r) acc[r] += yv[r];
        }
        for (double v : acc) out.push_back(v / opt.mc_samples);
    }
    return out;
}

nlohmann::json validation_metrics(std::span<const double> y, std::span<const double> y_hat,
                                  const std::string& setting) {
    nlohmann::json j = {{"setting", setting}, {"n", y.size()}};
    j["mse"] = metrics::mse(y, y_hat);
    j["mae"] = metrics::mae(y, y_hat);
    try {
        j["ci"] = metrics::concordance_index(y, y_hat);
    } catch (const std::exception&) {
        j["ci"] = nullptr;
    }
    try {
        j["rm2"] = metrics::rm2(y, y_hat);
    } catch (const std::exception&) {
        j["rm2"] = nullptr;
    }
    return j;
}

namespace {

using Snapshot = std::map<std::string, Tensor<float>>;

Snapshot snapshot(const ParamStore<float>& params, const std::vector<std::string>& prefixes) {
    Snapshot s;
    for (const auto& [name, p] : params.entries())
        if (has_any_prefix(name, prefixes)) s.emplace(name, p.value);
    return s;
}

void restore(ParamStore<float>& params, const Snapshot& s) {
    for (const auto& [name, value] : s) params.value(name) = value;
}

double mean_label(const EncodedDataset& data) {
    return std::accumulate(data.labels.begin(), data.labels.end(), 0.0) / static_cast<double>(data.size());
}

template <typename EpochFn>
StageResult run_stage(Model& model, const std::vector<ValidationSet>& validation, const RunConfig& run,
                      const std::vector<std::string>& trainable, const PredictOptions& predict_opt, EpochFn&& epoch_fn,
                      Rng& rng, const EpochCallback& on_epoch) {
    StageResult result;
    Snapshot best;
    int since_best = 0;
    for (int epoch = 1; epoch <= run.epochs; ++epoch) {
        Rng epoch_rng = rng.fork();
        EpochLog log = epoch_fn(epoch_rng);
        log.epoch = epoch;
        double sum = 0.0;
        int counted = 0;
        for (const auto& v : validation) {
            if (v.data.empty()) continue;
            const auto y_hat = predict(model, v.data, predict_opt);
            auto m = validation_metrics(v.data.labels, y_hat, v.setting);
            sum += m.at("mse").get<double>();
            ++counted;
            log.validation.emplace_back(v.setting, std::move(m));
        }
        if (counted > 0) {
            log.selection_mse = sum / counted;
            if (!result.best_selection_mse || *log.selection_mse < *result.best_selection_mse) {
                result.best_selection_mse = log.selection_mse;
                result.best_epoch = epoch;
                best = snapshot(model.params, trainable);
                since_best = 0;
            } else {
                ++since_best;
            }
        }
        if (on_epoch) on_epoch(log);
        result.logs.push_back(std::move(log));
        if (since_best >= run.patience) break;
    }
    if (result.best_epoch > 0) restore(model.params, best);
    return result;
}

EpochOptions epoch_options(const RunConfig& run) {
    EpochOptions opt;
    opt.batch_size = run.batch_size;
    opt.adam.lr = run.lr;
    opt.lambda = run.lambda;
    opt.kl_weight = run.kl_weight;
    return opt;
}

}  // namespace

StageResult train_stage_one(Model& model, const EncodedDataset& train, const std::vector<ValidationSet>& validation,
                            const RunConfig& run, Rng& rng, const EpochCallback& on_epoch) {
    run.validate();
    if (train.empty()) throw std::invalid_argument("stage 1: empty training set");
    model.params.reset_optimizer();
    if (run.init_output_bias) regressor::set_output_bias(model.params, kVarHead, model.config.regressor, mean_label(train));
    const EpochOptions opt = epoch_options(run);
    PredictOptions popt;
    popt.mode = PredictMode::var;
    return run_stage(
        model, validation, run, stage_one_trainable(model.config), popt,
        [&](Rng& r) { return stage_one_epoch(model, train, opt, r); }, rng, on_epoch);
}

StageResult train_stage_two(Model& model, const EncodedDataset& train, const std::vector<ValidationSet>& validation,
                            const RunConfig& run, Rng& rng, const EpochCallback& on_epoch,
                            const DenoiserOverride& denoiser_override) {
    run.validate();
    if (train.empty()) throw std::invalid_argument("stage 2: empty training set");
    model.params.reset_optimizer();
    if (run.init_output_bias && !model.config.tie_heads)
        regressor::set_output_bias(model.params, kDiffHead, model.config.regressor, mean_label(train));
    EpochOptions opt = epoch_options(run);
    opt.denoiser_override = denoiser_override;
    const LatentCache cache = encode_entities(model, train);
    PredictOptions popt;
    popt.mode = PredictMode::diff;
    popt.seed = run.seed;
    popt.k_star = run.inference_step();
    popt.mc_samples = run.mc_samples;
    popt.denoiser_override = denoiser_override;
    return run_stage(
        model, validation, run, stage_two_trainable(model.config), popt,
        [&](Rng& r) { return stage_two_epoch(model, train, cache, opt, r); }, rng, on_epoch);
}

namespace {

std::filesystem::path adam_path(const std::filesystem::path& path) {
    auto p = path;
    p.replace_extension(".adam");
    return p;
}

}  // namespace

void save_checkpoint(const Model& model, int stage, const std::filesystem::path& path) {
    if (stage != 1 && stage != 2) throw std::invalid_argument("checkpoint stage must be 1 or 2");
    checkpoint::TensorMap meta;
    meta.emplace("meta.stage", scalar_tensor(static_cast<float>(stage)));
    meta.emplace("meta.schedule",
                 Tensor<float>(Shape{3}, {static_cast<float>(model.schedule.steps),
                                          static_cast<float>(model.schedule.beta_start),
                                          static_cast<float>(model.schedule.beta_end)}));
    checkpoint::save_values(model.params, path, meta);
    checkpoint::save_adam_state(model.params, adam_path(path));
}

int load_checkpoint(Model& model, const std::filesystem::path& path) {
    const auto extra = checkpoint::load_values(model.params, path);
    const auto stage_it = extra.find("meta.stage");
    if (stage_it == extra.end()) throw std::runtime_error(path.string() + ": checkpoint has no meta.stage entry");
    const int stage = static_cast<int>(stage_it->second.item());
    const auto sched_it = extra.find("meta.schedule");
    if (sched_it != extra.end()) {
        const auto& s = sched_it->second.data;
        const bool same = s.size() == 3 && static_cast<int>(s[0]) == model.schedule.steps &&
                          s[1] == static_cast<float>(model.schedule.beta_start) &&
                          s[2] == static_cast<float>(model.schedule.beta_end);
        if (!same) throw std::runtime_error(path.string() + ": checkpoint was trained under a different noise schedule");
    }
    if (std::filesystem::exists(adam_path(path))) checkpoint::load_adam_state(model.params, adam_path(path));
    return stage;
}

}  // namespace codiff::training
