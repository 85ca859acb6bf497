#include <gtest/gtest.h>

#include <cmath>

#include "codiff/training.hpp"
#include "synthetic.hpp"

namespace codiff::training {
namespace {

using testing::small_problem;

std::map<std::string, std::vector<float>> snapshot(const Model& model, const std::string& prefix) {
    std::map<std::string, std::vector<float>> out;
    for (const auto& name : model.params.names(prefix)) out[name] = model.params.value(name).data;
    return out;
}

Model make_model(const ModelConfig& cfg, std::uint64_t seed = 0) { return Model(cfg, diffusion::build_schedule(), seed); }

DenoiserOverride oracle_denoiser() {
    return [](const std::string&, const Tensor<float>&, std::span<const int>, const Tensor<float>& eps) { return eps; };
}

double mse_of(const std::vector<double>& y, const std::vector<double>& p) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - p[i]) * (y[i] - p[i]);
    return s / static_cast<double>(y.size());
}

TEST(ModelConfig, PresetsValidateAndRoundTrip) {
    for (const char* name : {"full", "compact"}) {
        const auto cfg = ModelConfig::preset(name, 64, 25);
        EXPECT_NO_THROW(cfg.validate());
        EXPECT_EQ(ModelConfig::from_json(cfg.to_json()).to_json(), cfg.to_json());
    }
    EXPECT_EQ(ModelConfig::preset("full", 64, 25).latent_dim(), 384u);
    EXPECT_THROW(ModelConfig::preset("huge", 64, 25), std::invalid_argument);
    auto bad = ModelConfig::preset("compact", 64, 25);
    bad.denoiser.latent_dim += 1;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(RunConfig, JsonRoundTripAndValidation) {
    RunConfig run;
    run.seed = 9;
    run.stage = StageSelection::two;
    run.model_overrides = {{"tie_heads", true}};
    EXPECT_EQ(RunConfig::from_json(run.to_json()).to_json(), run.to_json());
    EXPECT_EQ(run.inference_step(), 500);
    EXPECT_THROW(RunConfig::from_json({{"epoch", 3}}), std::invalid_argument);
    run.epochs = 101;
    EXPECT_THROW(run.validate(), std::invalid_argument);
}

TEST(EncodedDataset, DeduplicatesEntities) {
    const auto p = small_problem(3, 4, 12, 20);
    EXPECT_EQ(p.data.size(), 12u);
    EXPECT_EQ(p.data.drug_count(), 3u);
    EXPECT_EQ(p.data.target_count(), 4u);
    const std::vector<std::size_t> rows = {5, 0};
    const auto sub = p.data.subset(rows);
    EXPECT_EQ(sub.labels, (std::vector<double>{p.data.labels[5], p.data.labels[0]}));
    EXPECT_EQ(sub.drug_tokens(std::vector<std::size_t>{0}), p.data.drug_tokens(std::vector<std::size_t>{5}));
}

TEST(Model, SameSeedSameParameters) {
    const auto p = small_problem(2, 2, 12, 20);
    EXPECT_EQ(snapshot(make_model(p.config, 4), ""), snapshot(make_model(p.config, 4), ""));
    EXPECT_NE(snapshot(make_model(p.config, 4), ""), snapshot(make_model(p.config, 5), ""));
}

TEST(StageOne, LeavesDiffusionAndDiffHeadUntouched) {
    const auto p = small_problem(4, 4, 20, 40);
    Model model = make_model(p.config);
    const auto diffusion_before = snapshot(model, "diffusion.");
    const auto head_before = snapshot(model, kDiffHead + ".");
    const auto encoder_before = snapshot(model, "encoder.");
    Rng rng(1);
    const auto log = stage_one_epoch(model, p.data, EpochOptions{.batch_size = 8}, rng);
    EXPECT_EQ(log.batches, 2u);
    EXPECT_TRUE(std::isfinite(log.train.total));
    EXPECT_EQ(snapshot(model, "diffusion."), diffusion_before);
    EXPECT_EQ(snapshot(model, kDiffHead + "."), head_before);
    EXPECT_NE(snapshot(model, "encoder."), encoder_before);
}

TEST(StageOne, SameSeedSameLog) {
    const auto p = small_problem(4, 4, 20, 40);
    auto run = [&] {
        Model model = make_model(p.config, 3);
        Rng rng(8);
        return stage_one_epoch(model, p.data, EpochOptions{.batch_size = 5}, rng).to_json().dump();
    };
    EXPECT_EQ(run(), run());
}

TEST(StageOne, SinglePairMemorizes) {
    const auto p = small_problem(1, 1, 20, 40);
    Model model = make_model(p.config, 2);
    // Start one unit away so the head has to move.
    regressor::set_output_bias(model.params, kVarHead, p.config.regressor, p.data.labels[0] - 1.0);
    Rng rng(2);
    for (int step = 0; step < 300; ++step) stage_one_epoch(model, p.data, EpochOptions{.batch_size = 1}, rng);
    EXPECT_LT(mse_of(p.data.labels, predict(model, p.data, {})), 0.01);
}

TEST(StageTwo, FreezesEncodersAndVarHead) {
    const auto p = small_problem(4, 4, 20, 40);
    Model model = make_model(p.config);
    const auto encoders = snapshot(model, "encoder.");
    const auto var_head = snapshot(model, kVarHead + ".");
    const auto denoisers = snapshot(model, "diffusion.");
    const auto cache = encode_entities(model, p.data);
    Rng rng(1);
    stage_two_epoch(model, p.data, cache, EpochOptions{.batch_size = 8}, rng);
    EXPECT_EQ(snapshot(model, "encoder."), encoders);
    EXPECT_EQ(snapshot(model, kVarHead + "."), var_head);
    EXPECT_NE(snapshot(model, "diffusion."), denoisers);
    for (const auto& name : model.params.names("encoder."))
        for (float g : model.params.at(name).grad.data) ASSERT_EQ(g, 0.0f) << name;
}

TEST(StageTwo, OracleDenoiserLeavesOnlyTheAffinityTerm) {
    const auto p = small_problem(4, 4, 20, 40);
    Model model = make_model(p.config);
    const auto cache = encode_entities(model, p.data);
    Rng rng(1);
    EpochOptions opt{.batch_size = 16};
    opt.denoiser_override = oracle_denoiser();
    const auto log = stage_two_epoch(model, p.data, cache, opt, rng);
    EXPECT_EQ(log.train.drug_diff, 0.0);
    EXPECT_EQ(log.train.target_diff, 0.0);
    EXPECT_GT(log.train.coreg, 0.0);
    EXPECT_EQ(log.train.total, log.train.coreg);
}

TEST(Predict, VarAndSeededDiffAreDeterministic) {
    const auto p = small_problem(3, 3, 20, 40);
    Model model = make_model(p.config, 6);
    EXPECT_EQ(predict(model, p.data, {}), predict(model, p.data, {}));
    PredictOptions diff{.mode = PredictMode::diff, .seed = 4};
    const auto a = predict(model, p.data, diff);
    EXPECT_EQ(a, predict(model, p.data, diff));
    diff.batch_size = 2;
    const auto rebatched = predict(model, p.data, diff);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], rebatched[i], 1e-5);
    diff.seed = 5;
    EXPECT_NE(a, predict(model, p.data, diff));
}

TEST(Predict, OracleDiffEqualsDiffHeadOnMeans) {
    const auto p = small_problem(3, 3, 20, 40);
    Model model = make_model(p.config, 6);
    PredictOptions opt{.mode = PredictMode::diff, .seed = 1};
    opt.denoiser_override = oracle_denoiser();
    const auto via_diffusion = predict(model, p.data, opt);

    const auto drug_mu = encode_means(model, "drug", p.data.drug_table, p.data.drug_len);
    const auto target_mu = encode_means(model, "target", p.data.target_table, p.data.target_len);
    const std::size_t d = p.config.latent_dim(), n = p.data.size();
    Tensor<float> zd({n, d}), zt({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) {
            zd.at(i, c) = drug_mu.at(p.data.drug_of[i], c);
            zt.at(i, c) = target_mu.at(p.data.target_of[i], c);
        }
    Tape<float> tape;
    Rng rng(0);
    ForwardContext<float> ctx{tape, model.params, rng, false, false};
    const auto direct = tape.value(
        regressor::predict_affinity(ctx, kDiffHead, p.config.regressor, tape.constant(zd), tape.constant(zt)));
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(via_diffusion[i], direct[i], 1e-4);
}

TEST(Checkpoint, RoundTripRestoresValuesAndStage) {
    const auto p = small_problem(2, 2, 12, 20);
    Model trained = make_model(p.config, 1);
    Rng rng(1);
    stage_one_epoch(trained, p.data, EpochOptions{.batch_size = 4}, rng);
    const auto dir = testing::scratch_dir("training_ckpt");
    save_checkpoint(trained, 1, dir / "stage1.ckpt");
    EXPECT_TRUE(std::filesystem::exists(dir / "stage1.adam"));
    Model loaded = make_model(p.config, 99);
    EXPECT_EQ(load_checkpoint(loaded, dir / "stage1.ckpt"), 1);
    EXPECT_EQ(snapshot(loaded, ""), snapshot(trained, ""));
    EXPECT_EQ(loaded.params.step(), trained.params.step());

    Model other_schedule(p.config, diffusion::build_schedule(10), 1);
    EXPECT_THROW(load_checkpoint(other_schedule, dir / "stage1.ckpt"), std::runtime_error);
}

TEST(TrainStage, EarlyStoppingRestoresBestEpoch) {
    const auto p = small_problem(6, 6, 20, 40);
    std::vector<std::size_t> train_rows, val_rows;
    for (std::size_t i = 0; i < p.data.size(); ++i) (i % 4 ? train_rows : val_rows).push_back(i);
    const auto train = p.data.subset(train_rows);
    const std::vector<ValidationSet> val = {{"ud", p.data.subset(val_rows)}};
    RunConfig run;
    run.epochs = 6;
    run.batch_size = 8;
    run.patience = 2;
    Model model = make_model(p.config);
    Rng rng(3);
    int calls = 0;
    const auto result = train_stage_one(model, train, val, run, rng, [&](const EpochLog&) { ++calls; });
    EXPECT_EQ(calls, static_cast<int>(result.logs.size()));
    ASSERT_TRUE(result.best_selection_mse.has_value());
    EXPECT_GE(result.best_epoch, 1);
    double best = 1e300;
    for (const auto& log : result.logs) best = std::min(best, *log.selection_mse);
    EXPECT_EQ(*result.best_selection_mse, best);
    const auto y_hat = predict(model, val[0].data, {});
    EXPECT_NEAR(mse_of(val[0].data.labels, y_hat), best, 1e-6);
}

}  // namespace
}  // namespace codiff::training
