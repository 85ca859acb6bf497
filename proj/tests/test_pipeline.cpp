#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "anchors.hpp"
#include "codiff/pipeline.hpp"
#include "synthetic.hpp"

namespace codiff::pipeline {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

const std::string kHeader = std::string(data::kTsvHeader) + "\n";

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

// One ingested, split and briefly trained dataset shared by the tests below.
class PipelineTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        root_ = new fs::path(testing::scratch_dir("pipeline"));
        auto records = testing::small_problem(15, 15, 20, 40).records;
        // Distinct labels keep every metric defined on the small test splits.
        for (std::size_t i = 0; i < records.size(); ++i) records[i].affinity += 0.01 * static_cast<double>(i);
        data::write_tsv(*root_ / "pairs.tsv", records);
        ingest({.input = *root_ / "pairs.tsv", .out_dir = *root_ / "ds", .drug_len = 20, .target_len = 40});
        split({.data_dir = *root_ / "ds", .seed = 7, .out_dir = *root_ / "split"});
        training::RunConfig run;
        run.epochs = 2;
        run.batch_size = 16;
        run.model_preset = "compact";
        run.dataset_dir = (*root_ / "ds").string();
        run.split_path = (*root_ / "split").string();
        run.checkpoint_dir = (*root_ / "ckpt").string();
        train(run);
    }
    static void TearDownTestSuite() {
        delete root_;
        root_ = nullptr;
    }
    static const fs::path& root() { return *root_; }

private:
    static inline fs::path* root_ = nullptr;
};

TEST(Ingest, GenericThreeLines) {
    const auto dir = testing::scratch_dir("ingest_generic");
    write_text(dir / "in.tsv", kHeader + "D1\tCC\tT1\tMKV\t5.0\nD2\tCN\tT1\tMKV\t6.0\nD1\tCC\tT2\tAKV\t7.5\n");
    const auto manifest = ingest({.input = dir / "in.tsv", .out_dir = dir / "out"});
    EXPECT_EQ(manifest.at("records"), 3);
    EXPECT_EQ(manifest.at("drugs"), 2);
    EXPECT_EQ(manifest.at("targets"), 2);
    EXPECT_EQ(read_json(dir / "out" / kManifestFile), manifest);
    EXPECT_TRUE(fs::exists(dir / "out" / kResolvedConfigFile));
    const auto d = load_dataset(dir / "out");
    ASSERT_EQ(d.pairs.size(), 3u);
    EXPECT_EQ(d.drug_len, 2u);  // longest SMILES for the generic preset
    EXPECT_EQ(d.pairs[1].drug_tokens, data::tokenize("CN", d.drug_vocab, 2));
    EXPECT_EQ(d.pairs[2].label, 7.5);
}

TEST(Ingest, DavisRawKdIsConverted) {
    const auto dir = testing::scratch_dir("ingest_davis");
    write_text(dir / "in.tsv", kHeader + "D1\tCC\tT1\tMKV\t10000\n");
    ingest({.input = dir / "in.tsv", .dataset = "davis", .out_dir = dir / "out", .raw_kd = true});
    const auto d = load_dataset(dir / "out");
    EXPECT_EQ(d.records.at(0).affinity, 5.0);
    EXPECT_EQ(d.drug_len, 85u);
    EXPECT_EQ(d.target_len, 1200u);
}

TEST(Ingest, ErrorsAndUsage) {
    const auto dir = testing::scratch_dir("ingest_errors");
    write_text(dir / "in.tsv", kHeader + "D1\tCC\tT1\tMKV\t0\n");
    EXPECT_THROW(ingest({.input = dir / "in.tsv", .dataset = "bindingdb", .out_dir = dir / "o"}), UsageError);
    EXPECT_THROW(ingest({.input = dir / "in.tsv", .out_dir = dir / "o", .raw_kd = true}), UsageError);
    try {
        ingest({.input = dir / "in.tsv", .dataset = "davis", .out_dir = dir / "o", .raw_kd = true});
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("in.tsv:2"), std::string::npos) << e.what();
    }
}

TEST(Ingest, RerunIsByteIdentical) {
    const auto dir = testing::scratch_dir("ingest_idempotent");
    data::write_tsv(dir / "in.tsv", testing::synthetic_davis({.drugs = 3, .targets = 3}));
    ingest({.input = dir / "in.tsv", .out_dir = dir / "a"});
    const auto first = slurp(dir / "a" / "tokens_target.bin") + slurp(dir / "a" / kManifestFile);
    ingest({.input = dir / "in.tsv", .out_dir = dir / "a"});
    EXPECT_EQ(slurp(dir / "a" / "tokens_target.bin") + slurp(dir / "a" / kManifestFile), first);
}

TEST(TokenFile, RoundTripAndCorruption) {
    const auto dir = testing::scratch_dir("token_file");
    const TokenMatrix m{2, 3, {1, 2, 3, 0, 65535, 7}};
    write_token_file(dir / "t.bin", m);
    const auto back = read_token_file(dir / "t.bin");
    EXPECT_EQ(back.rows, 2u);
    EXPECT_EQ(back.cols, 3u);
    EXPECT_EQ(back.data, m.data);
    EXPECT_EQ(fs::file_size(dir / "t.bin"), 4u + 2 + 4 + 4 + 6 * 2);
    write_text(dir / "bad.bin", "NOPE");
    EXPECT_THROW(read_token_file(dir / "bad.bin"), std::runtime_error);
    EXPECT_THROW(write_token_file(dir / "x.bin", TokenMatrix{1, 1, {70000}}), std::invalid_argument);
}

TEST_F(PipelineTest, SplitIsByteIdenticalForTheSameSeed) {
    const auto first = slurp(root() / "split" / kSplitFile);
    split({.data_dir = root() / "ds", .seed = 7, .out_dir = root() / "split2"});
    EXPECT_EQ(slurp(root() / "split2" / kSplitFile), first);
    EXPECT_THROW(split({.data_dir = root() / "ds", .drug_frac = 1.5, .out_dir = root() / "x"}), UsageError);
}

TEST(Split, EmptyBucketsWarn) {
    const auto dir = testing::scratch_dir("split_empty");
    write_text(dir / "in.tsv", kHeader + "D1\tCC\tT1\tMKV\t5.0\n");
    ingest({.input = dir / "in.tsv", .out_dir = dir / "ds"});
    const auto s = split({.data_dir = dir / "ds", .out_dir = dir / "sp"});
    EXPECT_EQ(s.warnings.size(), 3u);
    EXPECT_EQ(s.train.size(), 1u);
}

TEST_F(PipelineTest, TrainWritesCheckpointsLogsAndConfig) {
    for (const char* f : {"stage1.ckpt", "stage1.adam", "stage2.ckpt", "stage2.adam", "model.json", "train_log.jsonl",
                          "timing.jsonl", "config.resolved.json"})
        EXPECT_TRUE(fs::exists(root() / "ckpt" / f)) << f;
    const auto log = lines(slurp(root() / "ckpt" / kTrainLogFile));
    ASSERT_EQ(log.size(), 4u);
    EXPECT_EQ(nlohmann::json::parse(log[0]).at("stage"), 1);
    EXPECT_EQ(nlohmann::json::parse(log[3]).at("stage"), 2);
    EXPECT_EQ(load_model(root() / "ckpt" / "stage2.ckpt").stage, 2);
}

TEST_F(PipelineTest, StageTwoRerunKeepsStageOneLog) {
    const auto dir = root() / "ckpt_rerun";
    fs::create_directories(dir);
    for (const char* f : {"stage1.ckpt", "stage1.adam", kTrainLogFile}) fs::copy_file(root() / "ckpt" / f, dir / f);
    training::RunConfig run;
    run.epochs = 2;
    run.batch_size = 16;
    run.model_preset = "compact";
    run.stage = training::StageSelection::two;
    run.dataset_dir = (root() / "ds").string();
    run.split_path = (root() / "split").string();
    run.checkpoint_dir = dir.string();
    train(run);
    EXPECT_EQ(slurp(dir / kTrainLogFile), slurp(root() / "ckpt" / kTrainLogFile));
    EXPECT_EQ(slurp(dir / "stage2.ckpt"), slurp(root() / "ckpt" / "stage2.ckpt"));
}

TEST_F(PipelineTest, StageTwoNeedsStageOneCheckpoint) {
    training::RunConfig run;
    run.stage = training::StageSelection::two;
    run.model_preset = "compact";
    run.dataset_dir = (root() / "ds").string();
    run.checkpoint_dir = (root() / "empty_ckpt").string();
    EXPECT_THROW(train(run), std::runtime_error);
}

TEST_F(PipelineTest, PredictOnePairGivesOneRow) {
    const auto dir = root() / "predict_one";
    fs::create_directories(dir);
    const auto d = load_dataset(root() / "ds");
    const auto& r = d.records.at(0);
    write_text(dir / "pair.tsv", "drug_id\tsmiles\ttarget_id\tsequence\n" + r.drug_id + "\t" + r.smiles + "\t" +
                                     r.target_id + "\t" + r.sequence + "\n");
    const auto rows = predict({.data_dir = root() / "ds",
                               .checkpoint = root() / "ckpt" / "stage2.ckpt",
                               .input = dir / "pair.tsv",
                               .mode = "diff",
                               .out_dir = dir / "out"});
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_FALSE(rows[0].y_true.has_value());
    const auto text = lines(slurp(dir / "out" / "predictions.tsv"));
    ASSERT_EQ(text.size(), 2u);
    EXPECT_EQ(text[0], "drug_id\ttarget_id\tsetting\ty_true\ty_hat");
    EXPECT_TRUE(fs::exists(dir / "out" / kResolvedConfigFile));

    predict({.data_dir = root() / "ds",
             .checkpoint = root() / "ckpt" / "stage2.ckpt",
             .input = dir / "pair.tsv",
             .format = "json",
             .out_dir = dir / "json"});
    EXPECT_EQ(read_json(dir / "json" / "predictions.json").at("predictions").size(), 1u);
}

TEST_F(PipelineTest, PredictRejectsBadOptions) {
    const PredictOptions base{.data_dir = root() / "ds", .checkpoint = root() / "ckpt" / "stage1.ckpt",
                              .out_dir = root() / "bad"};
    auto opt = base;
    opt.format = "csv";
    EXPECT_THROW(predict(opt), UsageError);
    opt = base;
    opt.mode = "mean";
    EXPECT_THROW(predict(opt), UsageError);
    opt = base;
    opt.subset = "ud";
    EXPECT_THROW(predict(opt), UsageError);
    opt = base;
    opt.mode = "diff";
    EXPECT_THROW(predict(opt), std::runtime_error);  // stage-one checkpoint
}

TEST_F(PipelineTest, EvalPerfectPredictions) {
    const auto dir = root() / "eval_perfect";
    fs::create_directories(dir);
    write_text(dir / "p.tsv", "drug_id\ttarget_id\tsetting\ty_true\ty_hat\n"
                              "D1\tT1\tud\t5.0\t5.0\nD2\tT1\tud\t6.5\t6.5\nD3\tT2\tud\t7.0\t7.0\nD4\tT3\tud\t5.5\t5.5\n");
    const auto result = evaluate({.predictions = dir / "p.tsv", .out_dir = dir / "out"});
    ASSERT_EQ(result.at("reports").size(), 1u);
    const auto& r = result.at("reports")[0];
    EXPECT_EQ(r.at("mse"), 0.0);
    EXPECT_EQ(r.at("ci"), 1.0);
    EXPECT_DOUBLE_EQ(r.at("rm2").get<double>(), 1.0);
    EXPECT_TRUE(fs::exists(dir / "out" / "eval_ud.json"));
}

TEST_F(PipelineTest, EvalModelPerSetting) {
    const auto result = evaluate({.data_dir = root() / "ds",
                                  .split_path = root() / "split",
                                  .checkpoint = root() / "ckpt" / "stage2.ckpt",
                                  .mode = "diff",
                                  .out_dir = root() / "eval_model"});
    std::size_t covered = result.at("reports").size() + result.at("warnings").size();
    EXPECT_EQ(covered, 3u);
    for (const auto& r : result.at("reports")) {
        EXPECT_GE(r.at("ci").get<double>(), 0.0);
        EXPECT_LE(r.at("rm2").get<double>(), 1.0);
    }
}

TEST_F(PipelineTest, ExportEmbeddingsOneRowPerEntity) {
    export_embeddings({.data_dir = root() / "ds", .checkpoint = root() / "ckpt" / "stage1.ckpt",
                       .out_dir = root() / "emb"});
    const auto drugs = lines(slurp(root() / "emb" / "drug_embeddings.csv"));
    const auto targets = lines(slurp(root() / "emb" / "target_embeddings.csv"));
    EXPECT_EQ(drugs.size(), 16u);  // header plus one row per entity
    EXPECT_EQ(targets.size(), 16u);
    EXPECT_EQ(drugs[0].rfind("drug_id,z0,z1,", 0), 0u);
}

TEST(Report, OutOfSampleSquaredErrors) {
    const fs::path table = fs::path(CODIFF_TEST_DATA_DIR) / "out_of_sample.tsv";
    const auto dir = testing::scratch_dir("report_oos");
    report({.predictions = {table}, .out_dir = dir});
    const auto rows = lines(slurp(dir / "scatter.csv"));
    ASSERT_EQ(rows.size(), 21u);
    EXPECT_EQ(rows[0], "source,id,drug_id,target_id,setting,y_true,y_hat,identity,sq_err,sq_err_rounded");
    const auto published = lines(slurp(table));
    std::size_t exact = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        std::vector<std::string> f;
        std::istringstream csv(rows[i]);
        for (std::string cell; std::getline(csv, cell, ',');) f.push_back(cell);
        std::vector<std::string> p;
        std::istringstream tsv(published[i]);
        for (std::string cell; std::getline(tsv, cell, '\t');) p.push_back(cell);
        ASSERT_EQ(f[1], p[0]);
        const double y = std::stod(p[2]), y_hat = std::stod(p[3]), pub = std::stod(p[4]);
        EXPECT_EQ(std::stod(f[7]), y);
        if (std::stod(f[9]) == pub) ++exact;
        EXPECT_TRUE(testing::squared_error_attainable(y, y_hat, pub, 3)) << p[0];
    }
    EXPECT_EQ(exact, 19u);
    EXPECT_EQ(rows[1].substr(rows[1].size() - 6), ",0.001");
}

TEST(Report, NeedsInputs) { EXPECT_THROW(report({.out_dir = "x"}), UsageError); }

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CODIFF_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
    const auto dir = testing::scratch_dir("cli_exit");
    write_text(dir / "in.tsv", kHeader + "D1\tCC\tT1\tMKV\t10000\n");
    const std::string in = (dir / "in.tsv").string(), out = (dir / "ds").string();
    EXPECT_EQ(run_cli("ingest --input " + in + " --dataset davis --raw-kd --out " + out), 0);
    EXPECT_EQ(run_cli("ingest --input " + in + " --dataset foo --out " + out), 2);
    EXPECT_EQ(run_cli("ingest --input " + (dir / "missing.tsv").string() + " --out " + out), 1);
    EXPECT_EQ(run_cli("split --manifest " + out + " --drug-frac 1.5 --out " + (dir / "sp").string()), 2);
    EXPECT_EQ(run_cli("split --manifest " + out + " --out " + (dir / "sp").string()), 0);
    EXPECT_EQ(run_cli("train --data " + out + " --stage 2 --out " + (dir / "ck").string()), 1);
    EXPECT_EQ(run_cli("train --data " + out + " --stage 3 --out " + (dir / "ck").string()), 2);
    EXPECT_EQ(run_cli("frobnicate"), 2);
    EXPECT_EQ(run_cli(""), 2);
}

TEST(Cli, ConfigFileWithFlagOverride) {
    const auto dir = testing::scratch_dir("cli_config");
    data::write_tsv(dir / "in.tsv", testing::small_problem(3, 3, 20, 40).records);
    ASSERT_EQ(run_cli("ingest --input " + (dir / "in.tsv").string() + " --drug-len 20 --target-len 40 --out " +
                      (dir / "ds").string()),
              0);
    write_json(dir / "run.json", {{"epochs", 1}, {"batch_size", 4}, {"seed", 5}, {"model_preset", "compact"},
                                  {"dataset_dir", (dir / "ds").string()}, {"stage", "1"}});
    ASSERT_EQ(run_cli("train --config " + (dir / "run.json").string() + " --seed 11 --out " + (dir / "ck").string()), 0);
    const auto resolved = read_json(dir / "ck" / kResolvedConfigFile).at("config");
    EXPECT_EQ(resolved.at("seed"), 11);
    EXPECT_EQ(resolved.at("batch_size"), 4);
    EXPECT_EQ(resolved.at("epochs"), 1);
    EXPECT_EQ(resolved.at("lr"), 1e-3);
    write_json(dir / "bad.json", {{"epoch", 1}});
    EXPECT_EQ(run_cli("train --config " + (dir / "bad.json").string() + " --out " + (dir / "ck2").string()), 2);
}

}  // namespace
}  // namespace codiff::pipeline
