#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "codiff/data.hpp"
#include "codiff/training.hpp"

// File-level workflow behind the command-line tool: every step reads and
// writes a directory and echoes its resolved configuration there.
namespace codiff::pipeline {

// Bad option values; the CLI maps these to exit code 2.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline constexpr const char* kResolvedConfigFile = "config.resolved.json";
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kSplitFile = "split.json";
inline constexpr const char* kModelFile = "model.json";
inline constexpr const char* kTrainLogFile = "train_log.jsonl";
inline constexpr const char* kTimingFile = "timing.jsonl";

nlohmann::json read_json(const std::filesystem::path& path);
// Pretty-printed with a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
void write_resolved_config(const std::filesystem::path& dir, const std::string& command, const nlohmann::json& config);

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

// Token matrices: "CODT" | u16 version | u32 rows | u32 cols | u16 tokens,
// all little-endian.
struct TokenMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int32_t> data;
};

void write_token_file(const std::filesystem::path& path, const TokenMatrix& m);
TokenMatrix read_token_file(const std::filesystem::path& path);

struct IngestOptions {
    std::filesystem::path input;
    std::string dataset = "generic";  // davis | kiba | generic
    std::filesystem::path out_dir;
    bool raw_kd = false;             // davis only: convert K_d (nM) labels to pK_d
    std::size_t drug_len = 0;        // 0: dataset preset (or longest string for generic)
    std::size_t target_len = 0;

    nlohmann::json to_json() const;
};

// Writes manifest.json, records.tsv, vocab_smiles.json, vocab_protein.json,
// tokens_drug.bin and tokens_target.bin. Returns the manifest.
nlohmann::json ingest(const IngestOptions& opt);

struct Dataset {
    nlohmann::json manifest;
    std::vector<data::AffinityRecord> records;
    data::Vocabulary drug_vocab;
    data::Vocabulary target_vocab;
    std::size_t drug_len = 0;
    std::size_t target_len = 0;
    std::vector<data::TokenizedPair> pairs;

    training::EncodedDataset encoded() const;
};

Dataset load_dataset(const std::filesystem::path& dir);

struct SplitOptions {
    std::filesystem::path data_dir;
    std::uint64_t seed = 0;
    double drug_frac = 0.8;
    double target_frac = 0.8;
    std::filesystem::path out_dir;

    nlohmann::json to_json() const;
};

// Writes split.json; warnings for empty buckets are kept in the result.
data::ColdStartSplit split(const SplitOptions& opt);
data::ColdStartSplit load_split(const std::filesystem::path& path, const Dataset& dataset);

// Model configuration for a dataset: preset widths plus JSON overrides.
training::ModelConfig resolve_model_config(const training::RunConfig& run, const Dataset& dataset);

struct StageSummary {
    int stage = 0;
    int epochs_run = 0;
    int best_epoch = 0;
    std::optional<double> best_selection_mse;
};

// Runs the configured stages, writing stage{1,2}.ckpt (+ .adam), model.json,
// train_log.jsonl and timing.jsonl into run.checkpoint_dir.
std::vector<StageSummary> train(const training::RunConfig& run);

struct LoadedModel {
    training::Model model;
    int stage = 0;
};

// Reads model.json next to the checkpoint, then the checkpoint values.
LoadedModel load_model(const std::filesystem::path& checkpoint);

struct PredictionRow {
    std::string drug_id;
    std::string target_id;
    std::string setting;
    std::optional<double> y_true;
    double y_hat = 0.0;
};

struct PredictOptions {
    std::filesystem::path data_dir;    // vocabularies and token lengths
    std::filesystem::path checkpoint;
    std::filesystem::path input;       // optional TSV of pairs; default: the dataset records
    std::filesystem::path split_path;  // optional; with `subset`, selects records
    std::string subset = "all";        // all | train | ud | ut | up (test part of a setting)
    std::string mode = "var";
    std::uint64_t seed = 0;
    int k_star = 0;
    int mc_samples = 1;
    std::size_t batch_size = 64;
    std::string format = "tsv";        // tsv | json
    std::filesystem::path out_dir;

    nlohmann::json to_json() const;
};

std::vector<PredictionRow> predict(const PredictOptions& opt);

// Header: drug_id, target_id, setting, y_true, y_hat (empty y_true when unknown).
void write_predictions_tsv(const std::filesystem::path& path, const std::vector<PredictionRow>& rows);
void write_predictions_json(const std::filesystem::path& path, const std::vector<PredictionRow>& rows);

// Header-driven: needs y_true and y_hat columns; id, drug_id, target_id and
// setting are optional.
struct ScatterRow {
    std::string id;
    std::string drug_id;
    std::string target_id;
    std::string setting;
    double y_true = 0.0;
    double y_hat = 0.0;
};
std::vector<ScatterRow> read_prediction_table(const std::filesystem::path& path);

struct EvalOptions {
    std::filesystem::path data_dir;
    std::filesystem::path split_path;
    std::filesystem::path checkpoint;
    std::filesystem::path predictions;  // alternative input: a prediction table
    std::string subset = "test";        // test | validation
    std::string mode = "var";
    std::uint64_t seed = 0;
    int k_star = 0;
    int mc_samples = 1;
    std::size_t batch_size = 64;
    std::filesystem::path out_dir;

    nlohmann::json to_json() const;
};

// Writes metrics.json and eval_<setting>.json. Settings without pairs are
// skipped with a warning in the result.
nlohmann::json evaluate(const EvalOptions& opt);

struct ExportOptions {
    std::filesystem::path data_dir;
    std::filesystem::path checkpoint;
    std::filesystem::path out_dir;

    nlohmann::json to_json() const;
};

// drug_embeddings.csv and target_embeddings.csv with the posterior means.
void export_embeddings(const ExportOptions& opt);

struct ReportOptions {
    std::vector<std::filesystem::path> evals;        // metrics.json files or directories holding one
    std::vector<std::filesystem::path> predictions;  // prediction tables
    int decimals = 3;
    std::filesystem::path out_dir;

    nlohmann::json to_json() const;
};

// scatter.csv (one row per prediction, identity column = y_true) and
// summary.csv (one row per evaluated setting).
void report(const ReportOptions& opt);

}  // namespace codiff::pipeline
