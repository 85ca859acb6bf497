#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "codiff/pipeline.hpp"

namespace {

namespace pl = codiff::pipeline;
namespace tr = codiff::training;

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

void print_split(const codiff::data::ColdStartSplit& s) {
    std::cout << "drugs: " << s.old_drugs() << " old / " << s.new_drugs() << " new\n";
    std::cout << "targets: " << s.old_targets() << " old / " << s.new_targets() << " new\n";
    std::cout << "train: " << s.train.size() << " pairs\n";
    for (auto setting : codiff::data::kSettings) {
        const auto& part = s.setting(setting);
        std::cout << codiff::data::to_string(setting) << ": " << part.validation.size() << " validation / "
                  << part.test.size() << " test pairs\n";
    }
    for (const auto& w : s.warnings) std::cerr << "warning: " << w << '\n';
}

struct TrainFlags {
    std::string config;
    std::string data;
    std::string split;
    std::string out;
    std::string stage;
    std::string preset;
    int epochs = 0;
    std::size_t batch_size = 0;
    double lr = 0.0;
    double lambda = 0.0;
    double kl_weight = 0.0;
    int patience = 0;
    std::uint64_t seed = 0;
    int steps = 0;
    int k_star = 0;
    int mc_samples = 0;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"codiff: two-stage latent diffusion for drug-target affinity regression"};
    app.require_subcommand(1, 1);

    pl::IngestOptions ingest;
    auto* c_ingest = app.add_subcommand("ingest", "Tokenize a 5-column TSV into a dataset directory");
    c_ingest->add_option("--input", ingest.input, "TSV: drug_id smiles target_id sequence affinity")->required();
    c_ingest->add_option("--dataset", ingest.dataset, "davis | kiba | generic")->capture_default_str();
    c_ingest->add_option("--out", ingest.out_dir, "Output directory")->required();
    c_ingest->add_flag("--raw-kd", ingest.raw_kd, "Convert raw K_d (nM) labels to pK_d (davis only)");
    c_ingest->add_option("--drug-len", ingest.drug_len, "SMILES token length (0: dataset default)");
    c_ingest->add_option("--target-len", ingest.target_len, "Protein token length (0: dataset default)");

    pl::SplitOptions split;
    auto* c_split = app.add_subcommand("split", "Cold-start drug/target partition");
    c_split->add_option("--manifest", split.data_dir, "Dataset directory or its manifest.json")->required();
    c_split->add_option("--seed", split.seed, "Random seed")->capture_default_str();
    c_split->add_option("--drug-frac", split.drug_frac, "Fraction of old drugs")->capture_default_str();
    c_split->add_option("--target-frac", split.target_frac, "Fraction of old targets")->capture_default_str();
    c_split->add_option("--out", split.out_dir, "Output directory")->required();

    TrainFlags tf;
    auto* c_train = app.add_subcommand("train", "Run Stage I, Stage II or both");
    c_train->add_option("--config", tf.config, "Run config JSON; flags override its values");
    auto* o_data = c_train->add_option("--data", tf.data, "Dataset directory");
    auto* o_tsplit = c_train->add_option("--split", tf.split, "Split directory or split.json");
    auto* o_out = c_train->add_option("--out", tf.out, "Checkpoint directory");
    auto* o_stage = c_train->add_option("--stage", tf.stage, "1 | 2 | both");
    auto* o_preset = c_train->add_option("--preset", tf.preset, "Model widths: full | compact");
    auto* o_epochs = c_train->add_option("--epochs", tf.epochs, "Epochs per stage (at most 100)");
    auto* o_batch = c_train->add_option("--batch-size", tf.batch_size, "Mini-batch size");
    auto* o_lr = c_train->add_option("--lr", tf.lr, "Adam learning rate");
    auto* o_lambda = c_train->add_option("--lambda", tf.lambda, "Affinity loss weight");
    auto* o_kl = c_train->add_option("--kl-weight", tf.kl_weight, "Stage I KL weight");
    auto* o_patience = c_train->add_option("--patience", tf.patience, "Early-stopping patience in epochs");
    auto* o_seed = c_train->add_option("--seed", tf.seed, "Random seed");
    auto* o_steps = c_train->add_option("--steps", tf.steps, "Diffusion steps T");
    auto* o_kstar = c_train->add_option("--k-star", tf.k_star, "Inference step for validation (0: T/2)");
    auto* o_mc = c_train->add_option("--mc-samples", tf.mc_samples, "Noise draws averaged in validation");

    pl::PredictOptions pred;
    auto* c_predict = app.add_subcommand("predict", "Predict affinities for pairs");
    c_predict->add_option("--data", pred.data_dir, "Dataset directory (vocabularies)")->required();
    c_predict->add_option("--checkpoint", pred.checkpoint, "stage1.ckpt or stage2.ckpt")->required();
    c_predict->add_option("--input", pred.input, "TSV of pairs (affinity column optional)");
    c_predict->add_option("--split", pred.split_path, "Split used with --subset");
    c_predict->add_option("--subset", pred.subset, "all | train | ud | ut | up")->capture_default_str();
    c_predict->add_option("--mode", pred.mode, "var | diff")->capture_default_str();
    c_predict->add_option("--seed", pred.seed, "Random seed")->capture_default_str();
    c_predict->add_option("--k-star", pred.k_star, "Diffusion step for diff mode (0: T/2)");
    c_predict->add_option("--mc-samples", pred.mc_samples, "Noise draws averaged in diff mode")->capture_default_str();
    c_predict->add_option("--batch-size", pred.batch_size, "Batch size")->capture_default_str();
    c_predict->add_option("--format", pred.format, "tsv | json")->capture_default_str();
    c_predict->add_option("--out", pred.out_dir, "Output directory")->required();

    pl::EvalOptions ev;
    auto* c_eval = app.add_subcommand("eval", "Metrics per cold-start setting");
    c_eval->add_option("--data", ev.data_dir, "Dataset directory");
    c_eval->add_option("--split", ev.split_path, "Split directory or split.json");
    c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint to evaluate");
    c_eval->add_option("--predictions", ev.predictions, "Evaluate a prediction TSV instead of a model");
    c_eval->add_option("--subset", ev.subset, "test | validation")->capture_default_str();
    c_eval->add_option("--mode", ev.mode, "var | diff")->capture_default_str();
    c_eval->add_option("--seed", ev.seed, "Random seed")->capture_default_str();
    c_eval->add_option("--k-star", ev.k_star, "Diffusion step for diff mode (0: T/2)");
    c_eval->add_option("--mc-samples", ev.mc_samples, "Noise draws averaged in diff mode")->capture_default_str();
    c_eval->add_option("--batch-size", ev.batch_size, "Batch size")->capture_default_str();
    c_eval->add_option("--out", ev.out_dir, "Output directory")->required();

    pl::ExportOptions ex;
    auto* c_export = app.add_subcommand("export-embeddings", "Write posterior-mean latents per entity as CSV");
    c_export->add_option("--data", ex.data_dir, "Dataset directory")->required();
    c_export->add_option("--checkpoint", ex.checkpoint, "Checkpoint")->required();
    c_export->add_option("--out", ex.out_dir, "Output directory")->required();

    pl::ReportOptions rep;
    auto* c_report = app.add_subcommand("report", "Collate metrics and predictions into CSV");
    c_report->add_option("--eval", rep.evals, "metrics.json files or eval directories");
    c_report->add_option("--predictions", rep.predictions, "Prediction tables");
    c_report->add_option("--decimals", rep.decimals, "Decimals of the rounded squared error")->capture_default_str();
    c_report->add_option("--out", rep.out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (*c_ingest) {
            const auto manifest = pl::ingest(ingest);
            std::cout << "records: " << manifest.at("records") << "\ndrugs: " << manifest.at("drugs")
                      << "\ntargets: " << manifest.at("targets") << '\n';
        } else if (*c_split) {
            print_split(pl::split(split));
        } else if (*c_train) {
            tr::RunConfig run;
            if (!tf.config.empty()) {
                try {
                    run = tr::RunConfig::from_json(pl::read_json(tf.config));
                } catch (const nlohmann::json::exception& e) {
                    throw pl::UsageError(tf.config + ": " + e.what());
                } catch (const std::invalid_argument& e) {
                    throw pl::UsageError(tf.config + ": " + e.what());
                }
            }
            if (o_data->count()) run.dataset_dir = tf.data;
            if (o_tsplit->count()) run.split_path = tf.split;
            if (o_out->count()) run.checkpoint_dir = tf.out;
            if (o_stage->count()) {
                try {
                    run.stage = tr::stage_selection_from_string(tf.stage);
                } catch (const std::invalid_argument& e) {
                    throw pl::UsageError(e.what());
                }
            }
            if (o_preset->count()) run.model_preset = tf.preset;
            if (o_epochs->count()) run.epochs = tf.epochs;
            if (o_batch->count()) run.batch_size = tf.batch_size;
            if (o_lr->count()) run.lr = tf.lr;
            if (o_lambda->count()) run.lambda = tf.lambda;
            if (o_kl->count()) run.kl_weight = tf.kl_weight;
            if (o_patience->count()) run.patience = tf.patience;
            if (o_seed->count()) run.seed = tf.seed;
            if (o_steps->count()) run.diffusion_steps = tf.steps;
            if (o_kstar->count()) run.k_star = tf.k_star;
            if (o_mc->count()) run.mc_samples = tf.mc_samples;
            for (const auto& s : pl::train(run)) {
                std::cout << "stage " << s.stage << ": " << s.epochs_run << " epochs";
                if (s.best_selection_mse)
                    std::cout << ", best epoch " << s.best_epoch << " (validation mse "
                              << pl::format_double(*s.best_selection_mse) << ")";
                std::cout << '\n';
            }
        } else if (*c_predict) {
            const auto rows = pl::predict(pred);
            std::cout << "predictions: " << rows.size() << '\n';
        } else if (*c_eval) {
            const auto result = pl::evaluate(ev);
            for (const auto& r : result.at("reports"))
                std::cout << r.at("setting").get<std::string>() << ": n=" << r.at("n") << " mse=" << r.at("mse")
                          << " ci=" << r.at("ci") << " rm2=" << r.at("rm2") << '\n';
            for (const auto& w : result.at("warnings")) std::cerr << "warning: " << w.get<std::string>() << '\n';
        } else if (*c_export) {
            pl::export_embeddings(ex);
        } else if (*c_report) {
            pl::report(rep);
        }
    } catch (const pl::UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return EXIT_SUCCESS;
}
