#include "codiff/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "codiff/checkpoint.hpp"
#include "codiff/metrics.hpp"

namespace codiff::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kTokenMagic[4] = {'C', 'O', 'D', 'T'};
constexpr std::uint16_t kTokenVersion = 1;
constexpr const char* kPairsHeader = "drug_id\tsmiles\ttarget_id\tsequence";
constexpr const char* kPredictionHeader = "drug_id\ttarget_id\tsetting\ty_true\ty_hat";

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, mode | std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

std::ifstream open_in(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return in;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) return out;
        start = tab + 1;
    }
}

double parse_double(const std::string& text, const std::string& where) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(v))
        throw std::runtime_error(where + ": unparsable number '" + text + "'");
    return v;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string fixed(double v, int decimals) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, decimals);
    return std::string(buf, res.ptr);
}

void put_u16(std::ostream& out, std::uint16_t v) {
    const char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
    out.write(b, 2);
}

void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 4);
}

std::uint16_t get_u16(std::istream& in, const fs::path& path) {
    unsigned char b[2];
    if (!in.read(reinterpret_cast<char*>(b), 2)) throw std::runtime_error(path.string() + ": truncated token file");
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& in, const fs::path& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error(path.string() + ": truncated token file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
}

training::PredictMode parse_mode(const std::string& mode) {
    try {
        return training::predict_mode_from_string(mode);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

}  // namespace

json read_json(const fs::path& path) {
    auto in = open_in(path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path.string() + ": invalid JSON: " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    auto out = open_out(path);
    out << j.dump(2) << '\n';
}

void write_resolved_config(const fs::path& dir, const std::string& command, const json& config) {
    write_json(dir / kResolvedConfigFile, {{"command", command}, {"config", config}});
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

void write_token_file(const fs::path& path, const TokenMatrix& m) {
    if (m.data.size() != m.rows * m.cols) throw std::invalid_argument("token matrix size does not match its shape");
    auto out = open_out(path);
    out.write(kTokenMagic, 4);
    put_u16(out, kTokenVersion);
    put_u32(out, static_cast<std::uint32_t>(m.rows));
    put_u32(out, static_cast<std::uint32_t>(m.cols));
    for (std::int32_t t : m.data) {
        if (t < 0 || t > 0xFFFF) throw std::invalid_argument("token " + std::to_string(t) + " does not fit in 16 bits");
        put_u16(out, static_cast<std::uint16_t>(t));
    }
}

TokenMatrix read_token_file(const fs::path& path) {
    auto in = open_in(path);
    char magic[4];
    if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kTokenMagic))
        throw std::runtime_error(path.string() + ": not a token file");
    const std::uint16_t version = get_u16(in, path);
    if (version != kTokenVersion)
        throw std::runtime_error(path.string() + ": unsupported token file version " + std::to_string(version));
    TokenMatrix m;
    m.rows = get_u32(in, path);
    m.cols = get_u32(in, path);
    m.data.resize(m.rows * m.cols);
    for (auto& t : m.data) t = get_u16(in, path);
    if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error(path.string() + ": trailing bytes");
    return m;
}

json IngestOptions::to_json() const {
    return {{"input", input.string()},     {"dataset", dataset},   {"out", out_dir.string()},
            {"raw_kd", raw_kd},            {"drug_len", drug_len}, {"target_len", target_len}};
}

json ingest(const IngestOptions& opt) {
    data::DatasetPreset preset;
    try {
        preset = data::dataset_preset(opt.dataset);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (opt.raw_kd && opt.dataset != "davis") throw UsageError("--raw-kd applies only to --dataset davis");
    if (opt.out_dir.empty()) throw UsageError("an output directory is required");
    auto records = data::load_tsv(opt.input);
    if (records.empty()) throw std::runtime_error(opt.input.string() + ": no records");
    if (opt.raw_kd) {
        for (std::size_t i = 0; i < records.size(); ++i) {
            try {
                records[i].affinity = data::kd_to_pkd(records[i].affinity);
            } catch (const std::domain_error& e) {
                // Line numbers count the header as line 1.
                throw std::runtime_error(opt.input.string() + ":" + std::to_string(i + 2) + ": " + e.what());
            }
        }
    }
    const auto stats = data::dataset_stats(records);
    const std::size_t drug_len = opt.drug_len ? opt.drug_len : (preset.drug_len ? preset.drug_len : stats.max_smiles_len);
    const std::size_t target_len =
        opt.target_len ? opt.target_len : (preset.target_len ? preset.target_len : stats.max_sequence_len);
    const auto drug_vocab = data::build_vocab(records, data::VocabKind::smiles);
    const auto target_vocab = data::build_vocab(records, data::VocabKind::protein);
    const auto pairs = data::tokenize_records(records, drug_vocab, target_vocab, drug_len, target_len);

    fs::create_directories(opt.out_dir);
    data::write_tsv(opt.out_dir / "records.tsv", records);
    write_json(opt.out_dir / "vocab_smiles.json", drug_vocab.to_json());
    write_json(opt.out_dir / "vocab_protein.json", target_vocab.to_json());
    TokenMatrix drugs{records.size(), drug_len, {}}, targets{records.size(), target_len, {}};
    for (const auto& p : pairs) {
        drugs.data.insert(drugs.data.end(), p.drug_tokens.begin(), p.drug_tokens.end());
        targets.data.insert(targets.data.end(), p.target_tokens.begin(), p.target_tokens.end());
    }
    write_token_file(opt.out_dir / "tokens_drug.bin", drugs);
    write_token_file(opt.out_dir / "tokens_target.bin", targets);

    const json manifest = {
        {"format", "codiff-dataset"},
        {"version", 1},
        {"dataset", opt.dataset},
        {"source", opt.input.filename().string()},
        {"label", opt.raw_kd ? "pKd converted from raw Kd (nM)" : "as given"},
        {"raw_kd_converted", opt.raw_kd},
        {"records", stats.records},
        {"drugs", stats.drugs},
        {"targets", stats.targets},
        {"drug_len", drug_len},
        {"target_len", target_len},
        {"max_smiles_len", stats.max_smiles_len},
        {"max_sequence_len", stats.max_sequence_len},
        {"drug_vocab_size", drug_vocab.size()},
        {"target_vocab_size", target_vocab.size()},
        {"files",
         {{"records", "records.tsv"},
          {"vocab_smiles", "vocab_smiles.json"},
          {"vocab_protein", "vocab_protein.json"},
          {"tokens_drug", "tokens_drug.bin"},
          {"tokens_target", "tokens_target.bin"}}}};
    write_json(opt.out_dir / kManifestFile, manifest);
    write_resolved_config(opt.out_dir, "ingest", opt.to_json());
    return manifest;
}

training::EncodedDataset Dataset::encoded() const {
    return training::EncodedDataset::from_pairs(pairs, drug_len, target_len);
}

Dataset load_dataset(const fs::path& dir) {
    Dataset d;
    const fs::path manifest_path = fs::is_directory(dir) ? dir / kManifestFile : dir;
    const fs::path root = manifest_path.parent_path();
    d.manifest = read_json(manifest_path);
    if (d.manifest.value("format", "") != "codiff-dataset")
        throw std::runtime_error(manifest_path.string() + ": not a dataset manifest");
    const auto& files = d.manifest.at("files");
    d.records = data::load_tsv(root / files.at("records").get<std::string>());
    d.drug_vocab = data::Vocabulary::from_json(read_json(root / files.at("vocab_smiles").get<std::string>()));
    d.target_vocab = data::Vocabulary::from_json(read_json(root / files.at("vocab_protein").get<std::string>()));
    d.drug_len = d.manifest.at("drug_len").get<std::size_t>();
    d.target_len = d.manifest.at("target_len").get<std::size_t>();
    const auto drugs = read_token_file(root / files.at("tokens_drug").get<std::string>());
    const auto targets = read_token_file(root / files.at("tokens_target").get<std::string>());
    if (drugs.rows != d.records.size() || targets.rows != d.records.size() || drugs.cols != d.drug_len ||
        targets.cols != d.target_len)
        throw std::runtime_error(root.string() + ": token files do not match the manifest");
    d.pairs.resize(d.records.size());
    for (std::size_t i = 0; i < d.records.size(); ++i) {
        auto& p = d.pairs[i];
        p.drug_tokens.assign(drugs.data.begin() + static_cast<std::ptrdiff_t>(i * drugs.cols),
                             drugs.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * drugs.cols));
        p.target_tokens.assign(targets.data.begin() + static_cast<std::ptrdiff_t>(i * targets.cols),
                               targets.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * targets.cols));
        p.label = d.records[i].affinity;
    }
    return d;
}

json SplitOptions::to_json() const {
    return {{"data", data_dir.string()}, {"seed", seed},          {"drug_frac", drug_frac},
            {"target_frac", target_frac}, {"out", out_dir.string()}};
}

data::ColdStartSplit split(const SplitOptions& opt) {
    for (double f : {opt.drug_frac, opt.target_frac})
        if (!(f > 0.0 && f < 1.0)) throw UsageError("fractions must lie strictly between 0 and 1, got " + format_double(f));
    if (opt.out_dir.empty()) throw UsageError("an output directory is required");
    const Dataset d = load_dataset(opt.data_dir);
    auto s = data::cold_start_split(d.records, opt.drug_frac, opt.target_frac, opt.seed);
    fs::create_directories(opt.out_dir);
    write_json(opt.out_dir / kSplitFile, s.to_json());
    write_resolved_config(opt.out_dir, "split", opt.to_json());
    return s;
}

data::ColdStartSplit load_split(const fs::path& path, const Dataset& dataset) {
    const fs::path file = fs::is_directory(path) ? path / kSplitFile : path;
    auto s = data::ColdStartSplit::from_json(read_json(file));
    const auto problems = data::validate_split(s, dataset.records);
    if (!problems.empty())
        throw std::runtime_error(file.string() + ": split does not match the dataset: " + problems.front());
    return s;
}

training::ModelConfig resolve_model_config(const training::RunConfig& run, const Dataset& dataset) {
    training::ModelConfig base;
    try {
        base = training::ModelConfig::preset(run.model_preset, dataset.drug_vocab.size(), dataset.target_vocab.size());
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    json j = base.to_json();
    j.merge_patch(run.model_overrides);
    auto cfg = training::ModelConfig::from_json(j);
    cfg.drug_encoder.vocab_size = dataset.drug_vocab.size();
    cfg.target_encoder.vocab_size = dataset.target_vocab.size();
    cfg.validate();
    return cfg;
}

namespace {

// Keeps only the lines of a JSON-lines file whose "stage" is below `stage`,
// so re-running a stage replaces its own entries.
void truncate_log_from_stage(const fs::path& path, int stage) {
    std::vector<std::string> keep;
    if (fs::exists(path)) {
        auto in = open_in(path);
        std::string line;
        while (std::getline(in, line))
            if (!line.empty() && json::parse(line).value("stage", 0) < stage) keep.push_back(line);
    }
    auto out = open_out(path);
    for (const auto& l : keep) out << l << '\n';
}

void append_line(const fs::path& path, const json& j) {
    auto out = open_out(path, std::ios::app);
    out << j.dump() << '\n';
}

StageSummary summarize(int stage, const training::StageResult& r) {
    return {stage, static_cast<int>(r.logs.size()), r.best_epoch, r.best_selection_mse};
}

}  // namespace

std::vector<StageSummary> train(const training::RunConfig& run) {
    try {
        run.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (run.dataset_dir.empty()) throw UsageError("a dataset directory is required");
    if (run.checkpoint_dir.empty()) throw UsageError("an output directory is required");
    const fs::path out = run.checkpoint_dir;
    const fs::path stage1 = out / "stage1.ckpt";
    const fs::path stage2 = out / "stage2.ckpt";
    if (run.stage == training::StageSelection::two && !fs::exists(stage1))
        throw std::runtime_error("stage 2 requires a stage-1 checkpoint, but " + stage1.string() + " does not exist");

    const Dataset dataset = load_dataset(run.dataset_dir);
    const auto encoded = dataset.encoded();
    training::EncodedDataset train_set;
    std::vector<training::ValidationSet> validation;
    if (!run.split_path.empty()) {
        const auto s = load_split(run.split_path, dataset);
        train_set = encoded.subset(s.train);
        for (auto setting : data::kSettings)
            validation.push_back({data::to_string(setting), encoded.subset(s.setting(setting).validation)});
    } else {
        const auto all = all_indices(encoded.size());
        train_set = encoded.subset(all);
    }
    if (train_set.empty()) throw std::runtime_error("the training partition is empty");

    const auto cfg = resolve_model_config(run, dataset);
    training::Model model(cfg, run.schedule(), run.seed);
    fs::create_directories(out);
    write_json(out / kModelFile, {{"model", cfg.to_json()}, {"schedule", model.schedule.to_json()}, {"seed", run.seed}});
    write_resolved_config(out, "train", run.to_json());

    std::vector<StageSummary> summaries;
    auto run_logged = [&](int stage, auto&& body) {
        truncate_log_from_stage(out / kTrainLogFile, stage);
        truncate_log_from_stage(out / kTimingFile, stage);
        auto last = std::chrono::steady_clock::now();
        auto on_epoch = [&](const training::EpochLog& log) {
            const auto now = std::chrono::steady_clock::now();
            append_line(out / kTrainLogFile, log.to_json());
            append_line(out / kTimingFile, {{"stage", log.stage},
                                            {"epoch", log.epoch},
                                            {"seconds", std::chrono::duration<double>(now - last).count()}});
            last = now;
        };
        Rng rng(derive_seed(run.seed, static_cast<std::uint64_t>(stage)));
        summaries.push_back(summarize(stage, body(rng, on_epoch)));
    };

    if (run.stage != training::StageSelection::two) {
        run_logged(1, [&](Rng& rng, const training::EpochCallback& cb) {
            return training::train_stage_one(model, train_set, validation, run, rng, cb);
        });
        training::save_checkpoint(model, 1, stage1);
    }
    if (run.stage != training::StageSelection::one) {
        if (run.stage == training::StageSelection::two) training::load_checkpoint(model, stage1);
        run_logged(2, [&](Rng& rng, const training::EpochCallback& cb) {
            return training::train_stage_two(model, train_set, validation, run, rng, cb);
        });
        training::save_checkpoint(model, 2, stage2);
    }
    return summaries;
}

LoadedModel load_model(const fs::path& checkpoint) {
    if (!fs::exists(checkpoint)) throw std::runtime_error("checkpoint " + checkpoint.string() + " does not exist");
    const json meta = read_json(checkpoint.parent_path() / kModelFile);
    const auto& sched = meta.at("schedule");
    training::Model model(training::ModelConfig::from_json(meta.at("model")),
                          diffusion::build_schedule(sched.at("steps").get<int>(), sched.at("beta_start").get<double>(),
                                                    sched.at("beta_end").get<double>()),
                          meta.value("seed", std::uint64_t{0}));
    const int stage = training::load_checkpoint(model, checkpoint);
    return {std::move(model), stage};
}

json PredictOptions::to_json() const {
    return {{"data", data_dir.string()},
            {"checkpoint", checkpoint.string()},
            {"input", input.string()},
            {"split", split_path.string()},
            {"subset", subset},
            {"mode", mode},
            {"seed", seed},
            {"k_star", k_star},
            {"mc_samples", mc_samples},
            {"batch_size", batch_size},
            {"format", format},
            {"out", out_dir.string()}};
}

namespace {

struct PairInput {
    std::vector<data::AffinityRecord> records;
    std::vector<bool> labeled;
};

// Pairs TSV with or without the affinity column.
PairInput read_pairs(const fs::path& path) {
    PairInput p;
    std::string header;
    {
        auto in = open_in(path);
        std::getline(in, header);
        if (!header.empty() && header.back() == '\r') header.pop_back();
    }
    if (header == data::kTsvHeader) {
        p.records = data::load_tsv(path);
        p.labeled.assign(p.records.size(), true);
        return p;
    }
    if (header != kPairsHeader)
        throw std::runtime_error(path.string() + ":1: expected header '" + std::string(data::kTsvHeader) + "' or '" +
                                 kPairsHeader + "'");
    auto in = open_in(path);
    std::string line;
    std::getline(in, line);
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_tabs(line);
        if (f.size() != 4)
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected 4 tab-separated fields");
        if (f[1].empty() || f[3].empty())
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": empty smiles or sequence");
        p.records.push_back({f[0], f[1], f[2], f[3], 0.0});
        p.labeled.push_back(false);
    }
    return p;
}

std::vector<double> run_model(training::Model& model, const std::vector<data::AffinityRecord>& records,
                              const Dataset& dataset, const training::PredictOptions& popt) {
    const auto pairs =
        data::tokenize_records(records, dataset.drug_vocab, dataset.target_vocab, dataset.drug_len, dataset.target_len);
    return training::predict(model, training::EncodedDataset::from_pairs(pairs, dataset.drug_len, dataset.target_len),
                             popt);
}

training::PredictOptions model_predict_options(const std::string& mode, std::uint64_t seed, int k_star,
                                               int mc_samples, std::size_t batch_size, int checkpoint_stage) {
    training::PredictOptions p;
    p.mode = parse_mode(mode);
    if (mc_samples < 1) throw UsageError("--mc-samples must be positive");
    if (k_star < 0) throw UsageError("--k-star must be non-negative");
    if (batch_size == 0) throw UsageError("--batch-size must be positive");
    if (p.mode == training::PredictMode::diff && checkpoint_stage != 2)
        throw std::runtime_error("mode diff requires stage-two parameters, but the checkpoint is from stage " +
                                 std::to_string(checkpoint_stage));
    p.seed = seed;
    p.k_star = k_star;
    p.mc_samples = mc_samples;
    p.batch_size = batch_size;
    return p;
}

}  // namespace

std::vector<PredictionRow> predict(const PredictOptions& opt) {
    if (opt.format != "tsv" && opt.format != "json") throw UsageError("--format must be tsv or json");
    if (opt.out_dir.empty()) throw UsageError("an output directory is required");
    parse_mode(opt.mode);
    const Dataset dataset = load_dataset(opt.data_dir);
    std::vector<data::AffinityRecord> records;
    std::vector<bool> labeled;
    std::string setting = opt.subset;
    if (!opt.input.empty()) {
        if (opt.subset != "all") throw UsageError("--subset cannot be combined with --input");
        auto p = read_pairs(opt.input);
        records = std::move(p.records);
        labeled = std::move(p.labeled);
    } else {
        std::vector<std::size_t> idx;
        if (opt.subset == "all") {
            idx = all_indices(dataset.records.size());
        } else {
            if (opt.split_path.empty()) throw UsageError("--subset " + opt.subset + " needs --split");
            const auto s = load_split(opt.split_path, dataset);
            if (opt.subset == "train") {
                idx = s.train;
            } else {
                data::Setting st;
                try {
                    st = data::setting_from_string(opt.subset);
                } catch (const std::invalid_argument& e) {
                    throw UsageError(std::string(e.what()) + " (or all / train)");
                }
                idx = s.setting(st).test;
            }
        }
        for (std::size_t i : idx) records.push_back(dataset.records.at(i));
        labeled.assign(records.size(), true);
    }
    auto loaded = load_model(opt.checkpoint);
    const auto popt = model_predict_options(opt.mode, opt.seed, opt.k_star, opt.mc_samples, opt.batch_size, loaded.stage);
    const auto y_hat = records.empty() ? std::vector<double>{} : run_model(loaded.model, records, dataset, popt);
    std::vector<PredictionRow> rows;
    for (std::size_t i = 0; i < records.size(); ++i) {
        PredictionRow r{records[i].drug_id, records[i].target_id, setting, std::nullopt, y_hat[i]};
        if (labeled[i]) r.y_true = records[i].affinity;
        rows.push_back(std::move(r));
    }
    fs::create_directories(opt.out_dir);
    if (opt.format == "tsv")
        write_predictions_tsv(opt.out_dir / "predictions.tsv", rows);
    else
        write_predictions_json(opt.out_dir / "predictions.json", rows);
    write_resolved_config(opt.out_dir, "predict", opt.to_json());
    return rows;
}

void write_predictions_tsv(const fs::path& path, const std::vector<PredictionRow>& rows) {
    auto out = open_out(path);
    out << kPredictionHeader << '\n';
    for (const auto& r : rows)
        out << r.drug_id << '\t' << r.target_id << '\t' << r.setting << '\t'
            << (r.y_true ? format_double(*r.y_true) : std::string()) << '\t' << format_double(r.y_hat) << '\n';
}

void write_predictions_json(const fs::path& path, const std::vector<PredictionRow>& rows) {
    json arr = json::array();
    for (const auto& r : rows)
        arr.push_back({{"drug_id", r.drug_id},
                       {"target_id", r.target_id},
                       {"setting", r.setting},
                       {"y_true", r.y_true ? json(*r.y_true) : json(nullptr)},
                       {"y_hat", r.y_hat}});
    write_json(path, {{"predictions", arr}});
}

std::vector<ScatterRow> read_prediction_table(const fs::path& path) {
    auto in = open_in(path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty prediction table");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_tabs(line);
    auto column = [&](const std::string& name) -> std::optional<std::size_t> {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) return std::nullopt;
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto y_true = column("y_true"), y_hat = column("y_hat");
    if (!y_true || !y_hat) throw std::runtime_error(path.string() + ":1: prediction table needs y_true and y_hat columns");
    const auto id = column("id"), drug = column("drug_id"), target = column("target_id"), setting = column("setting");
    std::vector<ScatterRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_tabs(line);
        const std::string where = path.string() + ":" + std::to_string(line_no);
        if (f.size() != header.size())
            throw std::runtime_error(where + ": expected " + std::to_string(header.size()) + " fields, found " +
                                     std::to_string(f.size()));
        if (f[*y_true].empty()) continue;  // unlabeled pair
        ScatterRow r;
        if (id) r.id = f[*id];
        if (drug) r.drug_id = f[*drug];
        if (target) r.target_id = f[*target];
        if (setting) r.setting = f[*setting];
        r.y_true = parse_double(f[*y_true], where);
        r.y_hat = parse_double(f[*y_hat], where);
        rows.push_back(std::move(r));
    }
    return rows;
}

json EvalOptions::to_json() const {
    return {{"data", data_dir.string()},
            {"split", split_path.string()},
            {"checkpoint", checkpoint.string()},
            {"predictions", predictions.string()},
            {"subset", subset},
            {"mode", mode},
            {"seed", seed},
            {"k_star", k_star},
            {"mc_samples", mc_samples},
            {"batch_size", batch_size},
            {"out", out_dir.string()}};
}

json evaluate(const EvalOptions& opt) {
    if (opt.out_dir.empty()) throw UsageError("an output directory is required");
    if (opt.subset != "test" && opt.subset != "validation") throw UsageError("--subset must be test or validation");
    json reports = json::array();
    json warnings = json::array();
    if (!opt.predictions.empty()) {
        std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
        for (const auto& r : read_prediction_table(opt.predictions)) {
            auto& g = groups[r.setting.empty() ? "all" : r.setting];
            g.first.push_back(r.y_true);
            g.second.push_back(r.y_hat);
        }
        for (const auto& [setting, g] : groups) reports.push_back(metrics::evaluate(g.first, g.second, setting).to_json());
    } else {
        parse_mode(opt.mode);
        const Dataset dataset = load_dataset(opt.data_dir);
        if (opt.split_path.empty()) throw UsageError("--split is required unless --predictions is given");
        const auto s = load_split(opt.split_path, dataset);
        auto loaded = load_model(opt.checkpoint);
        const auto popt =
            model_predict_options(opt.mode, opt.seed, opt.k_star, opt.mc_samples, opt.batch_size, loaded.stage);
        for (auto setting : data::kSettings) {
            const auto& part = s.setting(setting);
            const auto& idx = opt.subset == "test" ? part.test : part.validation;
            const std::string name = data::to_string(setting);
            if (idx.empty()) {
                warnings.push_back("setting " + name + " has no " + opt.subset + " pairs; skipped");
                continue;
            }
            std::vector<data::AffinityRecord> records;
            std::vector<double> y;
            for (std::size_t i : idx) {
                records.push_back(dataset.records.at(i));
                y.push_back(dataset.records.at(i).affinity);
            }
            const auto y_hat = run_model(loaded.model, records, dataset, popt);
            reports.push_back(metrics::evaluate(y, y_hat, name).to_json());
        }
    }
    fs::create_directories(opt.out_dir);
    for (const auto& r : reports) write_json(opt.out_dir / ("eval_" + r.at("setting").get<std::string>() + ".json"), r);
    const json result = {{"mode", opt.predictions.empty() ? opt.mode : "predictions"},
                         {"subset", opt.subset},
                         {"reports", reports},
                         {"warnings", warnings}};
    write_json(opt.out_dir / "metrics.json", result);
    write_resolved_config(opt.out_dir, "eval", opt.to_json());
    return result;
}

json ExportOptions::to_json() const {
    return {{"data", data_dir.string()}, {"checkpoint", checkpoint.string()}, {"out", out_dir.string()}};
}

void export_embeddings(const ExportOptions& opt) {
    if (opt.out_dir.empty()) throw UsageError("an output directory is required");
    const Dataset dataset = load_dataset(opt.data_dir);
    auto loaded = load_model(opt.checkpoint);
    auto write_modality = [&](const std::string& modality, const fs::path& path) {
        const bool drug = modality == "drug";
        const std::size_t len = drug ? dataset.drug_len : dataset.target_len;
        std::vector<std::string> ids;
        std::vector<std::int32_t> table;
        std::set<std::string> seen;
        for (std::size_t i = 0; i < dataset.records.size(); ++i) {
            const auto& r = dataset.records[i];
            const std::string& id = drug ? r.drug_id : r.target_id;
            if (!seen.insert(id).second) continue;
            ids.push_back(id);
            const auto& tokens = drug ? dataset.pairs[i].drug_tokens : dataset.pairs[i].target_tokens;
            table.insert(table.end(), tokens.begin(), tokens.end());
        }
        const auto mu = training::encode_means(loaded.model, modality, table, len);
        auto out = open_out(path);
        out << modality << "_id";
        for (std::size_t c = 0; c < mu.cols(); ++c) out << ",z" << c;
        out << '\n';
        for (std::size_t r = 0; r < ids.size(); ++r) {
            out << csv_field(ids[r]);
            for (std::size_t c = 0; c < mu.cols(); ++c) out << ',' << format_double(mu[r * mu.cols() + c]);
            out << '\n';
        }
    };
    write_modality("drug", opt.out_dir / "drug_embeddings.csv");
    write_modality("target", opt.out_dir / "target_embeddings.csv");
    write_resolved_config(opt.out_dir, "export-embeddings", opt.to_json());
}

json ReportOptions::to_json() const {
    json e = json::array(), p = json::array();
    for (const auto& x : evals) e.push_back(x.string());
    for (const auto& x : predictions) p.push_back(x.string());
    return {{"evals", e}, {"predictions", p}, {"decimals", decimals}, {"out", out_dir.string()}};
}

void report(const ReportOptions& opt) {
    if (opt.evals.empty() && opt.predictions.empty()) throw UsageError("report needs --eval and/or --predictions inputs");
    if (opt.decimals < 0 || opt.decimals > 12) throw UsageError("--decimals must be in [0, 12]");
    if (opt.out_dir.empty()) throw UsageError("an output directory is required");
    fs::create_directories(opt.out_dir);
    {
        auto out = open_out(opt.out_dir / "summary.csv");
        out << "source,setting,n,mse,mae,ci,rm2\n";
        for (const auto& e : opt.evals) {
            const fs::path file = fs::is_directory(e) ? e / "metrics.json" : e;
            const json j = read_json(file);
            for (const auto& r : j.at("reports")) {
                const auto m = metrics::MetricsReport::from_json(r);
                out << csv_field(file.string()) << ',' << csv_field(m.setting) << ',' << m.n << ',' << format_double(m.mse)
                    << ',' << format_double(m.mae) << ',' << format_double(m.ci) << ',' << format_double(m.rm2) << '\n';
            }
        }
    }
    auto out = open_out(opt.out_dir / "scatter.csv");
    out << "source,id,drug_id,target_id,setting,y_true,y_hat,identity,sq_err,sq_err_rounded\n";
    for (const auto& p : opt.predictions) {
        for (const auto& r : read_prediction_table(p)) {
            const double err = (r.y_true - r.y_hat) * (r.y_true - r.y_hat);
            out << csv_field(p.string()) << ',' << csv_field(r.id) << ',' << csv_field(r.drug_id) << ','
                << csv_field(r.target_id) << ',' << csv_field(r.setting) << ',' << format_double(r.y_true) << ','
                << format_double(r.y_hat) << ',' << format_double(r.y_true) << ',' << format_double(err) << ','
                << fixed(err, opt.decimals) << '\n';
        }
    }
    write_resolved_config(opt.out_dir, "report", opt.to_json());
}

}  // namespace codiff::pipeline
