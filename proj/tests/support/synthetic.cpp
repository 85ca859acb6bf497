#include "synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <iomanip>
#include <sstream>

#include <unistd.h>

#include "codiff/rng.hpp"

namespace codiff::testing {

namespace {

// Text over a random subset of the alphabet, so entities differ in which
// characters they contain and not only in order.
std::string random_text(Rng& rng, const std::string& letters, std::size_t lo, std::size_t hi) {
    const auto len = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
    std::string s(len, ' ');
    for (auto& c : s) c = letters[rng.index(letters.size())];
    return s;
}

std::string letter_subset(Rng& rng, const char* alphabet, std::size_t count, std::vector<double>& indicator) {
    std::string all(alphabet);
    rng.shuffle(all);
    std::string chosen = all.substr(0, count);
    indicator.assign(std::strlen(alphabet), 0.0);
    for (char c : chosen) indicator[std::string(alphabet).find(c)] = 1.0;
    return chosen;
}

std::string make_id(char prefix, std::size_t i) {
    std::ostringstream out;
    out << prefix << std::setw(4) << std::setfill('0') << i;
    return out.str();
}

}  // namespace

std::vector<data::AffinityRecord> synthetic_davis(const SyntheticShape& shape) {
    Rng rng(shape.seed);
    constexpr std::size_t rank = 3;
    const std::size_t n_smiles = std::strlen(kSmilesAlphabet), n_protein = std::strlen(kProteinAlphabet);
    // Entity factors are fixed random projections of which letters occur.
    std::vector<double> drug_proj(n_smiles * rank), target_proj(n_protein * rank);
    for (auto& x : drug_proj) x = rng.normal();
    for (auto& x : target_proj) x = rng.normal();
    auto factors = [&](const std::vector<double>& indicator, const std::vector<double>& proj) {
        std::vector<double> f(rank, 0.0);
        double count = 0.0;
        for (double v : indicator) count += v;
        for (std::size_t i = 0; i < indicator.size(); ++i)
            for (std::size_t r = 0; r < rank; ++r) f[r] += indicator[i] * proj[i * rank + r];
        for (auto& v : f) v /= std::sqrt(count);
        return f;
    };
    std::vector<std::string> smiles, sequences;
    std::vector<std::vector<double>> u, v;
    std::vector<double> indicator;
    for (std::size_t i = 0; i < shape.drugs; ++i) {
        const std::string letters = letter_subset(rng, kSmilesAlphabet, 12 + rng.index(12), indicator);
        std::string s = random_text(rng, letters, shape.min_smiles, shape.max_smiles);
        if (i == 0) s.insert(0, kSmilesAlphabet);  // every character occurs somewhere
        u.push_back(factors(indicator, drug_proj));
        smiles.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < shape.targets; ++i) {
        const std::string letters = letter_subset(rng, kProteinAlphabet, 8 + rng.index(8), indicator);
        std::string s = random_text(rng, letters, shape.min_sequence, shape.max_sequence);
        if (i == 0) s.insert(0, kProteinAlphabet);
        v.push_back(factors(indicator, target_proj));
        sequences.push_back(std::move(s));
    }
    std::vector<data::AffinityRecord> records;
    records.reserve(shape.drugs * shape.targets);
    for (std::size_t d = 0; d < shape.drugs; ++d) {
        for (std::size_t t = 0; t < shape.targets; ++t) {
            double score = -1.0 + 0.2 * rng.normal();
            for (std::size_t r = 0; r < rank; ++r) score += 0.8 * u[d][r] * v[t][r];
            const double pkd = std::min(10.8, 5.0 + std::max(0.0, 2.0 * score));
            const double kd = std::pow(10.0, 9.0 - pkd);
            records.push_back({make_id('D', d), smiles[d], make_id('T', t), sequences[t], kd});
        }
    }
    return records;
}

std::vector<data::AffinityRecord> block_subset(const std::vector<data::AffinityRecord>& records,
                                               std::size_t total_targets, std::size_t drugs, std::size_t targets) {
    std::vector<data::AffinityRecord> out;
    for (std::size_t d = 0; d < drugs; ++d)
        for (std::size_t t = 0; t < targets; ++t) out.push_back(records.at(d * total_targets + t));
    return out;
}

std::vector<data::AffinityRecord> davis_records(bool* is_real) {
    if (const char* path = std::getenv("CODIFF_DAVIS_TSV"); path && *path) {
        if (is_real) *is_real = true;
        return data::load_tsv(path);
    }
    if (is_real) *is_real = false;
    return synthetic_davis();
}

std::vector<data::AffinityRecord> to_pkd(std::vector<data::AffinityRecord> records) {
    for (auto& r : records) r.affinity = data::kd_to_pkd(r.affinity);
    return records;
}

SmallProblem small_problem(std::size_t drugs, std::size_t targets, std::size_t drug_len, std::size_t target_len,
                           std::uint64_t seed) {
    SyntheticShape shape;
    shape.drugs = drugs;
    shape.targets = targets;
    shape.min_smiles = std::min<std::size_t>(20, drug_len);
    shape.max_smiles = drug_len;
    shape.min_sequence = std::min<std::size_t>(60, target_len);
    shape.max_sequence = target_len;
    shape.seed = seed;
    SmallProblem p;
    p.records = to_pkd(synthetic_davis(shape));
    p.drug_vocab = data::build_vocab(p.records, data::VocabKind::smiles);
    p.target_vocab = data::build_vocab(p.records, data::VocabKind::protein);
    const auto pairs = data::tokenize_records(p.records, p.drug_vocab, p.target_vocab, drug_len, target_len);
    p.data = training::EncodedDataset::from_pairs(pairs, drug_len, target_len);
    p.config = training::ModelConfig::preset("compact", p.drug_vocab.size(), p.target_vocab.size());
    return p;
}

std::filesystem::path scratch_dir(const std::string& name) {
    // The process id keeps parallel test processes apart.
    auto dir = std::filesystem::temp_directory_path() / ("codiff_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace codiff::testing
