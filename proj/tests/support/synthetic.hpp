#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "codiff/data.hpp"
#include "codiff/training.hpp"

namespace codiff::testing {

// A stand-in with the Davis shape: every drug paired with every target, raw
// K_d labels in nM with a floor cluster at 10000 nM (pK_d 5).
struct SyntheticShape {
    std::size_t drugs = 68;
    std::size_t targets = 442;
    std::size_t min_smiles = 30;
    std::size_t max_smiles = 100;
    std::size_t min_sequence = 250;
    std::size_t max_sequence = 1400;
    std::uint64_t seed = 2024;
};

inline constexpr const char* kSmilesAlphabet =
    "#%()+-./0123456789=@ABCDEFGHIKLMNOPRSTVXZ[\\]abcdefgilmnoprstuyhk";
inline constexpr const char* kProteinAlphabet = "ACDEFGHIKLMNPQRSTVWYBXZUO";

std::vector<data::AffinityRecord> synthetic_davis(const SyntheticShape& shape = {});

// Records in drug-major order restricted to the first `drugs` x `targets` block.
std::vector<data::AffinityRecord> block_subset(const std::vector<data::AffinityRecord>& records,
                                               std::size_t total_targets, std::size_t drugs, std::size_t targets);

// Davis records: the file named by CODIFF_DAVIS_TSV when set, the synthetic
// stand-in otherwise.
std::vector<data::AffinityRecord> davis_records(bool* is_real = nullptr);

// Copies raw K_d labels to pK_d.
std::vector<data::AffinityRecord> to_pkd(std::vector<data::AffinityRecord> records);

// A small drug-major pK_d problem tokenized for the compact model.
struct SmallProblem {
    std::vector<data::AffinityRecord> records;
    data::Vocabulary drug_vocab;
    data::Vocabulary target_vocab;
    training::EncodedDataset data;
    training::ModelConfig config;
};

SmallProblem small_problem(std::size_t drugs, std::size_t targets, std::size_t drug_len = 40,
                           std::size_t target_len = 150, std::uint64_t seed = 2024);

// Fresh directory under the system temp path.
std::filesystem::path scratch_dir(const std::string& name);

}  // namespace codiff::testing
