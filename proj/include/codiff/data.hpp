#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace codiff::data {

// One labeled drug-target example.
struct AffinityRecord {
    std::string drug_id;
    std::string smiles;
    std::string target_id;
    std::string sequence;
    double affinity = 0.0;

    bool operator==(const AffinityRecord&) const = default;
};

inline constexpr std::string_view kTsvHeader = "drug_id\tsmiles\ttarget_id\tsequence\taffinity";

// Reads the 5-column TSV (header line first). Errors name the offending line.
std::vector<AffinityRecord> load_tsv(const std::filesystem::path& path);
std::vector<AffinityRecord> parse_tsv(std::istream& in, const std::string& source = "<stream>");
void write_tsv(const std::filesystem::path& path, const std::vector<AffinityRecord>& records);

// pK_d = -log10(K_d [nM]) + 9
double kd_to_pkd(double kd_nanomolar);

enum class VocabKind { smiles, protein };

std::string to_string(VocabKind kind);
VocabKind vocab_kind_from_string(std::string_view name);

// Character -> index in [1, size]; 0 is reserved for padding.
class Vocabulary {
public:
    static constexpr std::int32_t kPadIndex = 0;

    Vocabulary() = default;
    Vocabulary(VocabKind kind, std::map<char, std::int32_t> token_to_index);

    VocabKind kind() const { return kind_; }
    std::size_t size() const { return token_to_index_.size(); }
    const std::map<char, std::int32_t>& token_to_index() const { return token_to_index_; }

    bool contains(char c) const { return token_to_index_.count(c) != 0; }
    std::int32_t index(char c) const;
    char character(std::int32_t index) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);

    bool operator==(const Vocabulary&) const = default;

private:
    VocabKind kind_ = VocabKind::smiles;
    std::map<char, std::int32_t> token_to_index_;
    std::vector<char> index_to_token_;  // position i holds the character of index i + 1
};

// Characters sorted by byte value, indexed 1..V in that order.
Vocabulary build_vocab(const std::vector<AffinityRecord>& records, VocabKind kind);

// Fixed-length encoding: truncated to max_len, right-padded with kPadIndex.
std::vector<std::int32_t> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len);

// Maps the non-pad prefix back to characters.
std::string detokenize(const std::vector<std::int32_t>& tokens, const Vocabulary& vocab);

struct TokenizedPair {
    std::vector<std::int32_t> drug_tokens;
    std::vector<std::int32_t> target_tokens;
    double label = 0.0;
};

std::vector<TokenizedPair> tokenize_records(const std::vector<AffinityRecord>& records, const Vocabulary& drug_vocab,
                                            const Vocabulary& target_vocab, std::size_t drug_len,
                                            std::size_t target_len);

// Per-dataset maximum lengths.
struct DatasetPreset {
    std::string name;
    std::size_t drug_len = 0;
    std::size_t target_len = 0;
};

// davis: 85 / 1200, kiba: 100 / 1000. generic returns zero lengths, meaning
// "longest string in the corpus".
DatasetPreset dataset_preset(std::string_view name);

struct DatasetStats {
    std::size_t records = 0;
    std::size_t drugs = 0;
    std::size_t targets = 0;
    std::size_t max_smiles_len = 0;
    std::size_t max_sequence_len = 0;
};

DatasetStats dataset_stats(const std::vector<AffinityRecord>& records);

enum class Setting { ud, ut, up };
inline constexpr std::array<Setting, 3> kSettings = {Setting::ud, Setting::ut, Setting::up};

std::string to_string(Setting s);
Setting setting_from_string(std::string_view name);

enum class Partition { old_entity, new_entity };

struct SettingSplit {
    std::vector<std::size_t> validation;
    std::vector<std::size_t> test;
};

// Indices into the source record list.
struct ColdStartSplit {
    std::uint64_t seed = 0;
    double drug_frac = 0.8;
    double target_frac = 0.8;
    std::vector<std::size_t> train;
    std::array<SettingSplit, 3> settings;
    std::map<std::string, Partition> drug_partition;
    std::map<std::string, Partition> target_partition;
    std::vector<std::string> warnings;

    SettingSplit& setting(Setting s) { return settings[static_cast<std::size_t>(s)]; }
    const SettingSplit& setting(Setting s) const { return settings[static_cast<std::size_t>(s)]; }

    std::size_t old_drugs() const;
    std::size_t new_drugs() const;
    std::size_t old_targets() const;
    std::size_t new_targets() const;
    std::size_t total_records() const;

    nlohmann::json to_json() const;
    static ColdStartSplit from_json(const nlohmann::json& j);
};

// Cold-start partition: sorted unique drug ids are shuffled with the seed and
// the first max(1, floor(drug_frac * N_d)) become "old"; likewise targets. Records are
// routed (old, old) -> train, (new, old) -> UD, (old, new) -> UT,
// (new, new) -> UP. Each setting is shuffled and split with the first
// floor(n / 2) as validation and the rest as test. Empty buckets are reported
// in `warnings`.
ColdStartSplit cold_start_split(const std::vector<AffinityRecord>& records, double drug_frac, double target_frac,
                                std::uint64_t seed);

// Checks the routing and disjointness invariants; returns human-readable
// violations (empty when the split is consistent).
std::vector<std::string> validate_split(const ColdStartSplit& split, const std::vector<AffinityRecord>& records);

}  // namespace codiff::data
