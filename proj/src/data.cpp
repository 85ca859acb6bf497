#include "codiff/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "codiff/rng.hpp"

namespace codiff::data {

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string_view::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

std::runtime_error line_error(const std::string& source, std::size_t line, const std::string& what) {
    return std::runtime_error(source + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

std::vector<AffinityRecord> parse_tsv(std::istream& in, const std::string& source) {
    std::vector<AffinityRecord> records;
    std::string line;
    std::size_t line_no = 0;
    bool seen_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!seen_header) {
            if (line != kTsvHeader) throw line_error(source, line_no, "expected header '" + std::string(kTsvHeader) + "'");
            seen_header = true;
            continue;
        }
        if (line.empty()) continue;
        const auto fields = split_tabs(line);
        if (fields.size() != 5)
            throw line_error(source, line_no, "expected 5 tab-separated fields, found " + std::to_string(fields.size()));
        AffinityRecord r;
        r.drug_id = fields[0];
        r.smiles = fields[1];
        r.target_id = fields[2];
        r.sequence = fields[3];
        if (r.smiles.empty()) throw line_error(source, line_no, "empty smiles");
        if (r.sequence.empty()) throw line_error(source, line_no, "empty sequence");
        const std::string_view value = fields[4];
        const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), r.affinity);
        if (ec != std::errc() || ptr != value.data() + value.size() || !std::isfinite(r.affinity))
            throw line_error(source, line_no, "unparsable affinity '" + std::string(value) + "'");
        records.push_back(std::move(r));
    }
    if (!seen_header) throw std::runtime_error(source + ": missing header line");
    return records;
}

std::vector<AffinityRecord> load_tsv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return parse_tsv(in, path.string());
}

void write_tsv(const std::filesystem::path& path, const std::vector<AffinityRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << kTsvHeader << '\n';
    char buf[64];
    for (const auto& r : records) {
        const auto res = std::to_chars(buf, buf + sizeof buf, r.affinity);
        out << r.drug_id << '\t' << r.smiles << '\t' << r.target_id << '\t' << r.sequence << '\t'
            << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf)) << '\n';
    }
}

double kd_to_pkd(double kd_nanomolar) {
    if (!(kd_nanomolar > 0.0) || !std::isfinite(kd_nanomolar))
        throw std::domain_error("kd_to_pkd: K_d must be positive and finite, got " + std::to_string(kd_nanomolar));
    return -std::log10(kd_nanomolar) + 9.0;
}

std::string to_string(VocabKind kind) { return kind == VocabKind::smiles ? "smiles" : "protein"; }

VocabKind vocab_kind_from_string(std::string_view name) {
    if (name == "smiles") return VocabKind::smiles;
    if (name == "protein") return VocabKind::protein;
    throw std::invalid_argument("unknown vocabulary kind '" + std::string(name) + "'");
}

Vocabulary::Vocabulary(VocabKind kind, std::map<char, std::int32_t> token_to_index)
    : kind_(kind), token_to_index_(std::move(token_to_index)), index_to_token_(token_to_index_.size()) {
    for (const auto& [c, i] : token_to_index_) {
        if (i < 1 || static_cast<std::size_t>(i) > token_to_index_.size() || index_to_token_[i - 1] != '\0')
            throw std::invalid_argument("vocabulary: indices must be a bijection onto [1, V]");
        index_to_token_[i - 1] = c;
    }
}

std::int32_t Vocabulary::index(char c) const {
    auto it = token_to_index_.find(c);
    if (it == token_to_index_.end()) {
        std::ostringstream msg;
        msg << "character '" << c << "' (byte " << static_cast<int>(static_cast<unsigned char>(c)) << ") not in "
            << to_string(kind_) << " vocabulary";
        throw std::out_of_range(msg.str());
    }
    return it->second;
}

char Vocabulary::character(std::int32_t index) const {
    if (index < 1 || static_cast<std::size_t>(index) > index_to_token_.size())
        throw std::out_of_range("vocabulary: index " + std::to_string(index) + " has no character");
    return index_to_token_[index - 1];
}

nlohmann::json Vocabulary::to_json() const {
    nlohmann::json tokens = nlohmann::json::object();
    for (const auto& [c, i] : token_to_index_) tokens[std::string(1, c)] = i;
    return {{"kind", to_string(kind_)}, {"size", size()}, {"pad_index", kPadIndex}, {"tokens", tokens}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
    std::map<char, std::int32_t> map;
    for (const auto& [key, value] : j.at("tokens").items()) {
        if (key.size() != 1) throw std::invalid_argument("vocabulary: token keys must be single characters");
        map.emplace(key[0], value.get<std::int32_t>());
    }
    Vocabulary v(vocab_kind_from_string(j.at("kind").get<std::string>()), std::move(map));
    if (j.contains("size") && j.at("size").get<std::size_t>() != v.size())
        throw std::invalid_argument("vocabulary: size field disagrees with tokens");
    return v;
}

Vocabulary build_vocab(const std::vector<AffinityRecord>& records, VocabKind kind) {
    if (records.empty()) throw std::invalid_argument("build_vocab: no records");
    std::set<unsigned char> chars;
    for (const auto& r : records)
        for (char c : (kind == VocabKind::smiles ? r.smiles : r.sequence)) chars.insert(static_cast<unsigned char>(c));
    std::map<char, std::int32_t> map;
    std::int32_t next = 1;
    for (unsigned char c : chars) map.emplace(static_cast<char>(c), next++);
    return Vocabulary(kind, std::move(map));
}

std::vector<std::int32_t> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
    if (max_len < 1) throw std::invalid_argument("tokenize: max_len must be at least 1");
    std::vector<std::int32_t> out(max_len, Vocabulary::kPadIndex);
    const std::size_t n = std::min(text.size(), max_len);
    for (std::size_t i = 0; i < n; ++i) out[i] = vocab.index(text[i]);
    return out;
}

std::string detokenize(const std::vector<std::int32_t>& tokens, const Vocabulary& vocab) {
    std::string out;
    for (std::int32_t t : tokens) {
        if (t == Vocabulary::kPadIndex) break;
        out.push_back(vocab.character(t));
    }
    return out;
}

std::vector<TokenizedPair> tokenize_records(const std::vector<AffinityRecord>& records, const Vocabulary& drug_vocab,
                                            const Vocabulary& target_vocab, std::size_t drug_len,
                                            std::size_t target_len) {
    std::vector<TokenizedPair> out;
    out.reserve(records.size());
    std::map<std::string, std::vector<std::int32_t>> drug_cache, target_cache;
    for (const auto& r : records) {
        auto d = drug_cache.find(r.smiles);
        if (d == drug_cache.end()) d = drug_cache.emplace(r.smiles, tokenize(r.smiles, drug_vocab, drug_len)).first;
        auto t = target_cache.find(r.sequence);
        if (t == target_cache.end())
            t = target_cache.emplace(r.sequence, tokenize(r.sequence, target_vocab, target_len)).first;
        out.push_back({d->second, t->second, r.affinity});
    }
    return out;
}

DatasetPreset dataset_preset(std::string_view name) {
    if (name == "davis") return {"davis", 85, 1200};
    if (name == "kiba") return {"kiba", 100, 1000};
    if (name == "generic") return {"generic", 0, 0};
    throw std::invalid_argument("unknown dataset '" + std::string(name) + "' (expected davis, kiba or generic)");
}

DatasetStats dataset_stats(const std::vector<AffinityRecord>& records) {
    DatasetStats s;
    std::set<std::string> drugs, targets;
    for (const auto& r : records) {
        drugs.insert(r.drug_id);
        targets.insert(r.target_id);
        s.max_smiles_len = std::max(s.max_smiles_len, r.smiles.size());
        s.max_sequence_len = std::max(s.max_sequence_len, r.sequence.size());
    }
    s.records = records.size();
    s.drugs = drugs.size();
    s.targets = targets.size();
    return s;
}

std::string to_string(Setting s) {
    switch (s) {
        case Setting::ud: return "ud";
        case Setting::ut: return "ut";
        case Setting::up: return "up";
    }
    return "?";
}

Setting setting_from_string(std::string_view name) {
    if (name == "ud") return Setting::ud;
    if (name == "ut") return Setting::ut;
    if (name == "up") return Setting::up;
    throw std::invalid_argument("unknown setting '" + std::string(name) + "' (expected ud, ut or up)");
}

namespace {

std::size_t count_partition(const std::map<std::string, Partition>& m, Partition p) {
    return static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [p](const auto& kv) { return kv.second == p; }));
}

const char* partition_name(Partition p) { return p == Partition::old_entity ? "old" : "new"; }

Partition partition_from_string(const std::string& s) {
    if (s == "old") return Partition::old_entity;
    if (s == "new") return Partition::new_entity;
    throw std::invalid_argument("split manifest: partition must be 'old' or 'new', got '" + s + "'");
}

}  // namespace

std::size_t ColdStartSplit::old_drugs() const { return count_partition(drug_partition, Partition::old_entity); }
std::size_t ColdStartSplit::new_drugs() const { return count_partition(drug_partition, Partition::new_entity); }
std::size_t ColdStartSplit::old_targets() const { return count_partition(target_partition, Partition::old_entity); }
std::size_t ColdStartSplit::new_targets() const { return count_partition(target_partition, Partition::new_entity); }

std::size_t ColdStartSplit::total_records() const {
    std::size_t n = train.size();
    for (const auto& s : settings) n += s.validation.size() + s.test.size();
    return n;
}

nlohmann::json ColdStartSplit::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["drug_frac"] = drug_frac;
    j["target_frac"] = target_frac;
    nlohmann::json dp = nlohmann::json::object(), tp = nlohmann::json::object();
    for (const auto& [id, p] : drug_partition) dp[id] = partition_name(p);
    for (const auto& [id, p] : target_partition) tp[id] = partition_name(p);
    j["drug_partition"] = dp;
    j["target_partition"] = tp;
    j["train"] = train;
    for (Setting s : kSettings)
        j[to_string(s)] = {{"validation", setting(s).validation}, {"test", setting(s).test}};
    j["warnings"] = warnings;
    return j;
}

ColdStartSplit ColdStartSplit::from_json(const nlohmann::json& j) {
    ColdStartSplit split;
    split.seed = j.at("seed").get<std::uint64_t>();
    split.drug_frac = j.value("drug_frac", 0.8);
    split.target_frac = j.value("target_frac", 0.8);
    for (const auto& [id, p] : j.at("drug_partition").items())
        split.drug_partition[id] = partition_from_string(p.get<std::string>());
    for (const auto& [id, p] : j.at("target_partition").items())
        split.target_partition[id] = partition_from_string(p.get<std::string>());
    split.train = j.at("train").get<std::vector<std::size_t>>();
    for (Setting s : kSettings) {
        const auto& node = j.at(to_string(s));
        split.setting(s).validation = node.at("validation").get<std::vector<std::size_t>>();
        split.setting(s).test = node.at("test").get<std::vector<std::size_t>>();
    }
    if (j.contains("warnings")) split.warnings = j.at("warnings").get<std::vector<std::string>>();
    return split;
}

ColdStartSplit cold_start_split(const std::vector<AffinityRecord>& records, double drug_frac, double target_frac,
                                std::uint64_t seed) {
    if (records.empty()) throw std::invalid_argument("cold_start_split: no records");
    if (!(drug_frac > 0.0 && drug_frac < 1.0) || !(target_frac > 0.0 && target_frac < 1.0))
        throw std::invalid_argument("cold_start_split: fractions must lie in (0, 1)");

    ColdStartSplit split;
    split.seed = seed;
    split.drug_frac = drug_frac;
    split.target_frac = target_frac;
    Rng rng(seed);

    auto partition = [&rng](std::set<std::string> ids, double frac) {
        std::vector<std::string> order(ids.begin(), ids.end());
        rng.shuffle(order);
        // At least one old entity, so a lone drug or target still trains.
        const auto n_old = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::floor(frac * static_cast<double>(order.size()))));
        std::map<std::string, Partition> out;
        for (std::size_t i = 0; i < order.size(); ++i)
            out[order[i]] = i < n_old ? Partition::old_entity : Partition::new_entity;
        return out;
    };
    std::set<std::string> drugs, targets;
    for (const auto& r : records) {
        drugs.insert(r.drug_id);
        targets.insert(r.target_id);
    }
    split.drug_partition = partition(std::move(drugs), drug_frac);
    split.target_partition = partition(std::move(targets), target_frac);

    std::array<std::vector<std::size_t>, 3> buckets;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const bool new_drug = split.drug_partition.at(records[i].drug_id) == Partition::new_entity;
        const bool new_target = split.target_partition.at(records[i].target_id) == Partition::new_entity;
        if (!new_drug && !new_target)
            split.train.push_back(i);
        else if (new_drug && !new_target)
            buckets[static_cast<std::size_t>(Setting::ud)].push_back(i);
        else if (!new_drug && new_target)
            buckets[static_cast<std::size_t>(Setting::ut)].push_back(i);
        else
            buckets[static_cast<std::size_t>(Setting::up)].push_back(i);
    }
    if (split.train.empty()) split.warnings.push_back("train bucket is empty");
    for (Setting s : kSettings) {
        auto& bucket = buckets[static_cast<std::size_t>(s)];
        if (bucket.empty()) split.warnings.push_back(to_string(s) + " bucket is empty");
        rng.shuffle(bucket);
        const std::size_t n_val = bucket.size() / 2;
        split.setting(s).validation.assign(bucket.begin(), bucket.begin() + static_cast<std::ptrdiff_t>(n_val));
        split.setting(s).test.assign(bucket.begin() + static_cast<std::ptrdiff_t>(n_val), bucket.end());
    }
    return split;
}

std::vector<std::string> validate_split(const ColdStartSplit& split, const std::vector<AffinityRecord>& records) {
    std::vector<std::string> problems;
    std::vector<int> seen(records.size(), 0);
    auto status = [&](std::size_t i, bool& new_drug, bool& new_target) {
        auto d = split.drug_partition.find(records[i].drug_id);
        auto t = split.target_partition.find(records[i].target_id);
        if (d == split.drug_partition.end() || t == split.target_partition.end()) return false;
        new_drug = d->second == Partition::new_entity;
        new_target = t->second == Partition::new_entity;
        return true;
    };
    auto check = [&](const std::vector<std::size_t>& idx, bool want_new_drug, bool want_new_target,
                     const std::string& label) {
        for (std::size_t i : idx) {
            if (i >= records.size()) {
                problems.push_back(label + ": index " + std::to_string(i) + " out of range");
                continue;
            }
            ++seen[i];
            bool nd = false, nt = false;
            if (!status(i, nd, nt)) {
                problems.push_back(label + ": record " + std::to_string(i) + " has an unpartitioned entity");
            } else if (nd != want_new_drug || nt != want_new_target) {
                problems.push_back(label + ": record " + std::to_string(i) + " routed to the wrong bucket");
            }
        }
    };
    check(split.train, false, false, "train");
    check(split.setting(Setting::ud).validation, true, false, "ud.validation");
    check(split.setting(Setting::ud).test, true, false, "ud.test");
    check(split.setting(Setting::ut).validation, false, true, "ut.validation");
    check(split.setting(Setting::ut).test, false, true, "ut.test");
    check(split.setting(Setting::up).validation, true, true, "up.validation");
    check(split.setting(Setting::up).test, true, true, "up.test");
    for (std::size_t i = 0; i < seen.size(); ++i) {
        if (seen[i] == 0) problems.push_back("record " + std::to_string(i) + " is in no bucket");
        if (seen[i] > 1) problems.push_back("record " + std::to_string(i) + " appears in " + std::to_string(seen[i]) + " buckets");
    }
    return problems;
}

}  // namespace codiff::data
