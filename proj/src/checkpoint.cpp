#include "codiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <vector>

namespace codiff::checkpoint {

namespace {

constexpr char kMagic[4] = {'C', 'O', 'D', 'F'};

template <typename U>
void put_le(std::vector<char>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
public:
    Reader(std::vector<char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    bool done() const { return pos_ == bytes_.size(); }

    template <typename U>
    U get() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }

    std::string str(std::size_t n) {
        need(n);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated file " + path_);
    }

    std::vector<char> bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

void write_tensor_file(const std::filesystem::path& path, const TensorMap& entries) {
    std::vector<char> out(kMagic, kMagic + 4);
    put_le<std::uint16_t>(out, kFormatVersion);
    for (const auto& [name, t] : entries) {
        if (t.rank() > 255) throw std::invalid_argument("checkpoint: rank too large for '" + name + "'");
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<char>(t.rank()));
        for (std::size_t d : t.shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (float v : t.data) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw std::runtime_error("checkpoint: cannot write " + path.string());
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

TensorMap read_tensor_file(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw std::runtime_error("checkpoint: cannot open " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    Reader in(std::move(bytes), path.string());
    if (in.str(4) != std::string(kMagic, 4)) throw std::runtime_error("checkpoint: bad magic in " + path.string());
    const auto version = in.get<std::uint16_t>();
    if (version != kFormatVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) + " in " + path.string());
    TensorMap entries;
    while (!in.done()) {
        const auto name_len = in.get<std::uint32_t>();
        std::string name = in.str(name_len);
        const auto rank = in.get<std::uint8_t>();
        Shape shape(rank);
        for (auto& d : shape) d = in.get<std::uint32_t>();
        Tensor<float> t(shape);
        for (auto& v : t.data) v = std::bit_cast<float>(in.get<std::uint32_t>());
        if (!entries.emplace(std::move(name), std::move(t)).second)
            throw std::runtime_error("checkpoint: duplicate entry in " + path.string());
    }
    return entries;
}

template <typename T>
void save_values(const ParamStore<T>& store, const std::filesystem::path& path, const TensorMap& extra) {
    TensorMap entries = extra;
    for (const auto& [name, p] : store.entries()) {
        if (entries.count(name)) throw std::invalid_argument("checkpoint: extra entry shadows parameter '" + name + "'");
        entries.emplace(name, p.value.template cast<float>());
    }
    write_tensor_file(path, entries);
}

template <typename T>
TensorMap load_values(ParamStore<T>& store, const std::filesystem::path& path) {
    TensorMap entries = read_tensor_file(path);
    for (auto& [name, p] : store.entries()) {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::runtime_error("checkpoint: " + path.string() + " lacks '" + name + "'");
        if (it->second.shape != p.value.shape)
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': file " + shape_str(it->second.shape) +
                                     ", model " + shape_str(p.value.shape));
        p.value = it->second.template cast<T>();
        entries.erase(it);
    }
    return entries;
}

template <typename T>
void save_adam_state(const ParamStore<T>& store, const std::filesystem::path& path) {
    TensorMap entries;
    for (const auto& [name, p] : store.entries()) {
        entries.emplace(name + ".adam_m", p.adam_m.template cast<float>());
        entries.emplace(name + ".adam_v", p.adam_v.template cast<float>());
    }
    entries.emplace("adam.step", scalar_tensor(static_cast<float>(store.step())));
    write_tensor_file(path, entries);
}

template <typename T>
void load_adam_state(ParamStore<T>& store, const std::filesystem::path& path) {
    TensorMap entries = read_tensor_file(path);
    for (auto& [name, p] : store.entries()) {
        auto m = entries.find(name + ".adam_m");
        auto v = entries.find(name + ".adam_v");
        if (m == entries.end() || v == entries.end() || m->second.shape != p.value.shape ||
            v->second.shape != p.value.shape)
            throw std::runtime_error("checkpoint: missing or mismatched Adam state for '" + name + "'");
        p.adam_m = m->second.template cast<T>();
        p.adam_v = v->second.template cast<T>();
    }
    auto step = entries.find("adam.step");
    if (step == entries.end()) throw std::runtime_error("checkpoint: missing adam.step in " + path.string());
    store.set_step(static_cast<std::int64_t>(step->second.item()));
}

template void save_values<float>(const ParamStore<float>&, const std::filesystem::path&, const TensorMap&);
template void save_values<double>(const ParamStore<double>&, const std::filesystem::path&, const TensorMap&);
template TensorMap load_values<float>(ParamStore<float>&, const std::filesystem::path&);
template TensorMap load_values<double>(ParamStore<double>&, const std::filesystem::path&);
template void save_adam_state<float>(const ParamStore<float>&, const std::filesystem::path&);
template void save_adam_state<double>(const ParamStore<double>&, const std::filesystem::path&);
template void load_adam_state<float>(ParamStore<float>&, const std::filesystem::path&);
template void load_adam_state<double>(ParamStore<double>&, const std::filesystem::path&);

}  // namespace codiff::checkpoint
