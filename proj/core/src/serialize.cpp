#include "xmreg/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xmreg/errors.hpp"

namespace xmreg {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'X', 'M', 'R', 'G', 'C', 'K', 'P', '1'};
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    json dir = json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : ck.tensors) {
        dir.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += static_cast<uint64_t>(t.numel());
    }
    json header = {
        {"kind", ck.kind}, {"it", ck.it},       {"rng_state", ck.rng_state},
        {"meta", ck.meta}, {"tensors", dir},
    };
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("save_checkpoint: cannot open " + path);
    f.write(kMagic, 8);
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : ck.tensors)
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!f) throw Error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointMissing("checkpoint not found: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw Error("load_checkpoint: bad magic in " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(hs);

    Checkpoint ck;
    ck.kind = header.at("kind").get<std::string>();
    ck.it = header.at("it").get<int>();
    ck.rng_state = header.at("rng_state").get<std::string>();
    ck.meta = header.at("meta").get<std::map<std::string, std::string>>();
    for (const auto& e : header.at("tensors")) {
        auto shape = e.at("shape").get<std::vector<int64_t>>();
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(double)));
        ck.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
    }
    if (!f) throw Error("load_checkpoint: truncated file " + path);
    return ck;
}

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string param_hash(const std::vector<nn::NamedParam>& params) {
    return tensor_map_hash(dump_params(params));
}

std::string tensor_map_hash(const std::map<std::string, Tensor>& tensors) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : tensors) {
        h = fnv1a64(name.data(), name.size(), h);
        auto shape = t.shape();
        h = fnv1a64(shape.data(), shape.size() * sizeof(int64_t), h);
        h = fnv1a64(t.data(), static_cast<size_t>(t.numel()) * sizeof(double), h);
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

void load_params(const Checkpoint& ck, const std::vector<nn::NamedParam>& params) {
    for (const auto& p : params) {
        auto it = ck.tensors.find(p.name);
        if (it == ck.tensors.end())
            throw ArchitectureMismatch("checkpoint lacks parameter " + p.name);
        if (!(it->second.same_shape(p.var->value)))
            throw ArchitectureMismatch("parameter " + p.name + " shape " +
                                       it->second.shape_str() + " vs live " +
                                       p.var->value.shape_str());
        p.var->value = it->second;
    }
}

std::map<std::string, Tensor> dump_params(const std::vector<nn::NamedParam>& params) {
    std::map<std::string, Tensor> out;
    for (const auto& p : params) out.emplace(p.name, p.var->value);
    return out;
}

} // namespace xmreg
