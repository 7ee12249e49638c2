#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xmreg/layers.hpp"
#include "xmreg/tensor.hpp"

namespace xmreg {

/// Versioned checkpoint container: json header (kind, alternation index,
/// metadata, rng state, tensor directory) followed by raw little-endian
/// doubles. Round-trips bit-exactly.
struct Checkpoint {
    std::string kind;
    int it = 0;
    std::string rng_state;
    std::map<std::string, std::string> meta;
    std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

/// FNV-1a over the serialized parameter payload (names, shapes, raw bytes);
/// used for checkpoint-chain integrity checks.
uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull);
std::string param_hash(const std::vector<nn::NamedParam>& params);
std::string tensor_map_hash(const std::map<std::string, Tensor>& tensors);

/// Copies checkpoint tensors into live parameters (shapes must match).
void load_params(const Checkpoint& ck, const std::vector<nn::NamedParam>& params);
std::map<std::string, Tensor> dump_params(const std::vector<nn::NamedParam>& params);

} // namespace xmreg
