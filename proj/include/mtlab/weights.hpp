#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtlab/config.hpp"

namespace mtlab {

// Per-layer parameters. All matrices are row-major [out][in]; attention
// projections pack heads along the output dimension (head h owns output rows
// [h*head_dim, (h+1)*head_dim) of wq/wk/wv and input columns of the same
// range in wo).
struct LayerWeights {
    std::vector<float> wq;         // [d_model, d_model]
    std::vector<float> wk;         // [d_model, d_model]
    std::vector<float> wv;         // [d_model, d_model]
    std::vector<float> wo;         // [d_model, d_model]
    std::vector<float> attn_gain;  // [d_model]
    std::vector<float> ffn_gain;   // [d_model]
    std::vector<float> w_up;       // [d_ff, d_model]
    std::vector<float> w_down;     // [d_model, d_ff]
};

struct Weights {
    ModelConfig config;
    std::vector<float> tok_emb;     // [vocab_size, d_model]
    std::vector<float> pos_emb;     // [max_seq_len, d_model]
    std::vector<LayerWeights> layers;
    std::vector<float> final_gain;  // [d_model]
    std::vector<float> unembed;     // [vocab_size, d_model]

    // Allocates every tensor at the right size, zero-filled.
    static Weights zeros(const ModelConfig& cfg);

    // Seeded random initialisation (gaussian, scale 0.02; norm gains at 1).
    static Weights random_init(const ModelConfig& cfg, std::uint64_t seed);
};

// Serialises to a JSON manifest (format_version, config, ordered tensor
// descriptors with name/shape/offset) plus a sidecar blob holding the raw
// little-endian float32 data in manifest order. blob path = manifest path
// with its extension replaced by ".bin".
void save_weights(const Weights& w, const std::string& manifest_path);
Weights load_weights(const std::string& manifest_path);

}  // namespace mtlab
