#pragma once

#include <cstdint>

#include "mtlab/error.hpp"

namespace mtlab {

// Decoder-only transformer: pre-norm RMSNorm, learned absolute positions,
// per-head attention with causal mask, single up-projection GELU FFN, no
// biases, untied unembedding.
struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 64;
    int d_ff = 256;
    int vocab_size = 160;
    int max_seq_len = 512;
    double norm_eps = 1e-6;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_ff <= 0 || vocab_size <= 0 ||
            max_seq_len <= 0)
            throw config_error("model config: all dimensions must be positive");
        if (d_model % n_heads != 0)
            throw config_error("model config: d_model must be divisible by n_heads");
        if (norm_eps <= 0) throw config_error("model config: norm_eps must be positive");
    }

    bool operator==(const ModelConfig&) const = default;
};

}  // namespace mtlab
