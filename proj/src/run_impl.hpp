#pragma once

#include <vector>

#include "mtlab/runtime.hpp"

namespace mtlab {

// Recorded intermediates for a window of positions [start, start+win).
// All arrays are window-position-major within each layer.
struct RecordedRun::Impl {
    const Weights* w = nullptr;
    ModelConfig cfg;
    int start = 0, win = 0, T = 0, prompt_len = 0;
    TokenSeq tokens;
    InterventionList edits;
    KVCache cache;

    std::vector<double> x_in;     // [L][win][d]   residual at layer input (post AddToResidual)
    std::vector<double> xn;       // [L][win][d]
    std::vector<double> q;        // [L][win][d]
    std::vector<double> probs;    // [L][H][win][T]
    std::vector<double> ctx;      // [L][win][d]   per-head contexts, head-blocked
    std::vector<double> contrib;  // [L][H][win][d] post-edit head contributions
    std::vector<double> attn_sum; // [L][win][d]   sum of post-edit contributions
    std::vector<double> resid2;   // [L][win][d]   FFN block input
    std::vector<double> xn2;      // [L][win][d]
    std::vector<double> u;        // [L][win][dff]
    std::vector<double> h_nat;    // [L][win][dff]
    std::vector<double> h_cons;   // [L][win][dff]
    std::vector<double> xf;       // [win][d]
    std::vector<double> xfn;      // [win][d]
    std::vector<double> logits;   // [win][V]

    int d() const { return cfg.d_model; }
    int dh() const { return cfg.head_dim(); }

    std::size_t ld(int l, int i) const {
        return (static_cast<std::size_t>(l) * win + i) * cfg.d_model;
    }
    std::size_t lff(int l, int i) const {
        return (static_cast<std::size_t>(l) * win + i) * cfg.d_ff;
    }
    std::size_t lhp(int l, int h, int i) const {
        return ((static_cast<std::size_t>(l) * cfg.n_heads + h) * win + i) * T;
    }
    std::size_t lhd(int l, int h, int i) const {
        return ((static_cast<std::size_t>(l) * cfg.n_heads + h) * win + i) * cfg.d_model;
    }

    // Scored window positions and the softmax seed for the objective.
    struct ScoreSeed {
        double value = 0.0;
        // pairs of (window index, dF/dlogits row)
        std::vector<std::pair<int, std::vector<double>>> seeds;
    };
    ScoreSeed score_with_seeds(ScoreMode mode, const TokenSeq& target, bool want_seeds) const;
};

}  // namespace mtlab
