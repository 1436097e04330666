#pragma once

#include <memory>
#include <vector>

#include "mtlab/model.hpp"

namespace mtlab {

// Per-layer attention keys/values for positions [0, n), head-blocked rows of
// length d_model, position-major. Snapshots of a prefix can be handed to a
// later window run so only trailing positions get recomputed.
struct KVCache {
    int d_model = 0;
    int n = 0;
    std::vector<std::vector<double>> k, v;  // [layer][pos * d_model + c]

    void init(const ModelConfig& cfg, int capacity);
    double* k_at(int layer, int pos) { return k[layer].data() + static_cast<std::size_t>(pos) * d_model; }
    double* v_at(int layer, int pos) { return v[layer].data() + static_cast<std::size_t>(pos) * d_model; }
    const double* k_at(int layer, int pos) const {
        return k[layer].data() + static_cast<std::size_t>(pos) * d_model;
    }
    const double* v_at(int layer, int pos) const {
        return v[layer].data() + static_cast<std::size_t>(pos) * d_model;
    }
    KVCache prefix_copy(int upto) const;
};

// Gradient mirror of Weights, accumulated in double.
struct ParamGrads {
    std::vector<double> tok_emb, pos_emb, final_gain, unembed;
    struct Layer {
        std::vector<double> wq, wk, wv, wo, attn_gain, ffn_gain, w_up, w_down;
    };
    std::vector<Layer> layers;

    static ParamGrads zeros(const ModelConfig& cfg);
    void add_scaled(const ParamGrads& other, double s);
};

// A forward pass over a window of positions [start, start+len) with all
// intermediates recorded so gradients can be pushed back through it. The
// prefix [0, start) is supplied as a read-only cache; gradients never flow
// into it (valid whenever the objective only reads window positions, since
// prefix keys/values are unaffected by window-local edits).
class RecordedRun {
public:
    RecordedRun(const Weights& w, const TokenSeq& tokens, int prompt_len,
                const InterventionList& edits, const KVCache* prefix = nullptr);

    int seq_len() const;
    int start() const;
    const KVCache& cache() const;
    const TokenSeq& tokens() const;

    const double* logits_at(int abs_pos) const;            // window positions only
    double neuron_value(int layer, int abs_pos, int neuron) const;  // as consumed
    const double* head_contribution(int layer, int head, int abs_pos) const;  // as consumed
    const double* attn_update(int layer, int abs_pos) const;

    // Teacher-forced score of target given prompt_len prompt tokens. The
    // scored positions must lie inside the window.
    double score(ScoreMode mode, const TokenSeq& target) const;

    // Reverse-mode pass from the score back to the post-edit FFN activations
    // of (layer, neuron) at the given absolute positions. Returns dF/dh for
    // each position in order.
    std::vector<double> neuron_score_grads(ScoreMode mode, const TokenSeq& target, int layer,
                                           int neuron, const std::vector<int>& positions) const;

    // Reverse-mode pass of mean next-token cross-entropy over the whole
    // window, accumulating parameter gradients. Returns the loss.
    double cross_entropy_param_grads(ParamGrads& out) const;

    ActivationTrace make_trace(const CaptureSpec& capture) const;

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
    friend struct RunBackward;
};

// Light incremental forward for greedy decoding; no recording.
class Decoder {
public:
    Decoder(const Weights& w, const InterventionList& edits, int prompt_len);
    // Processes the token at absolute position pos (must be fed in order);
    // returns the logits row for that position.
    const double* step(int token, int pos);

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
};

std::vector<int> resolve_positions(const Positions& where, int seq_len, int prompt_len);

}  // namespace mtlab
