#pragma once

#include <cstdint>
#include <vector>

#include "mtlab/weights.hpp"

namespace mtlab {

using TokenSeq = std::vector<int>;

// Position selectors are resolved against a concrete sequence at run time.
// GeneratedPositions covers the last prompt token plus every subsequently
// decoded position, so an edit applied there shapes each emitted token.
enum class PositionKind { LastPromptToken, AllPositions, GeneratedPositions, ExplicitPositions };

struct Positions {
    PositionKind kind = PositionKind::AllPositions;
    std::vector<int> explicit_positions;

    static Positions last_prompt_token() { return {PositionKind::LastPromptToken, {}}; }
    static Positions all() { return {PositionKind::AllPositions, {}}; }
    static Positions generated() { return {PositionKind::GeneratedPositions, {}}; }
    static Positions at(std::vector<int> idx) {
        return {PositionKind::ExplicitPositions, std::move(idx)};
    }

    bool contains(int pos, int prompt_len) const;
};

enum class InterventionKind {
    ReplaceHeadContribution,  // head's residual-space output := vector
    AddToHeadContribution,    // head's residual-space output += vector
    AddToResidual,            // residual stream at the layer input += vector
    ScaleNeuron,              // post-activation FFN value *= value
    ClampNeuron,              // post-activation FFN value := value
};

struct Intervention {
    InterventionKind kind;
    int layer = 0;
    int head = -1;    // head edits only
    int neuron = -1;  // neuron edits only
    Positions where;
    std::vector<double> vector;  // d_model, head/residual edits only
    double value = 0.0;          // scale factor or clamp value

    static Intervention replace_head(int layer, int head, Positions where, std::vector<double> v);
    static Intervention add_to_head(int layer, int head, Positions where, std::vector<double> v);
    static Intervention add_to_residual(int layer, Positions where, std::vector<double> v);
    static Intervention scale_neuron(int layer, int neuron, Positions where, double factor);
    static Intervention clamp_neuron(int layer, int neuron, Positions where, double value);
};

using InterventionList = std::vector<Intervention>;

// Bounds and uniqueness checks; throws on out-of-range coordinates, wrong
// vector lengths, or two edits of the same kind aimed at the same site.
void validate_interventions(const ModelConfig& cfg, const InterventionList& edits);

struct CaptureSpec {
    bool heads = false;
    bool neurons = false;
    Positions where = Positions::all();
};

// Captured activations, stored as consumed by downstream computation (i.e.
// after any interventions). positions lists the captured absolute indices in
// ascending order; head_contrib is [layer][head][slot][d_model] and
// neuron_act is [layer][slot][d_ff], both flattened.
struct ActivationTrace {
    int n_layers = 0, n_heads = 0, d_model = 0, d_ff = 0;
    std::vector<int> positions;
    std::vector<double> head_contrib;
    std::vector<double> neuron_act;

    int slot_of(int pos) const;
    const double* head(int layer, int head, int slot) const;
    double neuron(int layer, int slot, int neuron) const;
};

struct ForwardResult {
    int seq_len = 0;
    int vocab = 0;
    std::vector<double> logits;  // [seq_len][vocab]
    ActivationTrace trace;

    const double* logits_at(int pos) const { return logits.data() + static_cast<std::size_t>(pos) * vocab; }
};

// Full forward pass. prompt_len defaults to the sequence length and only
// matters for resolving LastPromptToken / GeneratedPositions selectors.
ForwardResult forward(const Weights& w, const TokenSeq& tokens,
                      const InterventionList& edits = {}, const CaptureSpec& capture = {},
                      int prompt_len = -1);

struct GenResult {
    TokenSeq generated;  // stop token excluded
    bool hit_max = false;
};

// Greedy decoding with incremental K/V reuse; ties break toward the lowest
// token id. A pure function of its inputs.
GenResult generate(const Weights& w, const TokenSeq& prompt, int max_new_tokens, int stop_token,
                   const InterventionList& edits = {});

// Same decoding loop but re-running the full forward at every step; kept as
// the reference implementation the cached path is tested against.
GenResult generate_reference(const Weights& w, const TokenSeq& prompt, int max_new_tokens,
                             int stop_token, const InterventionList& edits = {});

enum class ScoreMode {
    FirstTokenProb,   // p(target[0] | prompt)
    MeanLogProb,      // mean_i log p(target[i] | prompt, target[<i])
    FirstTokenLogit,  // pre-softmax logit of target[0] at the last prompt position
};

// Teacher-forced scoring of target under the prompt.
double sequence_score(const Weights& w, const TokenSeq& prompt, const TokenSeq& target,
                      ScoreMode mode, const InterventionList& edits = {});

// d(score)/d(clamp value) with the neuron clamped to clamp_value at the
// selected positions (on top of any extra edits). Computed by reverse-mode
// accumulation through the clamped forward.
double neuron_gradient(const Weights& w, const TokenSeq& prompt, const TokenSeq& target,
                       ScoreMode mode, int layer, int neuron, double clamp_value,
                       const Positions& where, const InterventionList& extra = {});

}  // namespace mtlab
