#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mtlab/model.hpp"

namespace mtlab {

// Three toy languages over disjoint content-token ranges. E is the pivot.
enum class Lang { E, D, Z, Unknown };

const char* lang_name(Lang l);
Lang lang_from_name(const std::string& s);

// Token layout: specials first, then one content block of width W per language.
struct CorpusLayout {
    int words_per_lang = 50;

    static constexpr int BOS = 0, NL = 1, SEP = 2;
    static constexpr int TAG_E = 3, TAG_D = 4, TAG_Z = 5;
    static constexpr int CONTENT0 = 6;

    int vocab() const { return CONTENT0 + 3 * words_per_lang; }
    int tag(Lang l) const;
    int content_base(Lang l) const;
    bool is_content(int tok) const {
        return tok >= CONTENT0 && tok < vocab();
    }
    Lang token_lang(int tok) const;  // language of a content token or tag; else Unknown
    int word_index(int tok) const;   // index within its language block (content only)
};

// Per-language permutation from meaning index to surface word index. Identity
// by default; translation maps surface -> meaning -> surface.
struct WordMap {
    std::vector<int> pi[3], inv[3];  // indexed by Lang E/D/Z

    static WordMap identity(int W);
    static WordMap permuted(int W, std::uint64_t seed);

    int surface(const CorpusLayout& lay, Lang l, int meaning) const;
    int translate_token(const CorpusLayout& lay, int tok, Lang to) const;
    TokenSeq translate(const CorpusLayout& lay, const TokenSeq& toks, Lang to) const;
};

struct Setting {
    Lang src, tgt;
    bool operator==(const Setting&) const = default;
};
std::string setting_name(const Setting& s);                // "E-D"
Setting setting_from_name(const std::string& name);
std::vector<Setting> default_settings();                   // E→D, D→E, E→Z, Z→E

// A source sentence with its ground-truth translation (content tokens only).
struct Example {
    TokenSeq src, tgt;
};

struct SplitSizes {
    int exps = 0, train = 0, test = 0;
};

struct CorpusConfig {
    int words_per_lang = 50;
    int min_len = 3, max_len = 8;
    bool permuted_map = false;
    // sizes per setting, in default_settings() order
    std::array<SplitSizes, 4> sizes = {{{1002, 2037, 557},
                                        {1000, 1984, 549},
                                        {1002, 2037, 2074},
                                        {1948, 1875, 1976}}};
};

struct SettingCorpus {
    Setting setting;
    std::vector<Example> exps, train, test;
};

struct Corpus {
    CorpusConfig config;
    CorpusLayout layout;
    WordMap words;
    std::vector<SettingCorpus> settings;

    const SettingCorpus& setting(const Setting& s) const;
};

Corpus gen_corpus(const CorpusConfig& cfg, std::uint64_t seed);

void save_corpus(const Corpus& c, const std::string& dir);
Corpus load_corpus(const std::string& dir);

// ---------------------------------------------------------------------------
// Prompt rendering

// Variant 0 is the default framing; variants 1..2 permute or omit the
// separators while keeping exactly one query-source slot.
constexpr int n_template_variants = 3;

TokenSeq render_exemplar(const CorpusLayout& lay, const Setting& s, const TokenSeq& src,
                         const TokenSeq& tgt, int variant = 0);
// The query framing ends immediately after the target-language tag (plus SEP
// where the variant keeps it), ready for the model to continue.
TokenSeq render_query(const CorpusLayout& lay, const Setting& s, const TokenSeq& src,
                      int variant = 0);

struct PromptInstance {
    int k = 0;
    std::vector<Example> exemplars;
    Example query;
    Setting setting;
    int variant = 0;
    bool shuffled = false;
    TokenSeq rendered;
};

PromptInstance render_prompt(const CorpusLayout& lay, const Setting& s,
                             const std::vector<Example>& exemplars, const Example& query,
                             int variant = 0);

// Inverse of render_prompt for a known variant; throws on malformed input.
struct ParsedPrompt {
    int k = 0;
    std::vector<std::pair<TokenSeq, TokenSeq>> exemplars;
    TokenSeq query_src;
};
ParsedPrompt parse_prompt(const CorpusLayout& lay, const Setting& s, const TokenSeq& rendered,
                          int variant = 0);

// Replaces every exemplar target with a different target drawn from the pool
// (query untouched). With avoid_positional_collisions the replacement also
// disagrees with the ground-truth target at every aligned position, which the
// planted-model experiments rely on; plain inequality otherwise.
PromptInstance make_shuffled(const PromptInstance& prompt, const std::vector<Example>& pool,
                             std::uint64_t seed, bool avoid_positional_collisions = false);

enum class ShotSampling { Uniform, LengthBinned };

// Draws k distinct exemplar indices from the pool. LengthBinned prefers the
// bin holding query_len (bin width 2), walking outward to nearest non-empty
// bins (lower first on ties) when the preferred bin runs short. exclude
// removes one index (the query itself) from consideration.
std::vector<int> sample_exemplars(const std::vector<Example>& pool, int k, int query_len,
                                  ShotSampling strategy, std::mt19937_64& rng, int exclude = -1);

}  // namespace mtlab
