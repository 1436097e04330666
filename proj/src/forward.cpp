#include <algorithm>
#include <cmath>
#include <cstring>

#include "mtlab/kernels.hpp"
#include "mtlab/model.hpp"
#include "mtlab/runtime.hpp"
#include "run_impl.hpp"

namespace mtlab {

namespace {

int argmax_lowest(const double* v, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j)
        if (v[j] > v[best]) best = j;
    return best;
}

// log softmax denominator: max + log(sum exp(x - max))
double logsumexp(const double* v, int n) {
    double m = v[0];
    for (int j = 1; j < n; ++j) m = std::max(m, v[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp(v[j] - m);
    return m + std::log(s);
}

void check_tokens(const ModelConfig& cfg, const TokenSeq& tokens) {
    if (tokens.empty()) throw config_error("sequence must be non-empty");
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
        throw config_error("sequence length exceeds max_seq_len");
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size) throw config_error("token id out of range");
}

// out[r] += Wo[r, h*dh .. (h+1)*dh) . ctxh
void head_out_project(const float* wo, int d, int h, int dh, const double* ctxh, double* out) {
    const int c0 = h * dh;
    for (int r = 0; r < d; ++r) {
        const float* row = wo + static_cast<std::size_t>(r) * d + c0;
        double acc = 0.0;
        for (int c = 0; c < dh; ++c) acc += static_cast<double>(row[c]) * ctxh[c];
        out[r] = acc;
    }
}

void apply_head_edits(const InterventionList& edits, int layer, int n_heads, int d, int pos,
                      int prompt_len, double* contrib_block) {
    for (const auto& e : edits) {
        if (e.layer != layer) continue;
        if (e.kind != InterventionKind::ReplaceHeadContribution &&
            e.kind != InterventionKind::AddToHeadContribution)
            continue;
        if (!e.where.contains(pos, prompt_len)) continue;
        double* c = contrib_block + static_cast<std::size_t>(e.head) * d;
        if (e.kind == InterventionKind::ReplaceHeadContribution)
            for (int r = 0; r < d; ++r) c[r] = e.vector[r];
        else
            for (int r = 0; r < d; ++r) c[r] += e.vector[r];
    }
    (void)n_heads;
}

void apply_neuron_edits(const InterventionList& edits, int layer, int pos, int prompt_len,
                        double* h, int d_ff) {
    for (const auto& e : edits) {
        if (e.layer != layer) continue;
        if (e.kind != InterventionKind::ScaleNeuron && e.kind != InterventionKind::ClampNeuron)
            continue;
        if (!e.where.contains(pos, prompt_len)) continue;
        if (e.kind == InterventionKind::ScaleNeuron)
            h[e.neuron] *= e.value;
        else
            h[e.neuron] = e.value;
    }
    (void)d_ff;
}

void apply_residual_edits(const InterventionList& edits, int layer, int pos, int prompt_len,
                          double* x, int d) {
    for (const auto& e : edits) {
        if (e.kind != InterventionKind::AddToResidual || e.layer != layer) continue;
        if (!e.where.contains(pos, prompt_len)) continue;
        for (int r = 0; r < d; ++r) x[r] += e.vector[r];
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Positions / interventions

bool Positions::contains(int pos, int prompt_len) const {
    switch (kind) {
        case PositionKind::LastPromptToken: return pos == prompt_len - 1;
        case PositionKind::AllPositions: return true;
        case PositionKind::GeneratedPositions: return pos >= prompt_len - 1;
        case PositionKind::ExplicitPositions:
            return std::find(explicit_positions.begin(), explicit_positions.end(), pos) !=
                   explicit_positions.end();
    }
    return false;
}

std::vector<int> resolve_positions(const Positions& where, int seq_len, int prompt_len) {
    if (prompt_len < 1 || prompt_len > seq_len)
        throw config_error("prompt length out of range for position resolution");
    std::vector<int> out;
    switch (where.kind) {
        case PositionKind::LastPromptToken: out.push_back(prompt_len - 1); break;
        case PositionKind::AllPositions:
            for (int p = 0; p < seq_len; ++p) out.push_back(p);
            break;
        case PositionKind::GeneratedPositions:
            for (int p = prompt_len - 1; p < seq_len; ++p) out.push_back(p);
            break;
        case PositionKind::ExplicitPositions:
            for (int p : where.explicit_positions)
                if (p >= 0 && p < seq_len) out.push_back(p);
            std::sort(out.begin(), out.end());
            out.erase(std::unique(out.begin(), out.end()), out.end());
            break;
    }
    return out;
}

Intervention Intervention::replace_head(int layer, int head, Positions where,
                                        std::vector<double> v) {
    Intervention e;
    e.kind = InterventionKind::ReplaceHeadContribution;
    e.layer = layer;
    e.head = head;
    e.where = std::move(where);
    e.vector = std::move(v);
    return e;
}

Intervention Intervention::add_to_head(int layer, int head, Positions where,
                                       std::vector<double> v) {
    Intervention e;
    e.kind = InterventionKind::AddToHeadContribution;
    e.layer = layer;
    e.head = head;
    e.where = std::move(where);
    e.vector = std::move(v);
    return e;
}

Intervention Intervention::add_to_residual(int layer, Positions where, std::vector<double> v) {
    Intervention e;
    e.kind = InterventionKind::AddToResidual;
    e.layer = layer;
    e.where = std::move(where);
    e.vector = std::move(v);
    return e;
}

Intervention Intervention::scale_neuron(int layer, int neuron, Positions where, double factor) {
    Intervention e;
    e.kind = InterventionKind::ScaleNeuron;
    e.layer = layer;
    e.neuron = neuron;
    e.where = std::move(where);
    e.value = factor;
    return e;
}

Intervention Intervention::clamp_neuron(int layer, int neuron, Positions where, double value) {
    Intervention e;
    e.kind = InterventionKind::ClampNeuron;
    e.layer = layer;
    e.neuron = neuron;
    e.where = std::move(where);
    e.value = value;
    return e;
}

void validate_interventions(const ModelConfig& cfg, const InterventionList& edits) {
    // site key: (kind, layer, head-or-neuron); -1 marks whole-residual edits
    std::vector<std::tuple<int, int, int>> seen;
    for (const auto& e : edits) {
        if (e.layer < 0 || e.layer >= cfg.n_layers)
            throw config_error("intervention layer out of range");
        int unit = -1;
        bool has_vec = false;
        switch (e.kind) {
            case InterventionKind::ReplaceHeadContribution:
            case InterventionKind::AddToHeadContribution:
                if (e.head < 0 || e.head >= cfg.n_heads)
                    throw config_error("intervention head out of range");
                unit = e.head;
                has_vec = true;
                break;
            case InterventionKind::AddToResidual: has_vec = true; break;
            case InterventionKind::ScaleNeuron:
            case InterventionKind::ClampNeuron:
                if (e.neuron < 0 || e.neuron >= cfg.d_ff)
                    throw config_error("intervention neuron out of range");
                unit = e.neuron;
                break;
        }
        if (has_vec) {
            if (static_cast<int>(e.vector.size()) != cfg.d_model)
                throw config_error("intervention vector length must equal d_model");
            for (double x : e.vector)
                if (!std::isfinite(x)) throw config_error("intervention vector must be finite");
        } else if (!std::isfinite(e.value)) {
            throw config_error("intervention value must be finite");
        }
        if (e.where.kind == PositionKind::ExplicitPositions)
            for (int p : e.where.explicit_positions)
                if (p < 0) throw config_error("intervention positions must be non-negative");
        auto key = std::make_tuple(static_cast<int>(e.kind), e.layer, unit);
        if (std::find(seen.begin(), seen.end(), key) != seen.end())
            throw config_error("duplicate intervention for the same site");
        seen.push_back(key);
    }
}

// ---------------------------------------------------------------------------
// ActivationTrace

int ActivationTrace::slot_of(int pos) const {
    auto it = std::lower_bound(positions.begin(), positions.end(), pos);
    if (it == positions.end() || *it != pos)
        throw config_error("trace: position was not captured");
    return static_cast<int>(it - positions.begin());
}

const double* ActivationTrace::head(int layer, int h, int slot) const {
    const std::size_t s = positions.size();
    return head_contrib.data() +
           ((static_cast<std::size_t>(layer) * n_heads + h) * s + slot) * d_model;
}

double ActivationTrace::neuron(int layer, int slot, int n) const {
    const std::size_t s = positions.size();
    return neuron_act[(static_cast<std::size_t>(layer) * s + slot) * d_ff + n];
}

// ---------------------------------------------------------------------------
// KVCache / ParamGrads

void KVCache::init(const ModelConfig& cfg, int capacity) {
    d_model = cfg.d_model;
    n = 0;
    k.assign(cfg.n_layers, std::vector<double>(static_cast<std::size_t>(capacity) * d_model, 0.0));
    v = k;
}

KVCache KVCache::prefix_copy(int upto) const {
    KVCache out;
    out.d_model = d_model;
    out.n = upto;
    out.k.resize(k.size());
    out.v.resize(v.size());
    for (std::size_t l = 0; l < k.size(); ++l) {
        out.k[l].assign(k[l].begin(), k[l].begin() + static_cast<std::size_t>(upto) * d_model);
        out.v[l].assign(v[l].begin(), v[l].begin() + static_cast<std::size_t>(upto) * d_model);
    }
    return out;
}

ParamGrads ParamGrads::zeros(const ModelConfig& cfg) {
    ParamGrads g;
    auto zero = [](std::vector<double>& v, std::size_t a, std::size_t b) { v.assign(a * b, 0.0); };
    zero(g.tok_emb, cfg.vocab_size, cfg.d_model);
    zero(g.pos_emb, cfg.max_seq_len, cfg.d_model);
    zero(g.final_gain, cfg.d_model, 1);
    zero(g.unembed, cfg.vocab_size, cfg.d_model);
    g.layers.resize(cfg.n_layers);
    for (auto& l : g.layers) {
        zero(l.wq, cfg.d_model, cfg.d_model);
        zero(l.wk, cfg.d_model, cfg.d_model);
        zero(l.wv, cfg.d_model, cfg.d_model);
        zero(l.wo, cfg.d_model, cfg.d_model);
        zero(l.attn_gain, cfg.d_model, 1);
        zero(l.ffn_gain, cfg.d_model, 1);
        zero(l.w_up, cfg.d_ff, cfg.d_model);
        zero(l.w_down, cfg.d_model, cfg.d_ff);
    }
    return g;
}

void ParamGrads::add_scaled(const ParamGrads& o, double s) {
    auto axpy = [s](std::vector<double>& a, const std::vector<double>& b) {
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
    };
    axpy(tok_emb, o.tok_emb);
    axpy(pos_emb, o.pos_emb);
    axpy(final_gain, o.final_gain);
    axpy(unembed, o.unembed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        axpy(layers[l].wq, o.layers[l].wq);
        axpy(layers[l].wk, o.layers[l].wk);
        axpy(layers[l].wv, o.layers[l].wv);
        axpy(layers[l].wo, o.layers[l].wo);
        axpy(layers[l].attn_gain, o.layers[l].attn_gain);
        axpy(layers[l].ffn_gain, o.layers[l].ffn_gain);
        axpy(layers[l].w_up, o.layers[l].w_up);
        axpy(layers[l].w_down, o.layers[l].w_down);
    }
}

// ---------------------------------------------------------------------------
// RecordedRun

RecordedRun::RecordedRun(const Weights& w, const TokenSeq& tokens, int prompt_len,
                         const InterventionList& edits, const KVCache* prefix) {
    const ModelConfig& cfg = w.config;
    cfg.validate();
    check_tokens(cfg, tokens);
    validate_interventions(cfg, edits);
    const int T = static_cast<int>(tokens.size());
    if (prompt_len < 1 || prompt_len > T) throw config_error("prompt length out of range");
    int start = 0;
    if (prefix) {
        if (prefix->d_model != cfg.d_model ||
            static_cast<int>(prefix->k.size()) != cfg.n_layers)
            throw config_error("prefix cache does not match model geometry");
        if (prefix->n >= T) throw config_error("prefix cache must leave at least one position");
        start = prefix->n;
    }

    impl_ = std::make_shared<Impl>();
    Impl& im = *impl_;
    im.w = &w;
    im.cfg = cfg;
    im.start = start;
    im.T = T;
    im.win = T - start;
    im.prompt_len = prompt_len;
    im.tokens = tokens;
    im.edits = edits;
    im.cache.init(cfg, T);
    if (prefix) {
        for (int l = 0; l < cfg.n_layers; ++l) {
            std::copy(prefix->k[l].begin(),
                      prefix->k[l].begin() + static_cast<std::size_t>(start) * cfg.d_model,
                      im.cache.k[l].begin());
            std::copy(prefix->v[l].begin(),
                      prefix->v[l].begin() + static_cast<std::size_t>(start) * cfg.d_model,
                      im.cache.v[l].begin());
        }
    }
    im.cache.n = T;

    const int L = cfg.n_layers, H = cfg.n_heads, d = cfg.d_model, dff = cfg.d_ff;
    const int dh = cfg.head_dim();
    const int win = im.win;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    auto sz = [](int a, int b, int c) {
        return static_cast<std::size_t>(a) * b * c;
    };
    im.x_in.assign(sz(L, win, d), 0.0);
    im.xn.assign(sz(L, win, d), 0.0);
    im.q.assign(sz(L, win, d), 0.0);
    im.probs.assign(static_cast<std::size_t>(L) * H * win * T, 0.0);
    im.ctx.assign(sz(L, win, d), 0.0);
    im.contrib.assign(static_cast<std::size_t>(L) * H * win * d, 0.0);
    im.attn_sum.assign(sz(L, win, d), 0.0);
    im.resid2.assign(sz(L, win, d), 0.0);
    im.xn2.assign(sz(L, win, d), 0.0);
    im.u.assign(sz(L, win, dff), 0.0);
    im.h_nat.assign(sz(L, win, dff), 0.0);
    im.h_cons.assign(sz(L, win, dff), 0.0);
    im.xf.assign(sz(1, win, d), 0.0);
    im.xfn.assign(sz(1, win, d), 0.0);
    im.logits.assign(static_cast<std::size_t>(win) * cfg.vocab_size, 0.0);

    // residual stream for the window, carried across layers
    std::vector<double> res(sz(1, win, d), 0.0);
    for (int i = 0; i < win; ++i) {
        const int abs = start + i;
        const float* te = w.tok_emb.data() + static_cast<std::size_t>(tokens[abs]) * d;
        const float* pe = w.pos_emb.data() + static_cast<std::size_t>(abs) * d;
        double* r = res.data() + static_cast<std::size_t>(i) * d;
        for (int c = 0; c < d; ++c) r[c] = static_cast<double>(te[c]) + static_cast<double>(pe[c]);
    }

    std::vector<double> kbuf(d), vbuf(d), scores;
    for (int l = 0; l < L; ++l) {
        const LayerWeights& lw = w.layers[l];
        // layer input, normalisation, projections, cache fill
        for (int i = 0; i < win; ++i) {
            const int abs = start + i;
            double* r = res.data() + static_cast<std::size_t>(i) * d;
            apply_residual_edits(edits, l, abs, prompt_len, r, d);
            std::copy(r, r + d, im.x_in.data() + im.ld(l, i));
            double* nx = im.xn.data() + im.ld(l, i);
            rmsnorm(r, lw.attn_gain.data(), nx, d, cfg.norm_eps);
            matvec(lw.wq.data(), nx, im.q.data() + im.ld(l, i), d, d);
            matvec(lw.wk.data(), nx, kbuf.data(), d, d);
            matvec(lw.wv.data(), nx, vbuf.data(), d, d);
            std::copy(kbuf.begin(), kbuf.end(), im.cache.k_at(l, abs));
            std::copy(vbuf.begin(), vbuf.end(), im.cache.v_at(l, abs));
        }
        // attention, head outputs, FFN
        for (int i = 0; i < win; ++i) {
            const int abs = start + i;
            const double* qi = im.q.data() + im.ld(l, i);
            double* ctxi = im.ctx.data() + im.ld(l, i);
            for (int h = 0; h < H; ++h) {
                const int c0 = h * dh;
                scores.assign(static_cast<std::size_t>(abs) + 1, 0.0);
                for (int j = 0; j <= abs; ++j) {
                    const double* kj = im.cache.k_at(l, j) + c0;
                    double acc = 0.0;
                    for (int c = 0; c < dh; ++c) acc += qi[c0 + c] * kj[c];
                    scores[j] = acc * scale;
                }
                softmax_inplace(scores.data(), abs + 1);
                std::copy(scores.begin(), scores.end(), im.probs.data() + im.lhp(l, h, i));
                double* ch = ctxi + c0;
                std::fill(ch, ch + dh, 0.0);
                for (int j = 0; j <= abs; ++j) {
                    const double* vj = im.cache.v_at(l, j) + c0;
                    const double a = scores[j];
                    for (int c = 0; c < dh; ++c) ch[c] += a * vj[c];
                }
                head_out_project(lw.wo.data(), d, h, dh, ch,
                                 im.contrib.data() + im.lhd(l, h, i));
            }
            double* cb = im.contrib.data() + im.lhd(l, 0, i);
            apply_head_edits(edits, l, H, d, abs, prompt_len, cb);
            double* asum = im.attn_sum.data() + im.ld(l, i);
            std::fill(asum, asum + d, 0.0);
            for (int h = 0; h < H; ++h) {
                const double* c = im.contrib.data() + im.lhd(l, h, i);
                for (int r = 0; r < d; ++r) asum[r] += c[r];
            }
            double* r = res.data() + static_cast<std::size_t>(i) * d;
            for (int c = 0; c < d; ++c) r[c] = im.x_in[im.ld(l, i) + c] + asum[c];
            std::copy(r, r + d, im.resid2.data() + im.ld(l, i));
            double* nx2 = im.xn2.data() + im.ld(l, i);
            rmsnorm(r, lw.ffn_gain.data(), nx2, d, cfg.norm_eps);
            double* ui = im.u.data() + im.lff(l, i);
            matvec(lw.w_up.data(), nx2, ui, dff, d);
            double* hn = im.h_nat.data() + im.lff(l, i);
            for (int n = 0; n < dff; ++n) hn[n] = gelu(ui[n]);
            double* hc = im.h_cons.data() + im.lff(l, i);
            std::copy(hn, hn + dff, hc);
            apply_neuron_edits(edits, l, abs, prompt_len, hc, dff);
            std::vector<double> f(d);
            matvec(lw.w_down.data(), hc, f.data(), d, dff);
            for (int c = 0; c < d; ++c) r[c] += f[c];
        }
    }
    for (int i = 0; i < win; ++i) {
        const double* r = res.data() + static_cast<std::size_t>(i) * d;
        std::copy(r, r + d, im.xf.data() + static_cast<std::size_t>(i) * d);
        double* fn = im.xfn.data() + static_cast<std::size_t>(i) * d;
        rmsnorm(r, w.final_gain.data(), fn, d, cfg.norm_eps);
        matvec(w.unembed.data(), fn, im.logits.data() + static_cast<std::size_t>(i) * cfg.vocab_size,
               cfg.vocab_size, d);
    }
}

int RecordedRun::seq_len() const { return impl_->T; }
int RecordedRun::start() const { return impl_->start; }
const KVCache& RecordedRun::cache() const { return impl_->cache; }
const TokenSeq& RecordedRun::tokens() const { return impl_->tokens; }

const double* RecordedRun::logits_at(int abs_pos) const {
    const Impl& im = *impl_;
    if (abs_pos < im.start || abs_pos >= im.T)
        throw config_error("logits requested outside the recorded window");
    return im.logits.data() +
           static_cast<std::size_t>(abs_pos - im.start) * im.cfg.vocab_size;
}

double RecordedRun::neuron_value(int layer, int abs_pos, int neuron) const {
    const Impl& im = *impl_;
    if (abs_pos < im.start || abs_pos >= im.T)
        throw config_error("activation requested outside the recorded window");
    return im.h_cons[im.lff(layer, abs_pos - im.start) + neuron];
}

const double* RecordedRun::head_contribution(int layer, int head, int abs_pos) const {
    const Impl& im = *impl_;
    if (abs_pos < im.start || abs_pos >= im.T)
        throw config_error("activation requested outside the recorded window");
    return im.contrib.data() + im.lhd(layer, head, abs_pos - im.start);
}

const double* RecordedRun::attn_update(int layer, int abs_pos) const {
    const Impl& im = *impl_;
    if (abs_pos < im.start || abs_pos >= im.T)
        throw config_error("activation requested outside the recorded window");
    return im.attn_sum.data() + im.ld(layer, abs_pos - im.start);
}

RecordedRun::Impl::ScoreSeed RecordedRun::Impl::score_with_seeds(ScoreMode mode,
                                                                 const TokenSeq& target,
                                                                 bool want_seeds) const {
    if (target.empty()) throw config_error("score target must be non-empty");
    for (int t : target)
        if (t < 0 || t >= cfg.vocab_size) throw config_error("target token out of range");
    const int V = cfg.vocab_size;
    ScoreSeed out;
    auto row_of = [&](int abs) -> const double* {
        if (abs < start || abs >= T)
            throw config_error("scored position lies outside the recorded window");
        return logits.data() + static_cast<std::size_t>(abs - start) * V;
    };
    if (mode == ScoreMode::FirstTokenLogit) {
        const int abs = prompt_len - 1;
        out.value = row_of(abs)[target[0]];
        if (want_seeds) {
            std::vector<double> seed(V, 0.0);
            seed[target[0]] = 1.0;
            out.seeds.emplace_back(abs - start, std::move(seed));
        }
    } else if (mode == ScoreMode::FirstTokenProb) {
        const int abs = prompt_len - 1;
        const double* lg = row_of(abs);
        const double lse = logsumexp(lg, V);
        std::vector<double> p(V);
        for (int j = 0; j < V; ++j) p[j] = std::exp(lg[j] - lse);
        const double pt = p[target[0]];
        out.value = pt;
        if (want_seeds) {
            std::vector<double> seed(V);
            for (int j = 0; j < V; ++j) seed[j] = pt * ((j == target[0] ? 1.0 : 0.0) - p[j]);
            out.seeds.emplace_back(abs - start, std::move(seed));
        }
    } else {  // MeanLogProb
        const int n = static_cast<int>(target.size());
        if (prompt_len - 1 + n > T)
            throw config_error("scored positions lie outside the recorded window");
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
            const int abs = prompt_len - 1 + i;
            const double* lg = row_of(abs);
            const double lse = logsumexp(lg, V);
            acc += lg[target[i]] - lse;
            if (want_seeds) {
                std::vector<double> seed(V);
                for (int j = 0; j < V; ++j)
                    seed[j] = ((j == target[i] ? 1.0 : 0.0) - std::exp(lg[j] - lse)) / n;
                out.seeds.emplace_back(abs - start, std::move(seed));
            }
        }
        out.value = acc / n;
    }
    if (!std::isfinite(out.value)) throw numeric_error("score is not finite");
    return out;
}

double RecordedRun::score(ScoreMode mode, const TokenSeq& target) const {
    return impl_->score_with_seeds(mode, target, false).value;
}

ActivationTrace RecordedRun::make_trace(const CaptureSpec& capture) const {
    const Impl& im = *impl_;
    ActivationTrace tr;
    tr.n_layers = im.cfg.n_layers;
    tr.n_heads = im.cfg.n_heads;
    tr.d_model = im.cfg.d_model;
    tr.d_ff = im.cfg.d_ff;
    if (!capture.heads && !capture.neurons) return tr;
    tr.positions = resolve_positions(capture.where, im.T, im.prompt_len);
    for (int p : tr.positions)
        if (p < im.start) throw config_error("capture position precedes the recorded window");
    const std::size_t S = tr.positions.size();
    if (capture.heads) {
        tr.head_contrib.resize(static_cast<std::size_t>(tr.n_layers) * tr.n_heads * S *
                               tr.d_model);
        for (int l = 0; l < tr.n_layers; ++l)
            for (int h = 0; h < tr.n_heads; ++h)
                for (std::size_t s = 0; s < S; ++s) {
                    const double* src = im.contrib.data() + im.lhd(l, h, tr.positions[s] - im.start);
                    std::copy(src, src + tr.d_model,
                              tr.head_contrib.data() +
                                  ((static_cast<std::size_t>(l) * tr.n_heads + h) * S + s) *
                                      tr.d_model);
                }
    }
    if (capture.neurons) {
        tr.neuron_act.resize(static_cast<std::size_t>(tr.n_layers) * S * tr.d_ff);
        for (int l = 0; l < tr.n_layers; ++l)
            for (std::size_t s = 0; s < S; ++s) {
                const double* src = im.h_cons.data() + im.lff(l, tr.positions[s] - im.start);
                std::copy(src, src + tr.d_ff,
                          tr.neuron_act.data() +
                              (static_cast<std::size_t>(l) * S + s) * tr.d_ff);
            }
    }
    return tr;
}

// ---------------------------------------------------------------------------
// forward / Decoder / generate / scoring

ForwardResult forward(const Weights& w, const TokenSeq& tokens, const InterventionList& edits,
                      const CaptureSpec& capture, int prompt_len) {
    const int T = static_cast<int>(tokens.size());
    if (prompt_len < 0) prompt_len = T;
    RecordedRun run(w, tokens, prompt_len, edits);
    ForwardResult out;
    out.seq_len = T;
    out.vocab = w.config.vocab_size;
    out.logits.resize(static_cast<std::size_t>(T) * out.vocab);
    for (int p = 0; p < T; ++p)
        std::copy(run.logits_at(p), run.logits_at(p) + out.vocab,
                  out.logits.data() + static_cast<std::size_t>(p) * out.vocab);
    out.trace = run.make_trace(capture);
    return out;
}

struct Decoder::Impl {
    const Weights* w;
    ModelConfig cfg;
    InterventionList edits;
    int prompt_len;
    KVCache cache;
    int next_pos = 0;
    std::vector<double> x, xn, q, ctx, contrib, hbuf, f, logits;
};

Decoder::Decoder(const Weights& w, const InterventionList& edits, int prompt_len) {
    w.config.validate();
    validate_interventions(w.config, edits);
    if (prompt_len < 1) throw config_error("prompt length out of range");
    impl_ = std::make_shared<Impl>();
    Impl& im = *impl_;
    im.w = &w;
    im.cfg = w.config;
    im.edits = edits;
    im.prompt_len = prompt_len;
    im.cache.init(im.cfg, im.cfg.max_seq_len);
    im.x.resize(im.cfg.d_model);
    im.xn.resize(im.cfg.d_model);
    im.q.resize(im.cfg.d_model);
    im.ctx.resize(im.cfg.d_model);
    im.contrib.resize(static_cast<std::size_t>(im.cfg.n_heads) * im.cfg.d_model);
    im.hbuf.resize(im.cfg.d_ff);
    im.f.resize(im.cfg.d_model);
    im.logits.resize(im.cfg.vocab_size);
}

const double* Decoder::step(int token, int pos) {
    Impl& im = *impl_;
    const ModelConfig& cfg = im.cfg;
    const Weights& w = *im.w;
    if (pos != im.next_pos) throw config_error("decoder positions must be fed in order");
    if (pos >= cfg.max_seq_len) throw config_error("sequence length exceeds max_seq_len");
    if (token < 0 || token >= cfg.vocab_size) throw config_error("token id out of range");
    const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim(), dff = cfg.d_ff;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const float* te = w.tok_emb.data() + static_cast<std::size_t>(token) * d;
    const float* pe = w.pos_emb.data() + static_cast<std::size_t>(pos) * d;
    for (int c = 0; c < d; ++c)
        im.x[c] = static_cast<double>(te[c]) + static_cast<double>(pe[c]);

    std::vector<double> scores;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        apply_residual_edits(im.edits, l, pos, im.prompt_len, im.x.data(), d);
        rmsnorm(im.x.data(), lw.attn_gain.data(), im.xn.data(), d, cfg.norm_eps);
        matvec(lw.wq.data(), im.xn.data(), im.q.data(), d, d);
        matvec(lw.wk.data(), im.xn.data(), im.cache.k_at(l, pos), d, d);
        matvec(lw.wv.data(), im.xn.data(), im.cache.v_at(l, pos), d, d);
        for (int h = 0; h < H; ++h) {
            const int c0 = h * dh;
            scores.assign(static_cast<std::size_t>(pos) + 1, 0.0);
            for (int j = 0; j <= pos; ++j) {
                const double* kj = im.cache.k_at(l, j) + c0;
                double acc = 0.0;
                for (int c = 0; c < dh; ++c) acc += im.q[c0 + c] * kj[c];
                scores[j] = acc * scale;
            }
            softmax_inplace(scores.data(), pos + 1);
            double* ch = im.ctx.data() + c0;
            std::fill(ch, ch + dh, 0.0);
            for (int j = 0; j <= pos; ++j) {
                const double* vj = im.cache.v_at(l, j) + c0;
                const double a = scores[j];
                for (int c = 0; c < dh; ++c) ch[c] += a * vj[c];
            }
            head_out_project(lw.wo.data(), d, h, dh, ch,
                             im.contrib.data() + static_cast<std::size_t>(h) * d);
        }
        apply_head_edits(im.edits, l, H, d, pos, im.prompt_len, im.contrib.data());
        for (int h = 0; h < H; ++h) {
            const double* c = im.contrib.data() + static_cast<std::size_t>(h) * d;
            for (int r = 0; r < d; ++r) im.x[r] += c[r];
        }
        rmsnorm(im.x.data(), lw.ffn_gain.data(), im.xn.data(), d, cfg.norm_eps);
        matvec(lw.w_up.data(), im.xn.data(), im.hbuf.data(), dff, d);
        for (int n = 0; n < dff; ++n) im.hbuf[n] = gelu(im.hbuf[n]);
        apply_neuron_edits(im.edits, l, pos, im.prompt_len, im.hbuf.data(), dff);
        matvec(lw.w_down.data(), im.hbuf.data(), im.f.data(), d, dff);
        for (int c = 0; c < d; ++c) im.x[c] += im.f[c];
    }
    rmsnorm(im.x.data(), w.final_gain.data(), im.xn.data(), d, cfg.norm_eps);
    matvec(w.unembed.data(), im.xn.data(), im.logits.data(), cfg.vocab_size, d);
    im.cache.n = ++im.next_pos;
    return im.logits.data();
}

GenResult generate(const Weights& w, const TokenSeq& prompt, int max_new_tokens, int stop_token,
                   const InterventionList& edits) {
    const ModelConfig& cfg = w.config;
    check_tokens(cfg, prompt);
    if (max_new_tokens < 0) throw config_error("max_new_tokens must be non-negative");
    if (stop_token < 0 || stop_token >= cfg.vocab_size)
        throw config_error("stop token out of range");
    if (static_cast<int>(prompt.size()) + max_new_tokens > cfg.max_seq_len)
        throw config_error("prompt plus generation budget exceeds max_seq_len");
    const int P = static_cast<int>(prompt.size());
    Decoder dec(w, edits, P);
    const double* lg = nullptr;
    for (int t = 0; t < P; ++t) lg = dec.step(prompt[t], t);
    GenResult out;
    while (true) {
        if (static_cast<int>(out.generated.size()) == max_new_tokens) {
            out.hit_max = true;
            break;
        }
        const int next = argmax_lowest(lg, cfg.vocab_size);
        if (next == stop_token) break;
        out.generated.push_back(next);
        lg = dec.step(next, P + static_cast<int>(out.generated.size()) - 1);
    }
    return out;
}

GenResult generate_reference(const Weights& w, const TokenSeq& prompt, int max_new_tokens,
                             int stop_token, const InterventionList& edits) {
    const ModelConfig& cfg = w.config;
    check_tokens(cfg, prompt);
    if (max_new_tokens < 0) throw config_error("max_new_tokens must be non-negative");
    if (stop_token < 0 || stop_token >= cfg.vocab_size)
        throw config_error("stop token out of range");
    if (static_cast<int>(prompt.size()) + max_new_tokens > cfg.max_seq_len)
        throw config_error("prompt plus generation budget exceeds max_seq_len");
    const int P = static_cast<int>(prompt.size());
    TokenSeq cur = prompt;
    GenResult out;
    while (true) {
        if (static_cast<int>(out.generated.size()) == max_new_tokens) {
            out.hit_max = true;
            break;
        }
        ForwardResult fr = forward(w, cur, edits, {}, P);
        const int next = argmax_lowest(fr.logits_at(static_cast<int>(cur.size()) - 1), cfg.vocab_size);
        if (next == stop_token) break;
        out.generated.push_back(next);
        cur.push_back(next);
    }
    return out;
}

double sequence_score(const Weights& w, const TokenSeq& prompt, const TokenSeq& target,
                      ScoreMode mode, const InterventionList& edits) {
    const ModelConfig& cfg = w.config;
    check_tokens(cfg, prompt);
    if (target.empty()) throw config_error("score target must be non-empty");
    for (int t : target)
        if (t < 0 || t >= cfg.vocab_size) throw config_error("target token out of range");
    const int P = static_cast<int>(prompt.size());
    TokenSeq input = prompt;
    if (mode == ScoreMode::MeanLogProb)
        input.insert(input.end(), target.begin(), target.end() - 1);
    if (static_cast<int>(input.size()) > cfg.max_seq_len)
        throw config_error("sequence length exceeds max_seq_len");

    Decoder dec(w, edits, P);
    const int V = cfg.vocab_size;
    double acc = 0.0;
    double value = 0.0;
    std::vector<double> last;
    for (int t = 0; t < static_cast<int>(input.size()); ++t) {
        const double* lg = dec.step(input[t], t);
        if (mode == ScoreMode::MeanLogProb && t >= P - 1) {
            const int i = t - (P - 1);
            acc += lg[target[i]] - logsumexp(lg, V);
        } else if (t == P - 1) {
            last.assign(lg, lg + V);
        }
    }
    if (mode == ScoreMode::MeanLogProb) {
        value = acc / static_cast<double>(target.size());
    } else if (mode == ScoreMode::FirstTokenProb) {
        value = std::exp(last[target[0]] - logsumexp(last.data(), V));
    } else {
        value = last[target[0]];
    }
    if (!std::isfinite(value)) throw numeric_error("score is not finite");
    return value;
}

}  // namespace mtlab
