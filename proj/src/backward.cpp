#include <algorithm>
#include <cmath>

#include "mtlab/kernels.hpp"
#include "mtlab/runtime.hpp"
#include "run_impl.hpp"

namespace mtlab {

namespace {

// forward was y_i = x_i * gain_i / rms with rms = sqrt(mean(x^2) + eps);
// accumulates dL/dx into gx and (optionally) dL/dgain into ggain.
void rmsnorm_backward(const double* x, const float* gain, const double* gy, int n, double eps,
                      double* gx, double* ggain) {
    double ms = 0.0;
    for (int i = 0; i < n; ++i) ms += x[i] * x[i];
    ms = ms / n + eps;
    const double rms = std::sqrt(ms);
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += gy[i] * static_cast<double>(gain[i]) * x[i];
    const double k = s / (n * ms * rms);
    for (int j = 0; j < n; ++j)
        gx[j] += static_cast<double>(gain[j]) * gy[j] / rms - x[j] * k;
    if (ggain)
        for (int j = 0; j < n; ++j) ggain[j] += gy[j] * x[j] / rms;
}

}  // namespace

// Reverse-mode sweep over a recorded window. Gradients stop at the window
// boundary: prefix keys/values are treated as constants, which is exact as
// long as the objective only reads window positions.
struct RunBackward {
    const RecordedRun::Impl& im;
    ParamGrads* pg = nullptr;

    int q_layer = -1, q_neuron = -1;
    std::vector<int> q_positions;  // absolute, ascending
    std::vector<double> q_grads;

    explicit RunBackward(const RecordedRun::Impl& impl) : im(impl) {}

    void run(const std::vector<std::pair<int, std::vector<double>>>& logit_seeds) {
        const ModelConfig& cfg = im.cfg;
        const Weights& w = *im.w;
        const int L = cfg.n_layers, H = cfg.n_heads, d = cfg.d_model, dff = cfg.d_ff;
        const int dh = cfg.head_dim(), win = im.win, start = im.start;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        q_grads.assign(q_positions.size(), 0.0);

        // downstream gradient on the residual stream after the last layer
        std::vector<double> g_res(static_cast<std::size_t>(win) * d, 0.0);
        std::vector<double> g_xfn(d);
        for (const auto& [row, seed] : logit_seeds) {
            std::fill(g_xfn.begin(), g_xfn.end(), 0.0);
            matvec_transpose(w.unembed.data(), seed.data(), g_xfn.data(), cfg.vocab_size, d);
            if (pg) {
                const double* fn = im.xfn.data() + static_cast<std::size_t>(row) * d;
                for (int t = 0; t < cfg.vocab_size; ++t) {
                    if (seed[t] == 0.0) continue;
                    double* gr = pg->unembed.data() + static_cast<std::size_t>(t) * d;
                    for (int c = 0; c < d; ++c) gr[c] += seed[t] * fn[c];
                }
            }
            rmsnorm_backward(im.xf.data() + static_cast<std::size_t>(row) * d,
                             w.final_gain.data(), g_xfn.data(), d, cfg.norm_eps,
                             g_res.data() + static_cast<std::size_t>(row) * d,
                             pg ? pg->final_gain.data() : nullptr);
        }

        std::vector<double> g_resid2(static_cast<std::size_t>(win) * d);
        std::vector<double> g_hc(dff), g_u(dff), g_xn2(d);
        std::vector<double> g_kwin(static_cast<std::size_t>(win) * d);
        std::vector<double> g_vwin(static_cast<std::size_t>(win) * d);
        std::vector<double> g_xn(static_cast<std::size_t>(win) * d);
        std::vector<double> g_q(d), g_ctx(dh), g_a, g_s;

        for (int l = L - 1; l >= 0; --l) {
            const LayerWeights& lw = w.layers[l];
            ParamGrads::Layer* gl = pg ? &pg->layers[l] : nullptr;

            // FFN backward
            for (int i = 0; i < win; ++i) {
                const int abs = start + i;
                const double* gr = g_res.data() + static_cast<std::size_t>(i) * d;
                std::fill(g_hc.begin(), g_hc.end(), 0.0);
                matvec_transpose(lw.w_down.data(), gr, g_hc.data(), d, dff);
                if (gl) {
                    const double* hc = im.h_cons.data() + im.lff(l, i);
                    for (int r = 0; r < d; ++r) {
                        if (gr[r] == 0.0) continue;
                        double* row = gl->w_down.data() + static_cast<std::size_t>(r) * dff;
                        for (int n = 0; n < dff; ++n) row[n] += gr[r] * hc[n];
                    }
                }
                if (l == q_layer) {
                    auto it = std::lower_bound(q_positions.begin(), q_positions.end(), abs);
                    if (it != q_positions.end() && *it == abs)
                        q_grads[it - q_positions.begin()] = g_hc[q_neuron];
                }
                // reverse the neuron edits (last applied, first reversed)
                for (auto e = im.edits.rbegin(); e != im.edits.rend(); ++e) {
                    if (e->layer != l) continue;
                    if (e->kind == InterventionKind::ClampNeuron) {
                        if (e->where.contains(abs, im.prompt_len)) g_hc[e->neuron] = 0.0;
                    } else if (e->kind == InterventionKind::ScaleNeuron) {
                        if (e->where.contains(abs, im.prompt_len)) g_hc[e->neuron] *= e->value;
                    }
                }
                const double* u = im.u.data() + im.lff(l, i);
                for (int n = 0; n < dff; ++n) g_u[n] = g_hc[n] * gelu_grad(u[n]);
                if (gl) {
                    const double* x2 = im.xn2.data() + im.ld(l, i);
                    for (int n = 0; n < dff; ++n) {
                        if (g_u[n] == 0.0) continue;
                        double* row = gl->w_up.data() + static_cast<std::size_t>(n) * d;
                        for (int c = 0; c < d; ++c) row[c] += g_u[n] * x2[c];
                    }
                }
                std::fill(g_xn2.begin(), g_xn2.end(), 0.0);
                matvec_transpose(lw.w_up.data(), g_u.data(), g_xn2.data(), dff, d);
                double* gr2 = g_resid2.data() + static_cast<std::size_t>(i) * d;
                std::copy(gr, gr + d, gr2);  // residual passthrough
                rmsnorm_backward(im.resid2.data() + im.ld(l, i), lw.ffn_gain.data(), g_xn2.data(),
                                 d, cfg.norm_eps, gr2, gl ? gl->ffn_gain.data() : nullptr);
            }

            // attention backward
            std::fill(g_kwin.begin(), g_kwin.end(), 0.0);
            std::fill(g_vwin.begin(), g_vwin.end(), 0.0);
            std::fill(g_xn.begin(), g_xn.end(), 0.0);
            for (int i = 0; i < win; ++i) {
                const int abs = start + i;
                const double* g_attn = g_resid2.data() + static_cast<std::size_t>(i) * d;
                std::fill(g_q.begin(), g_q.end(), 0.0);
                for (int h = 0; h < H; ++h) {
                    // replaced contributions sever the path to the natural head output
                    bool severed = false;
                    for (const auto& e : im.edits)
                        if (e.kind == InterventionKind::ReplaceHeadContribution && e.layer == l &&
                            e.head == h && e.where.contains(abs, im.prompt_len))
                            severed = true;
                    if (severed) continue;
                    const int c0 = h * dh;
                    std::fill(g_ctx.begin(), g_ctx.end(), 0.0);
                    for (int r = 0; r < d; ++r) {
                        if (g_attn[r] == 0.0) continue;
                        const float* row = lw.wo.data() + static_cast<std::size_t>(r) * d + c0;
                        for (int c = 0; c < dh; ++c)
                            g_ctx[c] += g_attn[r] * static_cast<double>(row[c]);
                    }
                    if (gl) {
                        const double* ch = im.ctx.data() + im.ld(l, i) + c0;
                        for (int r = 0; r < d; ++r) {
                            if (g_attn[r] == 0.0) continue;
                            double* row = gl->wo.data() + static_cast<std::size_t>(r) * d + c0;
                            for (int c = 0; c < dh; ++c) row[c] += g_attn[r] * ch[c];
                        }
                    }
                    const double* pr = im.probs.data() + im.lhp(l, h, i);
                    g_a.assign(static_cast<std::size_t>(abs) + 1, 0.0);
                    for (int j = 0; j <= abs; ++j) {
                        const double* vj = im.cache.v_at(l, j) + c0;
                        double acc = 0.0;
                        for (int c = 0; c < dh; ++c) acc += g_ctx[c] * vj[c];
                        g_a[j] = acc;
                    }
                    double dot = 0.0;
                    for (int j = 0; j <= abs; ++j) dot += pr[j] * g_a[j];
                    g_s.assign(static_cast<std::size_t>(abs) + 1, 0.0);
                    for (int j = 0; j <= abs; ++j) g_s[j] = pr[j] * (g_a[j] - dot);
                    const double* qi = im.q.data() + im.ld(l, i) + c0;
                    for (int j = 0; j <= abs; ++j) {
                        const double* kj = im.cache.k_at(l, j) + c0;
                        const double gs = g_s[j] * scale;
                        if (gs != 0.0)
                            for (int c = 0; c < dh; ++c) g_q[c0 + c] += gs * kj[c];
                        if (j >= start) {
                            double* gk = g_kwin.data() + static_cast<std::size_t>(j - start) * d + c0;
                            double* gv = g_vwin.data() + static_cast<std::size_t>(j - start) * d + c0;
                            for (int c = 0; c < dh; ++c) {
                                gk[c] += gs * qi[c];
                                gv[c] += pr[j] * g_ctx[c];
                            }
                        }
                    }
                }
                double* gxn = g_xn.data() + static_cast<std::size_t>(i) * d;
                matvec_transpose(lw.wq.data(), g_q.data(), gxn, d, d);
                if (gl) {
                    const double* nx = im.xn.data() + im.ld(l, i);
                    for (int r = 0; r < d; ++r) {
                        if (g_q[r] == 0.0) continue;
                        double* row = gl->wq.data() + static_cast<std::size_t>(r) * d;
                        for (int c = 0; c < d; ++c) row[c] += g_q[r] * nx[c];
                    }
                }
            }
            for (int i = 0; i < win; ++i) {
                double* gxn = g_xn.data() + static_cast<std::size_t>(i) * d;
                const double* gk = g_kwin.data() + static_cast<std::size_t>(i) * d;
                const double* gv = g_vwin.data() + static_cast<std::size_t>(i) * d;
                matvec_transpose(lw.wk.data(), gk, gxn, d, d);
                matvec_transpose(lw.wv.data(), gv, gxn, d, d);
                if (gl) {
                    const double* nx = im.xn.data() + im.ld(l, i);
                    for (int r = 0; r < d; ++r) {
                        if (gk[r] != 0.0) {
                            double* row = gl->wk.data() + static_cast<std::size_t>(r) * d;
                            for (int c = 0; c < d; ++c) row[c] += gk[r] * nx[c];
                        }
                        if (gv[r] != 0.0) {
                            double* row = gl->wv.data() + static_cast<std::size_t>(r) * d;
                            for (int c = 0; c < d; ++c) row[c] += gv[r] * nx[c];
                        }
                    }
                }
                // g_res for the layer below: FFN-block passthrough plus the
                // attention path through the pre-attention normalisation
                double* gr = g_res.data() + static_cast<std::size_t>(i) * d;
                std::copy(g_resid2.begin() + static_cast<std::size_t>(i) * d,
                          g_resid2.begin() + static_cast<std::size_t>(i + 1) * d, gr);
                rmsnorm_backward(im.x_in.data() + im.ld(l, i), lw.attn_gain.data(), gxn, d,
                                 cfg.norm_eps, gr, gl ? gl->attn_gain.data() : nullptr);
            }
        }

        if (pg) {
            for (int i = 0; i < win; ++i) {
                const int abs = start + i;
                const double* gr = g_res.data() + static_cast<std::size_t>(i) * d;
                double* gt = pg->tok_emb.data() + static_cast<std::size_t>(im.tokens[abs]) * d;
                double* gp = pg->pos_emb.data() + static_cast<std::size_t>(abs) * d;
                for (int c = 0; c < d; ++c) {
                    gt[c] += gr[c];
                    gp[c] += gr[c];
                }
            }
        }
    }
};

std::vector<double> RecordedRun::neuron_score_grads(ScoreMode mode, const TokenSeq& target,
                                                    int layer, int neuron,
                                                    const std::vector<int>& positions) const {
    const Impl& im = *impl_;
    if (layer < 0 || layer >= im.cfg.n_layers) throw config_error("gradient layer out of range");
    if (neuron < 0 || neuron >= im.cfg.d_ff) throw config_error("gradient neuron out of range");
    std::vector<int> pos = positions;
    std::sort(pos.begin(), pos.end());
    for (int p : pos)
        if (p < im.start || p >= im.T)
            throw config_error("gradient position lies outside the recorded window");
    auto seed = im.score_with_seeds(mode, target, true);
    RunBackward bk(im);
    bk.q_layer = layer;
    bk.q_neuron = neuron;
    bk.q_positions = pos;
    bk.run(seed.seeds);
    // report in the caller's order
    std::vector<double> out(positions.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
        auto it = std::lower_bound(pos.begin(), pos.end(), positions[i]);
        out[i] = bk.q_grads[it - pos.begin()];
    }
    return out;
}

double RecordedRun::cross_entropy_param_grads(ParamGrads& out) const {
    const Impl& im = *impl_;
    if (im.start != 0)
        throw config_error("parameter gradients need the full sequence recorded");
    if (im.T < 2) throw config_error("parameter gradients need at least two tokens");
    const int V = im.cfg.vocab_size;
    const int N = im.T - 1;
    std::vector<std::pair<int, std::vector<double>>> seeds;
    seeds.reserve(N);
    double loss = 0.0;
    for (int p = 0; p < N; ++p) {
        const double* lg = im.logits.data() + static_cast<std::size_t>(p) * V;
        double m = lg[0];
        for (int j = 1; j < V; ++j) m = std::max(m, lg[j]);
        double s = 0.0;
        for (int j = 0; j < V; ++j) s += std::exp(lg[j] - m);
        const double lse = m + std::log(s);
        const int y = im.tokens[p + 1];
        loss += (lse - lg[y]) / N;
        std::vector<double> seed(V);
        for (int j = 0; j < V; ++j)
            seed[j] = (std::exp(lg[j] - lse) - (j == y ? 1.0 : 0.0)) / N;
        seeds.emplace_back(p, std::move(seed));
    }
    if (!std::isfinite(loss)) throw numeric_error("loss is not finite");
    RunBackward bk(im);
    bk.pg = &out;
    bk.run(seeds);
    return loss;
}

double neuron_gradient(const Weights& w, const TokenSeq& prompt, const TokenSeq& target,
                       ScoreMode mode, int layer, int neuron, double clamp_value,
                       const Positions& where, const InterventionList& extra) {
    if (target.empty()) throw config_error("score target must be non-empty");
    TokenSeq input = prompt;
    if (mode == ScoreMode::MeanLogProb)
        input.insert(input.end(), target.begin(), target.end() - 1);
    const int P = static_cast<int>(prompt.size());
    InterventionList edits = extra;
    edits.push_back(Intervention::clamp_neuron(layer, neuron, where, clamp_value));
    RecordedRun run(w, input, P, edits);
    auto positions = resolve_positions(where, static_cast<int>(input.size()), P);
    auto grads = run.neuron_score_grads(mode, target, layer, neuron, positions);
    double total = 0.0;
    for (double g : grads) total += g;
    return total;
}

}  // namespace mtlab
