#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "coft/ops.hpp"

namespace coft {

struct ModelConfig {
    int vocab_size = 0;
    int embed_dim = 0;
    int num_heads = 1;
    int ffn_dim = 0;
    int num_layers = 1;
    double dropout_p = 0.0;
    int max_seq_len = 256;
    double rms_eps = 1e-6;
    double rope_base = 10000.0;

    int head_dim() const { return embed_dim / num_heads; }

    void validate() const {
        if (vocab_size <= 0 || embed_dim <= 0 || ffn_dim <= 0 || num_layers < 1 || max_seq_len <= 0)
            throw BadConfig("model dimensions must be positive");
        if (embed_dim % num_heads != 0)
            throw BadConfig("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                            std::to_string(num_heads));
        if (head_dim() % 2 != 0) throw BadConfig("head_dim must be even for rotary embeddings");
        if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw BadConfig("dropout_p must be in [0,1)");
    }
};

enum class LayerTag : uint8_t { Block = 0, Embed = 1, LmHead = 2, FinalNorm = 3 };
enum class ModuleKind : uint8_t { MHA = 0, FFN = 1, Norm1 = 2, Norm2 = 3, Special = 4 };
enum class MatrixKind : uint8_t { Q = 0, K = 1, V = 2, O = 3, Gate = 4, Up = 5, Down = 6, Weight = 7 };

// Identity of one weight tensor: block layer (1-based) + module + matrix,
// or one of the special non-block tensors.
struct ParamId {
    LayerTag tag = LayerTag::Block;
    int layer = 0; // 1..N for Block, 0 otherwise
    ModuleKind module = ModuleKind::Special;
    MatrixKind matrix = MatrixKind::Weight;

    static ParamId block(int layer, ModuleKind m, MatrixKind w) { return {LayerTag::Block, layer, m, w}; }
    static ParamId embed() { return {LayerTag::Embed, 0, ModuleKind::Special, MatrixKind::Weight}; }
    static ParamId lm_head() { return {LayerTag::LmHead, 0, ModuleKind::Special, MatrixKind::Weight}; }
    static ParamId final_norm() { return {LayerTag::FinalNorm, 0, ModuleKind::Special, MatrixKind::Weight}; }

    bool operator<(const ParamId& o) const {
        return std::tie(tag, layer, module, matrix) < std::tie(o.tag, o.layer, o.module, o.matrix);
    }
    bool operator==(const ParamId& o) const {
        return tag == o.tag && layer == o.layer && module == o.module && matrix == o.matrix;
    }

    std::string name() const;
    static ParamId parse(const std::string& name);
};

inline const char* module_name(ModuleKind m) {
    switch (m) {
        case ModuleKind::MHA: return "mha";
        case ModuleKind::FFN: return "ffn";
        case ModuleKind::Norm1: return "norm1";
        case ModuleKind::Norm2: return "norm2";
        default: return "special";
    }
}

inline const char* matrix_name(MatrixKind m) {
    switch (m) {
        case MatrixKind::Q: return "q";
        case MatrixKind::K: return "k";
        case MatrixKind::V: return "v";
        case MatrixKind::O: return "o";
        case MatrixKind::Gate: return "gate";
        case MatrixKind::Up: return "up";
        case MatrixKind::Down: return "down";
        default: return "weight";
    }
}

inline std::string ParamId::name() const {
    switch (tag) {
        case LayerTag::Embed: return "embed";
        case LayerTag::LmHead: return "lm_head";
        case LayerTag::FinalNorm: return "final_norm";
        default: break;
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "layer%02d.%s.%s", layer, module_name(module), matrix_name(matrix));
    return buf;
}

inline ParamId ParamId::parse(const std::string& s) {
    if (s == "embed") return embed();
    if (s == "lm_head") return lm_head();
    if (s == "final_norm") return final_norm();
    if (s.rfind("layer", 0) != 0) throw IoError("bad parameter name: " + s);
    size_t dot1 = s.find('.'), dot2 = s.find('.', dot1 + 1);
    if (dot1 == std::string::npos || dot2 == std::string::npos) throw IoError("bad parameter name: " + s);
    int layer = std::stoi(s.substr(5, dot1 - 5));
    std::string mod = s.substr(dot1 + 1, dot2 - dot1 - 1);
    std::string mat = s.substr(dot2 + 1);
    ModuleKind mk;
    if (mod == "mha") mk = ModuleKind::MHA;
    else if (mod == "ffn") mk = ModuleKind::FFN;
    else if (mod == "norm1") mk = ModuleKind::Norm1;
    else if (mod == "norm2") mk = ModuleKind::Norm2;
    else throw IoError("bad module in parameter name: " + s);
    MatrixKind wk;
    if (mat == "q") wk = MatrixKind::Q;
    else if (mat == "k") wk = MatrixKind::K;
    else if (mat == "v") wk = MatrixKind::V;
    else if (mat == "o") wk = MatrixKind::O;
    else if (mat == "gate") wk = MatrixKind::Gate;
    else if (mat == "up") wk = MatrixKind::Up;
    else if (mat == "down") wk = MatrixKind::Down;
    else if (mat == "weight") wk = MatrixKind::Weight;
    else throw IoError("bad matrix in parameter name: " + s);
    return block(layer, mk, wk);
}

template <typename R>
using ParamsT = std::map<ParamId, TensorT<R>>;
using Params = ParamsT<float>;

template <typename R>
using GradsT = std::map<ParamId, TensorT<R>>;

// A module instance that can carry virtual unit gates: MHA or FFN of one layer.
struct ModuleRef {
    int layer = 0;
    ModuleKind module = ModuleKind::MHA; // MHA or FFN only

    bool operator<(const ModuleRef& o) const { return std::tie(layer, module) < std::tie(o.layer, o.module); }
    bool operator==(const ModuleRef& o) const { return layer == o.layer && module == o.module; }
    std::string name() const { return "layer" + std::to_string(layer) + "." + module_name(module); }
};

// Virtual per-unit gates: one scalar per attention head (MHA) or per
// intermediate neuron (FFN). All-ones gates leave the forward pass unchanged.
template <typename R>
struct GateSetT {
    std::map<ModuleRef, std::vector<R>> gates;

    bool empty() const { return gates.empty(); }
    const std::vector<R>* find(int layer, ModuleKind m) const {
        auto it = gates.find(ModuleRef{layer, m});
        return it == gates.end() ? nullptr : &it->second;
    }
};

template <typename R>
GateSetT<R> make_unit_gates(const ModelConfig& cfg, const std::vector<ModuleRef>& modules) {
    GateSetT<R> g;
    for (const auto& m : modules) {
        size_t n = m.module == ModuleKind::MHA ? size_t(cfg.num_heads) : size_t(cfg.ffn_dim);
        g.gates[m] = std::vector<R>(n, R(1));
    }
    return g;
}

template <typename R>
using GateGradsT = std::map<ModuleRef, std::vector<R>>;

enum class Mode { Train, Eval };

namespace detail {

template <typename R>
struct LayerActs {
    TensorT<R> x_in;                          // [T,d]
    TensorT<R> n1;                            // [T,d]
    TensorT<R> q, k, v;                       // [T,d] (q,k stored post-rotation)
    std::vector<TensorT<R>> att_probs;        // per head [T,T], pre-dropout
    std::vector<TensorT<R>> att_mask;         // per head [T,T] dropout mask (may be empty)
    TensorT<R> heads_pregate;                 // [T,d]
    TensorT<R> heads_gated;                   // [T,d]
    TensorT<R> x_mid;                         // [T,d]
    TensorT<R> n2;                            // [T,d]
    TensorT<R> gate_in;                       // [T,f] pre-activation
    TensorT<R> up;                            // [T,f]
    TensorT<R> inter_pregate;                 // [T,f]
    TensorT<R> inter_gated;                   // [T,f]
    TensorT<R> ffn_out;                       // [T,d] pre-dropout
    TensorT<R> ffn_mask;                      // [T,d] dropout mask (may be empty)
};

} // namespace detail

template <typename R>
struct ForwardTraceT {
    const ParamsT<R>* params = nullptr;
    ModelConfig cfg;
    std::vector<int> tokens;
    Mode mode = Mode::Eval;
    double dropout_p = 0.0;
    GateSetT<R> gates; // copy of the gates used (empty when none)
    std::vector<detail::LayerActs<R>> layers;
    TensorT<R> x0;        // [T,d] embeddings
    TensorT<R> final_in;  // [T,d] input to final norm
    TensorT<R> final_out; // [T,d]
};

template <typename R>
struct BackwardResultT {
    GradsT<R> param_grads;
    GateGradsT<R> gate_grads;
};

// ---------------------------------------------------------------------------

template <typename R>
ParamsT<R> init_params(const ModelConfig& cfg, const SeededRng& rng) {
    cfg.validate();
    ParamsT<R> p;
    const int64_t d = cfg.embed_dim, f = cfg.ffn_dim, V = cfg.vocab_size;
    auto gauss = [&](const ParamId& id, std::vector<int64_t> shape) {
        TensorT<R> t(std::move(shape));
        SeededRng r = rng.substream(fnv1a64(id.name()));
        for (auto& v : t.data) v = R(0.02 * r.gaussian());
        p.emplace(id, std::move(t));
    };
    auto ones_vec = [&](const ParamId& id, int64_t n) {
        TensorT<R> t({n});
        std::fill(t.data.begin(), t.data.end(), R(1));
        p.emplace(id, std::move(t));
    };
    gauss(ParamId::embed(), {V, d});
    gauss(ParamId::lm_head(), {d, V});
    ones_vec(ParamId::final_norm(), d);
    for (int l = 1; l <= cfg.num_layers; ++l) {
        gauss(ParamId::block(l, ModuleKind::MHA, MatrixKind::Q), {d, d});
        gauss(ParamId::block(l, ModuleKind::MHA, MatrixKind::K), {d, d});
        gauss(ParamId::block(l, ModuleKind::MHA, MatrixKind::V), {d, d});
        gauss(ParamId::block(l, ModuleKind::MHA, MatrixKind::O), {d, d});
        gauss(ParamId::block(l, ModuleKind::FFN, MatrixKind::Gate), {d, f});
        gauss(ParamId::block(l, ModuleKind::FFN, MatrixKind::Up), {d, f});
        gauss(ParamId::block(l, ModuleKind::FFN, MatrixKind::Down), {f, d});
        ones_vec(ParamId::block(l, ModuleKind::Norm1, MatrixKind::Weight), d);
        ones_vec(ParamId::block(l, ModuleKind::Norm2, MatrixKind::Weight), d);
    }
    return p;
}

template <typename R>
int64_t param_count(const ParamsT<R>& p) {
    int64_t n = 0;
    for (const auto& [id, t] : p) n += t.numel();
    return n;
}

namespace detail {

// Rotation angles for every (position, frequency) pair; built once per pass
// and shared by all layers.
template <typename R>
struct RopeTable {
    int64_t half = 0;
    std::vector<R> cos_t, sin_t; // [T, dk/2]
};

template <typename R>
RopeTable<R> build_rope_table(int64_t T, int64_t dk, double base) {
    RopeTable<R> tab;
    tab.half = dk / 2;
    tab.cos_t.resize(size_t(T * tab.half));
    tab.sin_t.resize(size_t(T * tab.half));
    std::vector<double> freq(size_t(tab.half));
    for (int64_t i = 0; i < tab.half; ++i) freq[size_t(i)] = std::pow(base, -2.0 * double(i) / double(dk));
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < tab.half; ++i) {
            const double theta = double(t) * freq[size_t(i)];
            tab.cos_t[size_t(t * tab.half + i)] = R(std::cos(theta));
            tab.sin_t[size_t(t * tab.half + i)] = R(std::sin(theta));
        }
    return tab;
}

// Contiguous copy of one head's column block.
template <typename R>
TensorT<R> head_slice(const TensorT<R>& x, int h, int64_t dk) {
    const int64_t T = x.rows();
    TensorT<R> out({T, dk});
    for (int64_t t = 0; t < T; ++t) {
        const R* src = x.row_ptr(t) + int64_t(h) * dk;
        std::copy(src, src + dk, out.row_ptr(t));
    }
    return out;
}

template <typename R>
void head_scatter(TensorT<R>& dst, const TensorT<R>& src, int h, int64_t dk, bool accumulate) {
    const int64_t T = dst.rows();
    for (int64_t t = 0; t < T; ++t) {
        R* out = dst.row_ptr(t) + int64_t(h) * dk;
        const R* in = src.row_ptr(t);
        if (accumulate)
            for (int64_t i = 0; i < dk; ++i) out[i] += in[i];
        else
            std::copy(in, in + dk, out);
    }
}

// Rotary embedding applied in place to one [T,d] tensor, head by head.
// sign=+1 rotates forward, sign=-1 applies the transpose (for gradients).
template <typename R>
void rope_inplace(TensorT<R>& x, int num_heads, const RopeTable<R>& tab, int sign) {
    const int64_t T = x.rows(), d = x.cols();
    const int64_t dk = d / num_heads;
    for (int64_t t = 0; t < T; ++t) {
        R* row = x.row_ptr(t);
        const R* ct = tab.cos_t.data() + t * tab.half;
        const R* st = tab.sin_t.data() + t * tab.half;
        for (int h = 0; h < num_heads; ++h) {
            R* hp = row + int64_t(h) * dk;
            for (int64_t i = 0; i < dk / 2; ++i) {
                const R c = ct[i];
                const R s = st[i] * R(sign);
                const R a = hp[2 * i], b = hp[2 * i + 1];
                hp[2 * i] = a * c - b * s;
                hp[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

} // namespace detail

// Forward pass over one token sequence. Returns [T,V] logits and a trace
// sufficient for an exact backward pass. Gates, when present, multiply each
// MHA head output before W^O and each FFN intermediate neuron before the
// down projection. Train mode draws dropout masks (attention weights and
// down_proj output) from `rng` in a fixed order.
template <typename R>
std::pair<TensorT<R>, ForwardTraceT<R>> forward(const ModelConfig& cfg, const ParamsT<R>& params,
                                                const std::vector<int>& tokens, Mode mode,
                                                const GateSetT<R>* gates, SeededRng rng, bool keep_trace = true) {
    const int64_t T = int64_t(tokens.size());
    if (T == 0) throw SeqTooLong("empty token sequence");
    if (T > cfg.max_seq_len)
        throw SeqTooLong("sequence length " + std::to_string(T) + " exceeds max " + std::to_string(cfg.max_seq_len));
    for (int tok : tokens)
        if (tok < 0 || tok >= cfg.vocab_size) throw TokenOutOfRange("token id " + std::to_string(tok));

    const int64_t d = cfg.embed_dim, f = cfg.ffn_dim;
    const int H = cfg.num_heads;
    const int64_t dk = cfg.head_dim();
    const double p_drop = (mode == Mode::Train) ? cfg.dropout_p : 0.0;
    const R inv_sqrt_dk = R(1.0 / std::sqrt(double(dk)));

    ForwardTraceT<R> trace;
    trace.params = &params;
    trace.cfg = cfg;
    trace.tokens = tokens;
    trace.mode = mode;
    trace.dropout_p = p_drop;
    if (gates) trace.gates = *gates;
    if (keep_trace) trace.layers.resize(size_t(cfg.num_layers));

    const detail::RopeTable<R> rope = detail::build_rope_table<R>(T, dk, cfg.rope_base);
    const TensorT<R>& embed = params.at(ParamId::embed());
    TensorT<R> x({T, d});
    for (int64_t t = 0; t < T; ++t) {
        const R* src = embed.row_ptr(tokens[size_t(t)]);
        std::copy(src, src + d, x.row_ptr(t));
    }
    if (keep_trace) trace.x0 = x;

    detail::LayerActs<R> scratch;
    for (int l = 1; l <= cfg.num_layers; ++l) {
        auto& acts = keep_trace ? trace.layers[size_t(l - 1)] : scratch;
        if (keep_trace) acts.x_in = x;

        const TensorT<R>& wn1 = params.at(ParamId::block(l, ModuleKind::Norm1, MatrixKind::Weight));
        acts.n1 = rmsnorm(x, wn1, R(cfg.rms_eps));

        acts.q = matmul(acts.n1, params.at(ParamId::block(l, ModuleKind::MHA, MatrixKind::Q)));
        acts.k = matmul(acts.n1, params.at(ParamId::block(l, ModuleKind::MHA, MatrixKind::K)));
        acts.v = matmul(acts.n1, params.at(ParamId::block(l, ModuleKind::MHA, MatrixKind::V)));
        detail::rope_inplace(acts.q, H, rope, +1);
        detail::rope_inplace(acts.k, H, rope, +1);

        const std::vector<R>* mha_gates = trace.gates.find(l, ModuleKind::MHA);
        acts.att_probs.assign(size_t(H), TensorT<R>());
        acts.att_mask.assign(size_t(H), TensorT<R>());
        acts.heads_pregate = TensorT<R>({T, d});

        for (int h = 0; h < H; ++h) {
            // causal attention over the prefix; softmax computed per row
            // without materializing -inf entries
            TensorT<R> probs({T, T});
            for (int64_t t = 0; t < T; ++t) {
                const R* qt = acts.q.row_ptr(t) + int64_t(h) * dk;
                R* __restrict pr = probs.row_ptr(t);
                for (int64_t u = 0; u <= t; ++u) {
                    const R* __restrict ku = acts.k.row_ptr(u) + int64_t(h) * dk;
                    R sc = 0;
                    for (int64_t i = 0; i < dk; ++i) sc += qt[i] * ku[i];
                    pr[u] = sc;
                }
                R mx = pr[0];
                for (int64_t u = 1; u <= t; ++u) mx = std::max(mx, pr[u]);
                R sum = 0;
#pragma omp simd reduction(+ : sum)
                for (int64_t u = 0; u <= t; ++u) {
                    pr[u] = std::exp((pr[u] - mx) * inv_sqrt_dk);
                    sum += pr[u];
                }
                const R inv = R(1) / sum;
                for (int64_t u = 0; u <= t; ++u) pr[u] *= inv;
            }
            check_finite(probs, "attention softmax");
            acts.att_probs[size_t(h)] = std::move(probs);

            if (p_drop > 0.0) {
                TensorT<R> mask({T, T});
                const R keep = R(1.0 / (1.0 - p_drop));
                for (int64_t t = 0; t < T; ++t) {
                    R* mr = mask.row_ptr(t);
                    for (int64_t u = 0; u <= t; ++u) mr[u] = (rng.uniform() < p_drop) ? R(0) : keep;
                }
                acts.att_mask[size_t(h)] = std::move(mask);
            }

            for (int64_t t = 0; t < T; ++t) {
                R* __restrict out = acts.heads_pregate.row_ptr(t) + int64_t(h) * dk;
                std::fill(out, out + dk, R(0));
                const R* pr = acts.att_probs[size_t(h)].row_ptr(t);
                const R* mr = p_drop > 0.0 ? acts.att_mask[size_t(h)].row_ptr(t) : nullptr;
                for (int64_t u = 0; u <= t; ++u) {
                    const R w = mr ? pr[u] * mr[u] : pr[u];
                    if (w == R(0)) continue;
                    const R* __restrict vu = acts.v.row_ptr(u) + int64_t(h) * dk;
                    for (int64_t i = 0; i < dk; ++i) out[i] += w * vu[i];
                }
            }
        }
        check_finite(acts.heads_pregate, "attention output");

        if (mha_gates) {
            acts.heads_gated = acts.heads_pregate;
            for (int64_t t = 0; t < T; ++t) {
                R* row = acts.heads_gated.row_ptr(t);
                for (int h = 0; h < H; ++h) {
                    const R g = (*mha_gates)[size_t(h)];
                    for (int64_t i = 0; i < dk; ++i) row[int64_t(h) * dk + i] *= g;
                }
            }
        }

        const TensorT<R>& heads_out = mha_gates ? acts.heads_gated : acts.heads_pregate;
        TensorT<R> mha_out = matmul(heads_out, params.at(ParamId::block(l, ModuleKind::MHA, MatrixKind::O)));
        acts.x_mid = add(x, mha_out);

        const TensorT<R>& wn2 = params.at(ParamId::block(l, ModuleKind::Norm2, MatrixKind::Weight));
        acts.n2 = rmsnorm(acts.x_mid, wn2, R(cfg.rms_eps));

        acts.gate_in = matmul(acts.n2, params.at(ParamId::block(l, ModuleKind::FFN, MatrixKind::Gate)));
        acts.up = matmul(acts.n2, params.at(ParamId::block(l, ModuleKind::FFN, MatrixKind::Up)));
        acts.inter_pregate = hadamard(silu(acts.gate_in), acts.up);

        const std::vector<R>* ffn_gates = trace.gates.find(l, ModuleKind::FFN);
        if (ffn_gates) {
            acts.inter_gated = acts.inter_pregate;
            for (int64_t t = 0; t < T; ++t) {
                R* row = acts.inter_gated.row_ptr(t);
                for (int64_t j = 0; j < f; ++j) row[j] *= (*ffn_gates)[size_t(j)];
            }
        }

        const TensorT<R>& inter_out = ffn_gates ? acts.inter_gated : acts.inter_pregate;
        acts.ffn_out = matmul(inter_out, params.at(ParamId::block(l, ModuleKind::FFN, MatrixKind::Down)));

        TensorT<R> ffn_used = acts.ffn_out;
        if (p_drop > 0.0) {
            acts.ffn_mask = dropout_mask<R>({T, d}, p_drop, rng);
            ffn_used = hadamard(acts.ffn_out, acts.ffn_mask);
        }
        x = add(acts.x_mid, ffn_used);
    }

    TensorT<R> final_out = rmsnorm(x, params.at(ParamId::final_norm()), R(cfg.rms_eps));
    TensorT<R> logits = matmul(final_out, params.at(ParamId::lm_head()));
    if (keep_trace) {
        trace.final_in = std::move(x);
        trace.final_out = std::move(final_out);
    }
    return {std::move(logits), std::move(trace)};
}

// gateless overload
template <typename R>
std::pair<TensorT<R>, ForwardTraceT<R>> forward(const ModelConfig& cfg, const ParamsT<R>& params,
                                                const std::vector<int>& tokens, Mode mode, SeededRng rng,
                                                bool keep_trace = true) {
    return forward(cfg, params, tokens, mode, static_cast<const GateSetT<R>*>(nullptr), rng, keep_trace);
}

namespace detail {

// d_x for y = w * x / rms(x); also accumulates d_w.
template <typename R>
TensorT<R> rmsnorm_backward(const TensorT<R>& x, const TensorT<R>& w, R eps, const TensorT<R>& dy, TensorT<R>& dw) {
    const int64_t d = x.cols(), T = x.rows();
    TensorT<R> dx({T, d});
    for (int64_t t = 0; t < T; ++t) {
        const R* xr = x.row_ptr(t);
        const R* dyr = dy.row_ptr(t);
        R* dxr = dx.row_ptr(t);
        R ms = 0;
        for (int64_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        ms /= R(d);
        const R r = std::sqrt(ms + eps);
        const R inv_r = R(1) / r;
        R dot = 0; // sum_j dy_j * w_j * x_j
        for (int64_t j = 0; j < d; ++j) dot += dyr[j] * w.data[size_t(j)] * xr[j];
        const R c = dot * inv_r * inv_r * inv_r / R(d);
        for (int64_t j = 0; j < d; ++j) {
            dxr[j] = dyr[j] * w.data[size_t(j)] * inv_r - xr[j] * c;
            dw.data[size_t(j)] += dyr[j] * xr[j] * inv_r;
        }
    }
    return dx;
}

template <typename R>
TensorT<R>& grad_slot(GradsT<R>& grads, const ParamId& id, const TensorT<R>& like) {
    auto it = grads.find(id);
    if (it == grads.end()) it = grads.emplace(id, TensorT<R>(like.shape)).first;
    return it->second;
}

} // namespace detail

// Exact backward pass for a trace produced by forward(). Returns gradients
// for every parameter and, when the trace carried gates, dL/dg per unit.
template <typename R>
BackwardResultT<R> backward(const ForwardTraceT<R>& trace, const TensorT<R>& d_logits, bool want_param_grads = true) {
    if (trace.params == nullptr || trace.layers.empty()) throw TraceMismatch("trace is empty");
    const ModelConfig& cfg = trace.cfg;
    const int64_t T = int64_t(trace.tokens.size());
    const int64_t d = cfg.embed_dim, f = cfg.ffn_dim;
    const int H = cfg.num_heads;
    const int64_t dk = cfg.head_dim();
    const R inv_sqrt_dk = R(1.0 / std::sqrt(double(dk)));
    if (d_logits.ndim() != 2 || d_logits.rows() != T || d_logits.cols() != cfg.vocab_size)
        throw TraceMismatch("d_logits shape " + d_logits.shape_str() + " does not match trace");

    const detail::RopeTable<R> rope = detail::build_rope_table<R>(T, dk, cfg.rope_base);
    const ParamsT<R>& params = *trace.params;
    BackwardResultT<R> out;
    for (const auto& [mref, g] : trace.gates.gates) out.gate_grads[mref] = std::vector<R>(g.size(), R(0));

    // lm head and final norm
    TensorT<R> d_final_out = matmul(d_logits, transpose(params.at(ParamId::lm_head())));
    if (want_param_grads) {
        auto& g = detail::grad_slot(out.param_grads, ParamId::lm_head(), params.at(ParamId::lm_head()));
        add_inplace(g, matmul(transpose(trace.final_out), d_logits));
    }
    TensorT<R> dw_final({d});
    TensorT<R> dx = detail::rmsnorm_backward(trace.final_in, params.at(ParamId::final_norm()), R(cfg.rms_eps),
                                             d_final_out, dw_final);
    if (want_param_grads) {
        auto& g = detail::grad_slot(out.param_grads, ParamId::final_norm(), params.at(ParamId::final_norm()));
        add_inplace(g, dw_final);
    }

    for (int l = cfg.num_layers; l >= 1; --l) {
        const auto& acts = trace.layers[size_t(l - 1)];
        const std::vector<R>* mha_gates = trace.gates.find(l, ModuleKind::MHA);
        const std::vector<R>* ffn_gates = trace.gates.find(l, ModuleKind::FFN);

        // y = x_mid + dropout(ffn_out)
        TensorT<R> d_ffn_out = acts.ffn_mask.numel() > 0 ? hadamard(dx, acts.ffn_mask) : dx;
        TensorT<R> d_x_mid = dx; // residual branch

        // ffn_out = inter_gated * W_down
        const TensorT<R>& w_down = params.at(ParamId::block(l, ModuleKind::FFN, MatrixKind::Down));
        const TensorT<R>& inter_out = ffn_gates ? acts.inter_gated : acts.inter_pregate;
        if (want_param_grads) {
            auto& g = detail::grad_slot(out.param_grads, ParamId::block(l, ModuleKind::FFN, MatrixKind::Down), w_down);
            add_inplace(g, matmul(transpose(inter_out), d_ffn_out));
        }
        TensorT<R> d_inter_gated = matmul(d_ffn_out, transpose(w_down));

        // inter_gated = g ⊙ inter_pregate
        TensorT<R> d_inter_pregate = d_inter_gated;
        if (ffn_gates) {
            auto& gg = out.gate_grads[ModuleRef{l, ModuleKind::FFN}];
            for (int64_t t = 0; t < T; ++t) {
                const R* dig = d_inter_gated.row_ptr(t);
                const R* pre = acts.inter_pregate.row_ptr(t);
                R* dpre = d_inter_pregate.row_ptr(t);
                for (int64_t j = 0; j < f; ++j) {
                    gg[size_t(j)] += dig[j] * pre[j];
                    dpre[j] = dig[j] * (*ffn_gates)[size_t(j)];
                }
            }
        }

        // inter_pregate = silu(gate_in) ⊗ up
        TensorT<R> d_gate_in({T, f}), d_up({T, f});
        for (int64_t t = 0; t < T; ++t) {
            const R* gi = acts.gate_in.row_ptr(t);
            const R* up = acts.up.row_ptr(t);
            const R* dip = d_inter_pregate.row_ptr(t);
            R* dgi = d_gate_in.row_ptr(t);
            R* dup = d_up.row_ptr(t);
            for (int64_t j = 0; j < f; ++j) {
                const R sig = R(1) / (R(1) + std::exp(-gi[j]));
                const R si = gi[j] * sig;
                dup[j] = dip[j] * si;
                dgi[j] = dip[j] * up[j] * sig * (R(1) + gi[j] * (R(1) - sig));
            }
        }

        const TensorT<R>& w_gate = params.at(ParamId::block(l, ModuleKind::FFN, MatrixKind::Gate));
        const TensorT<R>& w_up = params.at(ParamId::block(l, ModuleKind::FFN, MatrixKind::Up));
        if (want_param_grads) {
            auto& gg = detail::grad_slot(out.param_grads, ParamId::block(l, ModuleKind::FFN, MatrixKind::Gate), w_gate);
            add_inplace(gg, matmul(transpose(acts.n2), d_gate_in));
            auto& gu = detail::grad_slot(out.param_grads, ParamId::block(l, ModuleKind::FFN, MatrixKind::Up), w_up);
            add_inplace(gu, matmul(transpose(acts.n2), d_up));
        }
        TensorT<R> d_n2 = matmul(d_gate_in, transpose(w_gate));
        add_inplace(d_n2, matmul(d_up, transpose(w_up)));

        // n2 = rmsnorm(x_mid)
        const ParamId n2_id = ParamId::block(l, ModuleKind::Norm2, MatrixKind::Weight);
        TensorT<R> dw_n2({d});
        add_inplace(d_x_mid, detail::rmsnorm_backward(acts.x_mid, params.at(n2_id), R(cfg.rms_eps), d_n2, dw_n2));
        if (want_param_grads) add_inplace(detail::grad_slot(out.param_grads, n2_id, params.at(n2_id)), dw_n2);

        // x_mid = x_in + heads_gated * W_O
        const TensorT<R>& w_o = params.at(ParamId::block(l, ModuleKind::MHA, MatrixKind::O));
        const TensorT<R>& heads_out = mha_gates ? acts.heads_gated : acts.heads_pregate;
        if (want_param_grads) {
            auto& g = detail::grad_slot(out.param_grads, ParamId::block(l, ModuleKind::MHA, MatrixKind::O), w_o);
            add_inplace(g, matmul(transpose(heads_out), d_x_mid));
        }
        TensorT<R> d_heads_gated = matmul(d_x_mid, transpose(w_o));
        TensorT<R> d_x_in = d_x_mid; // residual branch

        TensorT<R> d_heads_pregate = d_heads_gated;
        if (mha_gates) {
            auto& gg = out.gate_grads[ModuleRef{l, ModuleKind::MHA}];
            for (int64_t t = 0; t < T; ++t) {
                const R* dhg = d_heads_gated.row_ptr(t);
                const R* pre = acts.heads_pregate.row_ptr(t);
                R* dpre = d_heads_pregate.row_ptr(t);
                for (int h = 0; h < H; ++h) {
                    const R g = (*mha_gates)[size_t(h)];
                    for (int64_t i = 0; i < dk; ++i) {
                        const int64_t j = int64_t(h) * dk + i;
                        gg[size_t(h)] += dhg[j] * pre[j];
                        dpre[j] = dhg[j] * g;
                    }
                }
            }
        }

        // attention per head
        TensorT<R> d_q({T, d}), d_k({T, d}), d_v({T, d});
        for (int h = 0; h < H; ++h) {
            const TensorT<R>& probs = acts.att_probs[size_t(h)];
            const bool dropped = acts.att_mask[size_t(h)].numel() > 0;
            const TensorT<R>* mask = dropped ? &acts.att_mask[size_t(h)] : nullptr;
            std::vector<R> d_probs_pre(static_cast<size_t>(T));
            for (int64_t t = 0; t < T; ++t) {
                const R* d_out = d_heads_pregate.row_ptr(t) + int64_t(h) * dk;
                const R* pr = probs.row_ptr(t);
                const R* mr = mask ? mask->row_ptr(t) : nullptr;
                // dP_used[u] = d_out . v_u ; dV_u += P_used[t,u] * d_out
                for (int64_t u = 0; u <= t; ++u) {
                    const R* __restrict vu = acts.v.row_ptr(u) + int64_t(h) * dk;
                    R dp = 0;
                    for (int64_t i = 0; i < dk; ++i) dp += d_out[i] * vu[i];
                    const R w = mr ? pr[u] * mr[u] : pr[u];
                    if (w != R(0)) {
                        R* __restrict dvu = d_v.row_ptr(u) + int64_t(h) * dk;
                        for (int64_t i = 0; i < dk; ++i) dvu[i] += w * d_out[i];
                    }
                    d_probs_pre[size_t(u)] = mr ? dp * mr[u] : dp;
                }
                // softmax backward over the causal prefix
                R dot = 0;
                for (int64_t u = 0; u <= t; ++u) dot += d_probs_pre[size_t(u)] * pr[u];
                const R* qt = acts.q.row_ptr(t) + int64_t(h) * dk;
                R* dqt = d_q.row_ptr(t) + int64_t(h) * dk;
                for (int64_t u = 0; u <= t; ++u) {
                    const R ds = pr[u] * (d_probs_pre[size_t(u)] - dot) * inv_sqrt_dk;
                    if (ds == R(0)) continue;
                    const R* __restrict ku = acts.k.row_ptr(u) + int64_t(h) * dk;
                    R* __restrict dku = d_k.row_ptr(u) + int64_t(h) * dk;
                    for (int64_t i = 0; i < dk; ++i) {
                        dqt[i] += ds * ku[i];
                        dku[i] += ds * qt[i];
                    }
                }
            }
        }

        detail::rope_inplace(d_q, H, rope, -1);
        detail::rope_inplace(d_k, H, rope, -1);

        const TensorT<R>& w_q = params.at(ParamId::block(l, ModuleKind::MHA, MatrixKind::Q));
        const TensorT<R>& w_k = params.at(ParamId::block(l, ModuleKind::MHA, MatrixKind::K));
        const TensorT<R>& w_v = params.at(ParamId::block(l, ModuleKind::MHA, MatrixKind::V));
        if (want_param_grads) {
            TensorT<R> n1t = transpose(acts.n1);
            add_inplace(detail::grad_slot(out.param_grads, ParamId::block(l, ModuleKind::MHA, MatrixKind::Q), w_q),
                        matmul(n1t, d_q));
            add_inplace(detail::grad_slot(out.param_grads, ParamId::block(l, ModuleKind::MHA, MatrixKind::K), w_k),
                        matmul(n1t, d_k));
            add_inplace(detail::grad_slot(out.param_grads, ParamId::block(l, ModuleKind::MHA, MatrixKind::V), w_v),
                        matmul(n1t, d_v));
        }
        TensorT<R> d_n1 = matmul(d_q, transpose(w_q));
        add_inplace(d_n1, matmul(d_k, transpose(w_k)));
        add_inplace(d_n1, matmul(d_v, transpose(w_v)));

        const ParamId n1_id = ParamId::block(l, ModuleKind::Norm1, MatrixKind::Weight);
        TensorT<R> dw_n1({d});
        add_inplace(d_x_in, detail::rmsnorm_backward(acts.x_in, params.at(n1_id), R(cfg.rms_eps), d_n1, dw_n1));
        if (want_param_grads) add_inplace(detail::grad_slot(out.param_grads, n1_id, params.at(n1_id)), dw_n1);

        dx = std::move(d_x_in);
    }

    if (want_param_grads) {
        const TensorT<R>& embed = params.at(ParamId::embed());
        auto& g = detail::grad_slot(out.param_grads, ParamId::embed(), embed);
        for (int64_t t = 0; t < T; ++t) {
            R* row = g.row_ptr(trace.tokens[size_t(t)]);
            const R* src = dx.row_ptr(t);
            for (int64_t j = 0; j < d; ++j) row[j] += src[j];
        }
    }
    return out;
}

// Greedy decoding: argmax each step, exact ties resolved toward the lowest
// token id. Stops after max_new tokens or when eos is produced (eos is not
// included in the returned completion).
template <typename R>
std::vector<int> decode_greedy(const ModelConfig& cfg, const ParamsT<R>& params, const std::vector<int>& prompt,
                               int max_new, int eos) {
    if (prompt.empty()) throw SeqTooLong("prompt must be nonempty");
    std::vector<int> seq = prompt;
    std::vector<int> generated;
    for (int step = 0; step < max_new; ++step) {
        if (int64_t(seq.size()) >= cfg.max_seq_len) break;
        auto [logits, trace] = forward(cfg, params, seq, Mode::Eval, SeededRng(0), /*keep_trace=*/false);
        const R* last = logits.row_ptr(logits.rows() - 1);
        int best = 0;
        for (int vtok = 1; vtok < cfg.vocab_size; ++vtok)
            if (last[vtok] > last[best]) best = vtok;
        if (best == eos) break;
        generated.push_back(best);
        seq.push_back(best);
    }
    return generated;
}

// Sum over continuation positions of log p(token | prefix). Accumulated in
// double regardless of R.
template <typename R>
double log_likelihood(const ModelConfig& cfg, const ParamsT<R>& params, const std::vector<int>& context,
                      const std::vector<int>& continuation) {
    if (continuation.empty()) throw TokenOutOfRange("continuation must be nonempty");
    if (context.empty()) throw TokenOutOfRange("context must be nonempty (prepend BOS)");
    std::vector<int> seq = context;
    seq.insert(seq.end(), continuation.begin(), continuation.end());
    auto [logits, trace] = forward(cfg, params, seq, Mode::Eval, SeededRng(0), /*keep_trace=*/false);
    const int64_t ctx = int64_t(context.size());
    double total = 0.0;
    for (size_t j = 0; j < continuation.size(); ++j) {
        const R* row = logits.row_ptr(ctx + int64_t(j) - 1);
        double mx = row[0];
        for (int v = 1; v < cfg.vocab_size; ++v) mx = std::max(mx, double(row[v]));
        double sum = 0.0;
        for (int v = 0; v < cfg.vocab_size; ++v) sum += std::exp(double(row[v]) - mx);
        total += double(row[continuation[j]]) - mx - std::log(sum);
    }
    return total;
}

} // namespace coft
