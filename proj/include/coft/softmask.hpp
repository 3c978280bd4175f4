#pragma once

#include <vector>

#include "coft/data.hpp"
#include "coft/scope.hpp"

namespace coft {

// Per-unit importance of one module instance. Values are nonnegative raw
// gradient magnitudes until normalize_importance maps them into [0,1].
template <typename R>
struct ImportanceVectorT {
    ModuleRef module;
    std::vector<R> values;
    R raw_max = R(0);
    bool normalized = false;
};

template <typename R>
struct ImportanceMaskSetT {
    std::map<ModuleRef, ImportanceVectorT<R>> items;
    bool empty() const { return items.empty(); }
};

using ImportanceMaskSet = ImportanceMaskSetT<float>;

// Insight-1 default tuning scope: layer range (N*25%, N*50%], FFN modules.
inline TuningScope default_scope(int num_layers) {
    TuningScope sc;
    sc.range_a = num_layers / 4;
    sc.range_b = num_layers / 2;
    sc.modules = {ModuleScope::FFN};
    if (sc.range_a >= sc.range_b) throw BadRange("model too shallow for the default scope");
    return sc;
}

// Module instances covered by a tuning scope at unit granularity.
inline std::vector<ModuleRef> scope_module_instances(const ModelConfig& cfg, const TuningScope& scope) {
    std::vector<ModuleRef> mods;
    const bool all = scope.modules.count(ModuleScope::ALL) > 0;
    const bool mha = all || scope.modules.count(ModuleScope::MHA) > 0;
    const bool ffn = all || scope.modules.count(ModuleScope::FFN) > 0 || scope.modules.count(ModuleScope::UP) > 0 ||
                     scope.modules.count(ModuleScope::DOWN) > 0;
    for (int l = scope.range_a + 1; l <= scope.range_b; ++l) {
        if (mha) mods.push_back({l, ModuleKind::MHA});
        if (ffn) mods.push_back({l, ModuleKind::FFN});
    }
    return mods;
}

// KL(P1 || P2) between the two dropout-perturbed output distributions,
// averaged over sequence positions, plus its gradients wrt both logit sets.
template <typename R>
double kl_divergence_loss(const TensorT<R>& logits1, const TensorT<R>& logits2, TensorT<R>& d1, TensorT<R>& d2) {
    const int64_t T = logits1.rows(), V = logits1.cols();
    d1 = TensorT<R>({T, V});
    d2 = TensorT<R>({T, V});
    double total = 0.0;
    std::vector<double> lp1(static_cast<size_t>(V));
    std::vector<double> lp2(static_cast<size_t>(V));
    for (int64_t t = 0; t < T; ++t) {
        const R* r1 = logits1.row_ptr(t);
        const R* r2 = logits2.row_ptr(t);
        auto log_softmax = [&](const R* row, std::vector<double>& lp) {
            double mx = row[0];
            for (int64_t v = 1; v < V; ++v) mx = std::max(mx, double(row[v]));
            double sum = 0.0;
            for (int64_t v = 0; v < V; ++v) sum += std::exp(double(row[v]) - mx);
            const double lse = mx + std::log(sum);
            for (int64_t v = 0; v < V; ++v) lp[size_t(v)] = double(row[v]) - lse;
        };
        log_softmax(r1, lp1);
        log_softmax(r2, lp2);
        double kl = 0.0;
        for (int64_t v = 0; v < V; ++v) kl += std::exp(lp1[size_t(v)]) * (lp1[size_t(v)] - lp2[size_t(v)]);
        total += kl;
        // dKL/dz1_v = p1_v ((lp1_v - lp2_v) - kl);  dKL/dz2_v = p2_v - p1_v
        const double inv_T = 1.0 / double(T);
        for (int64_t v = 0; v < V; ++v) {
            const double p1 = std::exp(lp1[size_t(v)]);
            const double p2 = std::exp(lp2[size_t(v)]);
            d1.at(t, v) = R(p1 * ((lp1[size_t(v)] - lp2[size_t(v)]) - kl) * inv_T);
            d2.at(t, v) = R((p2 - p1) * inv_T);
        }
    }
    return total / double(T);
}

// The dual-pass KL for one sample under explicit dropout streams; used by
// compute_importance and by finite-difference checks that must pin the
// streams while perturbing gate values.
template <typename R>
double importance_kl(const ModelConfig& icfg, const ParamsT<R>& params, const std::vector<int>& sample,
                     const GateSetT<R>& gates, SeededRng r1, SeededRng r2) {
    auto [logits1, t1] = forward(icfg, params, sample, Mode::Train, &gates, r1);
    auto [logits2, t2] = forward(icfg, params, sample, Mode::Train, &gates, r2);
    TensorT<R> d1, d2;
    return kl_divergence_loss(logits1, logits2, d1, d2);
}

// Signed total gate gradients dKL/dg (both passes summed) for one sample
// under explicit dropout streams.
template <typename R>
GateGradsT<R> importance_gate_grads(const ModelConfig& icfg, const ParamsT<R>& params, const std::vector<int>& sample,
                                    const GateSetT<R>& gates, SeededRng r1, SeededRng r2) {
    auto [logits1, t1] = forward(icfg, params, sample, Mode::Train, &gates, r1);
    auto [logits2, t2] = forward(icfg, params, sample, Mode::Train, &gates, r2);
    TensorT<R> d1, d2;
    kl_divergence_loss(logits1, logits2, d1, d2);
    auto bw1 = backward(t1, d1, /*want_param_grads=*/false);
    auto bw2 = backward(t2, d2, /*want_param_grads=*/false);
    GateGradsT<R> out;
    for (const auto& [m, g1] : bw1.gate_grads) {
        const auto& g2 = bw2.gate_grads.at(m);
        std::vector<R> sum(g1.size());
        for (size_t i = 0; i < g1.size(); ++i) sum[i] = g1[i] + g2[i];
        out[m] = std::move(sum);
    }
    return out;
}

// Importance of units via the dual-dropout KL proxy: two train-mode forwards
// of the same sample with independent dropout streams share one set of
// all-ones virtual gates; |dKL/dg| is accumulated per unit and averaged over
// the K samples. Raw values are not yet normalized.
template <typename R>
ImportanceMaskSetT<R> compute_importance(const ModelConfig& cfg, const ParamsT<R>& params,
                                         const std::vector<std::vector<int>>& samples, double dropout_p,
                                         const std::vector<ModuleRef>& target_modules, uint64_t seed) {
    if (!(dropout_p > 0.0 && dropout_p < 1.0))
        throw BadProbability("importance proxy needs dropout_p in (0,1), got " + std::to_string(dropout_p));
    if (samples.empty()) throw BadConfig("importance needs at least one sample");

    ModelConfig icfg = cfg;
    icfg.dropout_p = dropout_p;
    GateSetT<R> gates = make_unit_gates<R>(icfg, target_modules);

    ImportanceMaskSetT<R> out;
    for (const auto& m : target_modules) {
        ImportanceVectorT<R> iv;
        iv.module = m;
        iv.values.assign(gates.gates.at(m).size(), R(0));
        out.items[m] = std::move(iv);
    }

    SeededRng base(seed, fnv1a64("importance"));
    for (size_t k = 0; k < samples.size(); ++k) {
        SeededRng r1 = base.substream(2 * k);
        SeededRng r2 = base.substream(2 * k + 1);
        GateGradsT<R> gg = importance_gate_grads(icfg, params, samples[k], gates, r1, r2);
        for (auto& [m, iv] : out.items) {
            const auto& g = gg.at(m);
            for (size_t i = 0; i < iv.values.size(); ++i) iv.values[i] += std::abs(g[i]);
        }
    }
    const R inv_k = R(1) / R(samples.size());
    for (auto& [m, iv] : out.items) {
        for (auto& v : iv.values) v *= inv_k;
        iv.raw_max = iv.values.empty() ? R(0) : *std::max_element(iv.values.begin(), iv.values.end());
        iv.normalized = false;
    }
    return out;
}

// Per-instance max normalization into [0,1]; an all-zero vector stays zero.
template <typename R>
ImportanceMaskSetT<R> normalize_importance(const ImportanceMaskSetT<R>& raw) {
    ImportanceMaskSetT<R> out = raw;
    for (auto& [m, iv] : out.items) {
        R mx = R(0);
        for (R v : iv.values) {
            if (v < R(0)) throw BadConfig("raw importance must be nonnegative");
            mx = std::max(mx, v);
        }
        if (!iv.normalized) iv.raw_max = mx;
        if (mx > R(0))
            for (auto& v : iv.values) v /= mx;
        iv.normalized = true;
    }
    return out;
}

// Eq.-6 gradient modulation: each unit's parameter-gradient slices are
// scaled by (1 - I_unit). FFN neuron u owns column u of the up/gate-side
// matrices and row u of down_proj; MHA head u owns its column blocks of
// Q/K/V and its row block of W^O. Forward passes are never touched.
template <typename R>
void mask_gradients(GradsT<R>& grads, const ImportanceMaskSetT<R>& masks, const ModelConfig& cfg) {
    for (const auto& [m, iv] : masks.items) {
        if (!iv.normalized) throw BadConfig("mask_gradients needs normalized importance");
        if (m.module == ModuleKind::FFN) {
            if (int64_t(iv.values.size()) != cfg.ffn_dim)
                throw ShapeMismatch("FFN importance length " + std::to_string(iv.values.size()));
            auto scale_cols = [&](MatrixKind mk) {
                auto it = grads.find(ParamId::block(m.layer, ModuleKind::FFN, mk));
                if (it == grads.end()) return;
                TensorT<R>& g = it->second; // [d, f]
                for (int64_t r = 0; r < g.rows(); ++r) {
                    R* row = g.row_ptr(r);
                    for (int64_t j = 0; j < g.cols(); ++j) row[j] *= (R(1) - iv.values[size_t(j)]);
                }
            };
            scale_cols(MatrixKind::Up);
            auto it = grads.find(ParamId::block(m.layer, ModuleKind::FFN, MatrixKind::Down));
            if (it != grads.end()) {
                TensorT<R>& g = it->second; // [f, d]
                for (int64_t r = 0; r < g.rows(); ++r) {
                    const R f = R(1) - iv.values[size_t(r)];
                    R* row = g.row_ptr(r);
                    for (int64_t j = 0; j < g.cols(); ++j) row[j] *= f;
                }
            }
        } else {
            if (int64_t(iv.values.size()) != cfg.num_heads)
                throw ShapeMismatch("MHA importance length " + std::to_string(iv.values.size()));
            const int64_t dk = cfg.head_dim();
            auto scale_head_cols = [&](MatrixKind mk) {
                auto it = grads.find(ParamId::block(m.layer, ModuleKind::MHA, mk));
                if (it == grads.end()) return;
                TensorT<R>& g = it->second; // [d, d], head h owns columns h*dk..
                for (int64_t r = 0; r < g.rows(); ++r) {
                    R* row = g.row_ptr(r);
                    for (int h = 0; h < cfg.num_heads; ++h) {
                        const R f = R(1) - iv.values[size_t(h)];
                        for (int64_t i = 0; i < dk; ++i) row[int64_t(h) * dk + i] *= f;
                    }
                }
            };
            scale_head_cols(MatrixKind::Q);
            scale_head_cols(MatrixKind::K);
            scale_head_cols(MatrixKind::V);
            auto it = grads.find(ParamId::block(m.layer, ModuleKind::MHA, MatrixKind::O));
            if (it != grads.end()) {
                TensorT<R>& g = it->second; // [d, d], head h owns rows h*dk..
                for (int h = 0; h < cfg.num_heads; ++h) {
                    const R f = R(1) - iv.values[size_t(h)];
                    for (int64_t r = int64_t(h) * dk; r < int64_t(h + 1) * dk; ++r) {
                        R* row = g.row_ptr(r);
                        for (int64_t j = 0; j < g.cols(); ++j) row[j] *= f;
                    }
                }
            }
        }
    }
}

// JSON persistence for importance sets lives in src/report.cpp.
std::string importance_to_json(const ImportanceMaskSetT<float>& masks);
ImportanceMaskSetT<float> importance_from_json(const std::string& text);

} // namespace coft
