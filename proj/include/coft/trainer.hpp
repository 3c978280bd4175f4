#pragma once

#include <cmath>
#include <set>

#include "coft/data.hpp"
#include "coft/scope.hpp"
#include "coft/softmask.hpp"

namespace coft {

enum class Method { Full, L1, L2, Lora, WiseFt, VSoftMask, CoFiTune };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::Full: return "full";
        case Method::L1: return "l1";
        case Method::L2: return "l2";
        case Method::Lora: return "lora";
        case Method::WiseFt: return "wiseft";
        case Method::VSoftMask: return "vsoftmask";
        default: return "cofitune";
    }
}

inline Method parse_method(const std::string& s) {
    if (s == "full") return Method::Full;
    if (s == "l1") return Method::L1;
    if (s == "l2") return Method::L2;
    if (s == "lora") return Method::Lora;
    if (s == "wiseft") return Method::WiseFt;
    if (s == "vsoftmask") return Method::VSoftMask;
    if (s == "cofitune") return Method::CoFiTune;
    throw BadMethod("unknown method '" + s + "'");
}

struct TrainConfig {
    double peak_lr = 1e-3;
    int epochs = 3;
    int batch_size = 8;
    double warmup_frac = 0.03; // cosine-to-zero after linear warmup
    uint64_t seed = 0;
    double l1_strength = 0.001;
    double l2_strength = 0.001;
    Method method = Method::Full;
    int lora_rank = 8;
    double wiseft_alpha = 0.6;
    double importance_dropout = 0.1;
    int importance_samples = 12;
    bool cofitune_softmask = true; // ablation switch

    void validate() const {
        if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw BadConfig("warmup_frac must be in [0,1)");
        if (l1_strength < 0 || l2_strength < 0) throw BadConfig("regularizer strengths must be >= 0");
        if (epochs < 0 || batch_size <= 0) throw BadConfig("bad epochs/batch_size");
    }
};

// Cross-entropy over response tokens only. Returns the loss (mean over the
// unmasked positions) and d loss / d logits. Prompt positions get zero
// gradient rows.
template <typename R>
std::pair<double, TensorT<R>> sft_loss(const TensorT<R>& logits, const std::vector<int>& targets,
                                       const std::vector<char>& loss_mask) {
    const int64_t T = logits.rows(), V = logits.cols();
    if (int64_t(targets.size()) != T || int64_t(loss_mask.size()) != T)
        throw DimMismatch("sft_loss lengths: logits " + std::to_string(T) + ", targets " +
                          std::to_string(targets.size()) + ", mask " + std::to_string(loss_mask.size()));
    int64_t n_scored = 0;
    for (char m : loss_mask) n_scored += m ? 1 : 0;
    TensorT<R> d({T, V});
    if (n_scored == 0) return {0.0, d};

    double total = 0.0;
    const double inv_n = 1.0 / double(n_scored);
    for (int64_t t = 0; t < T; ++t) {
        if (!loss_mask[size_t(t)]) continue;
        const int target = targets[size_t(t)];
        if (target < 0 || target >= V) throw TokenOutOfRange("target " + std::to_string(target));
        const R* row = logits.row_ptr(t);
        double mx = row[0];
        for (int64_t v = 1; v < V; ++v) mx = std::max(mx, double(row[v]));
        double sum = 0.0;
        for (int64_t v = 0; v < V; ++v) sum += std::exp(double(row[v]) - mx);
        const double lse = mx + std::log(sum);
        total += -(double(row[target]) - lse);
        R* drow = d.row_ptr(t);
        for (int64_t v = 0; v < V; ++v) drow[v] = R(std::exp(double(row[v]) - lse) * inv_n);
        drow[target] -= R(inv_n);
    }
    const double loss = total * inv_n;
    if (!std::isfinite(loss)) throw NonFinite("sft loss is not finite");
    return {loss, d};
}

// Linear warmup to peak_lr, then cosine decay to zero.
inline double lr_at(int step, int total_steps, const TrainConfig& cfg) {
    if (total_steps <= 0) return 0.0;
    const int warmup = int(cfg.warmup_frac * total_steps);
    if (step < warmup) return cfg.peak_lr * double(step) / double(warmup);
    const double progress = double(step - warmup) / double(total_steps - warmup);
    return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

template <typename R>
struct AdamStateT {
    struct Moments {
        TensorT<R> m, v;
    };
    std::map<ParamId, Moments> moments;
    int64_t step = 0;
};

namespace detail {

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

template <typename R>
void adam_update_tensor(TensorT<R>& param, const TensorT<R>& grad, TensorT<R>& m, TensorT<R>& v, int64_t step,
                        double lr) {
    const double c1 = 1.0 - std::pow(kAdamBeta1, double(step));
    const double c2 = 1.0 - std::pow(kAdamBeta2, double(step));
    for (int64_t i = 0; i < param.numel(); ++i) {
        const double g = double(grad.data[size_t(i)]);
        double mi = kAdamBeta1 * double(m.data[size_t(i)]) + (1.0 - kAdamBeta1) * g;
        double vi = kAdamBeta2 * double(v.data[size_t(i)]) + (1.0 - kAdamBeta2) * g * g;
        m.data[size_t(i)] = R(mi);
        v.data[size_t(i)] = R(vi);
        const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + kAdamEps);
        param.data[size_t(i)] = R(double(param.data[size_t(i)]) - update);
    }
}

} // namespace detail

// Bias-corrected Adam over exactly the trainable set. Parameters outside the
// set are never touched; gradients must cover the set exactly.
template <typename R>
void adam_step(ParamsT<R>& params, const GradsT<R>& grads, AdamStateT<R>& state,
               const std::set<ParamId>& trainable, double lr) {
    for (const auto& [id, g] : grads)
        if (!trainable.count(id)) throw MissingGrad("gradient for frozen parameter " + id.name());
    ++state.step;
    for (const ParamId& id : trainable) {
        auto git = grads.find(id);
        if (git == grads.end()) throw MissingGrad("no gradient for trainable parameter " + id.name());
        auto& p = params.at(id);
        auto mit = state.moments.find(id);
        if (mit == state.moments.end())
            mit = state.moments.emplace(id, typename AdamStateT<R>::Moments{TensorT<R>(p.shape), TensorT<R>(p.shape)})
                      .first;
        detail::adam_update_tensor(p, git->second, mit->second.m, mit->second.v, state.step, lr);
    }
}

// L1 / L2 penalty gradients on the parameter shift away from the pretrained
// weights, added in place to the trainable grads. sign(0) == 0.
template <typename R>
void regularized_grads(GradsT<R>& grads, const ParamsT<R>& params, const ParamsT<R>& pretrained, Method method,
                       double strength) {
    if (method != Method::L1 && method != Method::L2) return;
    for (auto& [id, g] : grads) {
        const TensorT<R>& cur = params.at(id);
        const TensorT<R>& ref = pretrained.at(id);
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double delta = double(cur.data[size_t(i)]) - double(ref.data[size_t(i)]);
            if (method == Method::L1) {
                const double s = delta > 0 ? 1.0 : (delta < 0 ? -1.0 : 0.0);
                g.data[size_t(i)] += R(strength * s);
            } else {
                g.data[size_t(i)] += R(2.0 * strength * delta);
            }
        }
    }
}

// Elementwise (1-alpha)*theta + alpha*theta_hat over every parameter.
template <typename R>
ParamsT<R> wise_ft_interpolate(const ParamsT<R>& theta, const ParamsT<R>& theta_hat, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw BadConfig("wise-ft alpha must be in [0,1]");
    if (theta.size() != theta_hat.size()) throw ShapeMismatch("parameter sets differ in size");
    ParamsT<R> out;
    auto it1 = theta.begin();
    auto it2 = theta_hat.begin();
    for (; it1 != theta.end(); ++it1, ++it2) {
        if (!(it1->first == it2->first) || !it1->second.same_shape(it2->second))
            throw ShapeMismatch("parameter sets do not line up at " + it1->first.name());
        TensorT<R> t(it1->second.shape);
        for (int64_t i = 0; i < t.numel(); ++i)
            t.data[size_t(i)] =
                R((1.0 - alpha) * double(it1->second.data[size_t(i)]) + alpha * double(it2->second.data[size_t(i)]));
        out.emplace(it1->first, std::move(t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// sample preparation and the training loop

struct TrainSample {
    std::vector<int> tokens; // BOS + prompt + response + EOS
    int prompt_len = 0;      // BOS + prompt
};

inline TrainSample prepare_sample(const Vocabulary& vocab, const Example& e) {
    TrainSample s;
    std::string prompt = build_prompt(e, false);
    std::string full = build_prompt(e, true);
    std::vector<int> prompt_ids = vocab.tokenize(prompt);
    std::vector<int> full_ids = vocab.tokenize(full);
    s.tokens.push_back(Vocabulary::kBos);
    s.tokens.insert(s.tokens.end(), full_ids.begin(), full_ids.end());
    s.tokens.push_back(Vocabulary::kEos);
    s.prompt_len = int(prompt_ids.size()) + 1;
    return s;
}

struct TrainLogEntry {
    int step = 0;
    double loss = 0;
    double lr = 0;
};

template <typename R>
struct TrainResultT {
    ParamsT<R> params;
    std::vector<TrainLogEntry> log;
};

// Scope-restricted SFT. Per step: forward (train mode) -> sft_loss ->
// backward -> optional L1/L2 regularizer -> optional soft mask -> Adam with
// the scheduled lr. Deterministic given (seed, data, config).
template <typename R>
TrainResultT<R> train(const ModelConfig& mcfg, const ParamsT<R>& start, const std::vector<Example>& dataset,
                      const Vocabulary& vocab, const TrainConfig& tcfg, const TuningScope& scope,
                      const ImportanceMaskSetT<R>* mask = nullptr) {
    tcfg.validate();
    TrainResultT<R> out;
    out.params = start;
    if (tcfg.epochs == 0 || dataset.empty()) return out;

    const std::set<ParamId> trainable = apply_scope(mcfg, scope);
    ParamsT<R> pretrained;
    if (tcfg.method == Method::L1 || tcfg.method == Method::L2) pretrained = start;

    std::vector<TrainSample> samples;
    samples.reserve(dataset.size());
    for (const auto& e : dataset) samples.push_back(prepare_sample(vocab, e));

    const int n = int(samples.size());
    const int batches_per_epoch = (n + tcfg.batch_size - 1) / tcfg.batch_size;
    const int total_steps = tcfg.epochs * batches_per_epoch;

    AdamStateT<R> opt;
    SeededRng shuffle_rng(tcfg.seed, fnv1a64("train-shuffle"));
    int step = 0;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[size_t(i)] = i;
        SeededRng er = shuffle_rng.substream(uint64_t(epoch));
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[size_t(er.next_u64() % i)]);

        for (int b = 0; b < batches_per_epoch; ++b) {
            const int lo = b * tcfg.batch_size;
            const int hi = std::min(n, lo + tcfg.batch_size);
            const double inv_b = 1.0 / double(hi - lo);

            GradsT<R> acc;
            double batch_loss = 0.0;
            for (int s = lo; s < hi; ++s) {
                const TrainSample& ts = samples[size_t(order[size_t(s)])];
                std::vector<int> inputs(ts.tokens.begin(), ts.tokens.end() - 1);
                std::vector<int> targets(ts.tokens.begin() + 1, ts.tokens.end());
                std::vector<char> lmask(targets.size(), 0);
                for (size_t j = 0; j < targets.size(); ++j)
                    if (int(j) + 1 >= ts.prompt_len) lmask[j] = 1;

                SeededRng frng(tcfg.seed, mix_u64(fnv1a64("train-dropout"), mix_u64(uint64_t(step), uint64_t(s))));
                auto [logits, trace] = forward(mcfg, out.params, inputs, Mode::Train, frng);
                auto [loss, d_logits] = sft_loss(logits, targets, lmask);
                batch_loss += loss * inv_b;
                auto bw = backward(trace, d_logits);
                for (const ParamId& id : trainable) {
                    auto git = bw.param_grads.find(id);
                    if (git == bw.param_grads.end()) continue;
                    auto it = acc.find(id);
                    if (it == acc.end()) it = acc.emplace(id, TensorT<R>(git->second.shape)).first;
                    for (int64_t i = 0; i < git->second.numel(); ++i)
                        it->second.data[size_t(i)] += R(double(git->second.data[size_t(i)]) * inv_b);
                }
            }
            // parameters without a grad entry this batch still need one so the
            // optimizer sees the exact trainable set
            for (const ParamId& id : trainable)
                if (!acc.count(id)) acc.emplace(id, TensorT<R>(out.params.at(id).shape));

            if (tcfg.method == Method::L1)
                regularized_grads(acc, out.params, pretrained, Method::L1, tcfg.l1_strength);
            if (tcfg.method == Method::L2)
                regularized_grads(acc, out.params, pretrained, Method::L2, tcfg.l2_strength);
            if (mask && !mask->empty()) mask_gradients(acc, *mask, mcfg);

            const double lr = lr_at(step, total_steps, tcfg);
            adam_step(out.params, acc, opt, trainable, lr);
            if (!std::isfinite(batch_loss)) throw NonFinite("training loss diverged");
            out.log.push_back({step, batch_loss, lr});
            ++step;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// LoRA

template <typename R>
struct LoraAdapterT {
    int rank = 8;
    double alpha = 16.0; // 2 * rank
    // A: [rank, d_in], B: [d_out, rank]; delta W = (alpha/rank) * (B A)^T
    std::map<ParamId, std::pair<TensorT<R>, TensorT<R>>> ab;
};

inline std::vector<ParamId> lora_targets(const ModelConfig& cfg) {
    std::vector<ParamId> ids;
    for (int l = 1; l <= cfg.num_layers; ++l) {
        ids.push_back(ParamId::block(l, ModuleKind::MHA, MatrixKind::Q));
        ids.push_back(ParamId::block(l, ModuleKind::MHA, MatrixKind::K));
        ids.push_back(ParamId::block(l, ModuleKind::MHA, MatrixKind::V));
        ids.push_back(ParamId::block(l, ModuleKind::FFN, MatrixKind::Up));
        ids.push_back(ParamId::block(l, ModuleKind::FFN, MatrixKind::Down));
    }
    return ids;
}

// A is Gaussian (sigma 0.01), B starts at zero so attaching is a no-op.
template <typename R>
LoraAdapterT<R> lora_attach(const ModelConfig& cfg, const ParamsT<R>& params, int rank, const SeededRng& rng) {
    if (rank != 4 && rank != 8 && rank != 16) throw BadRank("lora rank must be 4, 8 or 16");
    LoraAdapterT<R> adapter;
    adapter.rank = rank;
    adapter.alpha = 2.0 * rank;
    for (const ParamId& id : lora_targets(cfg)) {
        const TensorT<R>& w = params.at(id);
        TensorT<R> a({rank, w.rows()});
        TensorT<R> b({w.cols(), rank});
        SeededRng r = rng.substream(fnv1a64("lora." + id.name()));
        for (auto& v : a.data) v = R(0.01 * r.gaussian());
        adapter.ab.emplace(id, std::make_pair(std::move(a), std::move(b)));
    }
    return adapter;
}

// Materialized weights W + (alpha/rank) (B A)^T for every adapted matrix.
template <typename R>
ParamsT<R> lora_effective(const ParamsT<R>& params, const LoraAdapterT<R>& adapter) {
    ParamsT<R> out = params;
    const R s = R(adapter.alpha / adapter.rank);
    for (const auto& [id, ab] : adapter.ab) {
        const TensorT<R>& a = ab.first;  // [r, d_in]
        const TensorT<R>& b = ab.second; // [d_out, r]
        TensorT<R>& w = out.at(id);      // [d_in, d_out]
        TensorT<R> delta = matmul(transpose(a), transpose(b));
        for (int64_t i = 0; i < w.numel(); ++i) w.data[size_t(i)] += s * delta.data[size_t(i)];
    }
    return out;
}

template <typename R>
ParamsT<R> lora_merge(const ParamsT<R>& params, const LoraAdapterT<R>& adapter) {
    return lora_effective(params, adapter);
}

// SFT where only the adapter factors train; base weights stay frozen.
template <typename R>
TrainResultT<R> train_lora(const ModelConfig& mcfg, const ParamsT<R>& start, const std::vector<Example>& dataset,
                           const Vocabulary& vocab, const TrainConfig& tcfg, LoraAdapterT<R>& adapter) {
    tcfg.validate();
    TrainResultT<R> out;
    out.params = start;
    if (tcfg.epochs == 0 || dataset.empty()) {
        out.params = lora_merge(start, adapter);
        return out;
    }

    std::vector<TrainSample> samples;
    for (const auto& e : dataset) samples.push_back(prepare_sample(vocab, e));
    const int n = int(samples.size());
    const int batches_per_epoch = (n + tcfg.batch_size - 1) / tcfg.batch_size;
    const int total_steps = tcfg.epochs * batches_per_epoch;
    const R s = R(adapter.alpha / adapter.rank);

    std::map<ParamId, std::array<TensorT<R>, 4>> opt; // mA, vA, mB, vB
    for (const auto& [id, ab] : adapter.ab)
        opt.emplace(id, std::array<TensorT<R>, 4>{TensorT<R>(ab.first.shape), TensorT<R>(ab.first.shape),
                                                  TensorT<R>(ab.second.shape), TensorT<R>(ab.second.shape)});

    SeededRng shuffle_rng(tcfg.seed, fnv1a64("train-shuffle"));
    int step = 0;
    int64_t adam_t = 0;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[size_t(i)] = i;
        SeededRng er = shuffle_rng.substream(uint64_t(epoch));
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[size_t(er.next_u64() % i)]);

        for (int b = 0; b < batches_per_epoch; ++b) {
            const int lo = b * tcfg.batch_size;
            const int hi = std::min(n, lo + tcfg.batch_size);
            const double inv_b = 1.0 / double(hi - lo);

            ParamsT<R> eff = lora_effective(out.params, adapter);
            GradsT<R> acc;
            double batch_loss = 0.0;
            for (int smp = lo; smp < hi; ++smp) {
                const TrainSample& ts = samples[size_t(order[size_t(smp)])];
                std::vector<int> inputs(ts.tokens.begin(), ts.tokens.end() - 1);
                std::vector<int> targets(ts.tokens.begin() + 1, ts.tokens.end());
                std::vector<char> lmask(targets.size(), 0);
                for (size_t j = 0; j < targets.size(); ++j)
                    if (int(j) + 1 >= ts.prompt_len) lmask[j] = 1;
                SeededRng frng(tcfg.seed, mix_u64(fnv1a64("train-dropout"), mix_u64(uint64_t(step), uint64_t(smp))));
                auto [logits, trace] = forward(mcfg, eff, inputs, Mode::Train, frng);
                auto [loss, d_logits] = sft_loss(logits, targets, lmask);
                batch_loss += loss * inv_b;
                auto bw = backward(trace, d_logits);
                for (const auto& [id, ab] : adapter.ab) {
                    auto git = bw.param_grads.find(id);
                    if (git == bw.param_grads.end()) continue;
                    auto it = acc.find(id);
                    if (it == acc.end()) it = acc.emplace(id, TensorT<R>(git->second.shape)).first;
                    for (int64_t i = 0; i < git->second.numel(); ++i)
                        it->second.data[size_t(i)] += R(double(git->second.data[size_t(i)]) * inv_b);
                }
            }

            const double lr = lr_at(step, total_steps, tcfg);
            ++adam_t;
            for (auto& [id, ab] : adapter.ab) {
                auto git = acc.find(id);
                TensorT<R> g_eff = git == acc.end() ? TensorT<R>(out.params.at(id).shape) : git->second;
                // delta W = s A^T B^T, so dA = s (G B)^T and dB = s (A G)^T
                TensorT<R> da = transpose(matmul(g_eff, ab.second)); // [r, d_in]
                TensorT<R> db = transpose(matmul(ab.first, g_eff));  // [d_out, r]
                for (auto& v : da.data) v *= s;
                for (auto& v : db.data) v *= s;
                auto& st = opt.at(id);
                detail::adam_update_tensor(ab.first, da, st[0], st[1], adam_t, lr);
                detail::adam_update_tensor(ab.second, db, st[2], st[3], adam_t, lr);
            }
            if (!std::isfinite(batch_loss)) throw NonFinite("training loss diverged");
            out.log.push_back({step, batch_loss, lr});
            ++step;
        }
    }
    out.params = lora_merge(out.params, adapter);
    return out;
}

} // namespace coft
