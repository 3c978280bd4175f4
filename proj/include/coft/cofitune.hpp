#pragma once

#include "coft/trainer.hpp"

namespace coft {

// Samples fed to the importance proxy: token sequences of SFT training
// examples, capped at `count`, in dataset order.
template <typename R>
std::vector<std::vector<int>> importance_samples(const Vocabulary& vocab, const std::vector<Example>& dataset,
                                                 int count) {
    std::vector<std::vector<int>> out;
    for (const auto& e : dataset) {
        if (int(out.size()) >= count) break;
        out.push_back(prepare_sample(vocab, e).tokens);
    }
    return out;
}

template <typename R>
struct CofitResultT {
    ParamsT<R> params;
    std::vector<TrainLogEntry> log;
    TuningScope scope;
    ImportanceMaskSetT<R> importance; // normalized; empty when masking is off
};

// Coarse scope (default or supplied), then importance-masked SFT inside it.
// The virtual gates exist only while computing importance; tuning runs
// without them.
template <typename R>
CofitResultT<R> cofitune_train(const ModelConfig& mcfg, const ParamsT<R>& start, const std::vector<Example>& dataset,
                               const Vocabulary& vocab, const TrainConfig& tcfg,
                               const TuningScope* scope_override = nullptr) {
    CofitResultT<R> out;
    out.scope = scope_override ? *scope_override : default_scope(mcfg.num_layers);
    const ImportanceMaskSetT<R>* mask = nullptr;
    if (tcfg.cofitune_softmask) {
        auto samples = importance_samples<R>(vocab, dataset, tcfg.importance_samples);
        auto raw = compute_importance(mcfg, start, samples, tcfg.importance_dropout,
                                      scope_module_instances(mcfg, out.scope), tcfg.seed);
        out.importance = normalize_importance(raw);
        mask = &out.importance;
    }
    auto res = train(mcfg, start, dataset, vocab, tcfg, out.scope, mask);
    out.params = std::move(res.params);
    out.log = std::move(res.log);
    return out;
}

// V-SoftMask baseline: all parameters trainable, importance masks over MHA
// and FFN of every layer.
template <typename R>
CofitResultT<R> vsoftmask_train(const ModelConfig& mcfg, const ParamsT<R>& start, const std::vector<Example>& dataset,
                                const Vocabulary& vocab, const TrainConfig& tcfg) {
    CofitResultT<R> out;
    out.scope = TuningScope{0, mcfg.num_layers, {ModuleScope::ALL}};
    std::vector<ModuleRef> mods;
    for (int l = 1; l <= mcfg.num_layers; ++l) {
        mods.push_back({l, ModuleKind::MHA});
        mods.push_back({l, ModuleKind::FFN});
    }
    auto samples = importance_samples<R>(vocab, dataset, tcfg.importance_samples);
    auto raw = compute_importance(mcfg, start, samples, tcfg.importance_dropout, mods, tcfg.seed);
    out.importance = normalize_importance(raw);
    auto res = train(mcfg, start, dataset, vocab, tcfg, out.scope, &out.importance);
    out.params = std::move(res.params);
    out.log = std::move(res.log);
    return out;
}

} // namespace coft
