#pragma once

#include "coft/cofitune.hpp"
#include "coft/evalrun.hpp"
#include "coft/search.hpp"

namespace coft {

inline TuningScope candidate_scope(const CandidateConfig& c) {
    TuningScope sc;
    sc.range_a = c.start;
    sc.range_b = c.start + c.span;
    switch (c.modules) {
        case SearchModules::MhaFfn: sc.modules = {ModuleScope::MHA, ModuleScope::FFN}; break;
        case SearchModules::Ffn: sc.modules = {ModuleScope::FFN}; break;
        case SearchModules::Mha: sc.modules = {ModuleScope::MHA}; break;
        case SearchModules::Down: sc.modules = {ModuleScope::DOWN}; break;
        default: sc.modules = {ModuleScope::UP}; break;
    }
    return sc;
}

// Candidate evaluation that backs the real coarse search: train a fresh copy
// of the pretrained weights under the candidate scope, then score it. The
// candidate seed derives from (base seed, candidate), so evaluation order
// cannot influence any record.
template <typename R>
CandidateEvaluator make_training_evaluator(const ModelConfig& mcfg, const ParamsT<R>& pretrained,
                                           const TaskSuite& suite, const Vocabulary& vocab, const TrainConfig& tcfg,
                                           const EvalOptions& eval_opts, uint64_t base_seed) {
    return [=, &pretrained, &suite, &vocab](const CandidateConfig& c) {
        TrainConfig run_cfg = tcfg;
        run_cfg.seed = mix_u64(base_seed, fnv1a64(c.str()));
        auto res = train(mcfg, pretrained, suite.spec_train, vocab, run_cfg, candidate_scope(c));
        EvalDetail detail = evaluate_model(mcfg, res.params, suite, vocab, eval_opts);
        EvalRecord rec;
        rec.candidate = c;
        rec.spec = detail.breakdown.spec;
        rec.vers = detail.breakdown.vers;
        rec.uni = rec.spec + rec.vers;
        rec.seed = run_cfg.seed;
        rec.steps = int(res.log.size());
        return rec;
    };
}

} // namespace coft
