#pragma once

#include "coft/metrics.hpp"
#include "coft/trainer.hpp"

namespace coft {

struct EvalOptions {
    double instruct_divisor = 1000.0;
    int bleu_max_n = 4;
    int max_new_tokens = 28;
    SpecTaskKind spec_kind = SpecTaskKind::Generative;
    bool length_normalized_choice = false;
};

struct EvalDetail {
    ScoreBreakdown breakdown;
    std::vector<double> spec_embed_f1, spec_bleu, spec_rouge1, spec_rouge2, spec_rougeL;
    std::vector<int> spec_exact;    // per-item exact match
    std::vector<int> kn_correct;    // per-item recall hits
    std::vector<int> rs_correct;    // per-item choice hits (suite order)
    std::vector<double> instruct_nll;
    double mean_nll = 0.0;
};

// Unit-normalized rows of the model's own input-embedding table serve as the
// BERTScore-role embedding provider at this scale.
template <typename R>
EmbeddingProvider embedding_provider(const ParamsT<R>& params) {
    const TensorT<R>& embed = params.at(ParamId::embed());
    const int64_t v = embed.rows(), d = embed.cols();
    return [&embed, v, d](int token) {
        if (token < 0 || token >= v) throw UnknownSymbol("token " + std::to_string(token));
        std::vector<double> e(static_cast<size_t>(d));
        double norm = 0;
        const R* row = embed.row_ptr(token);
        for (int64_t i = 0; i < d; ++i) {
            e[size_t(i)] = double(row[i]);
            norm += e[size_t(i)] * e[size_t(i)];
        }
        norm = std::sqrt(norm);
        if (norm > 0)
            for (auto& x : e) x /= norm;
        return e;
    };
}

// Full ScoreBreakdown over the synthetic suite: generative (or exact-match)
// speciality, fact-recall Gen-Kn, four-way multiple-choice Gen-Rs, and
// held-out NLL for Instruct.
template <typename R>
EvalDetail evaluate_model(const ModelConfig& mcfg, const ParamsT<R>& params, const TaskSuite& suite,
                          const Vocabulary& vocab, const EvalOptions& opts = {}) {
    EvalDetail detail;
    EmbeddingProvider provider = embedding_provider(params);

    // --- speciality
    for (const auto& e : suite.spec_test) {
        std::vector<int> prompt_ids = vocab.tokenize(build_prompt(e, false));
        std::vector<int> prompt;
        prompt.push_back(Vocabulary::kBos);
        prompt.insert(prompt.end(), prompt_ids.begin(), prompt_ids.end());
        std::vector<int> generated = decode_greedy(mcfg, params, prompt, opts.max_new_tokens, Vocabulary::kEos);
        std::vector<int> reference = vocab.tokenize(e.output);
        detail.spec_embed_f1.push_back(embed_match_f1(generated, reference, provider));
        detail.spec_bleu.push_back(bleu(generated, {reference}, opts.bleu_max_n));
        detail.spec_rouge1.push_back(rouge_n(generated, reference, 1));
        detail.spec_rouge2.push_back(rouge_n(generated, reference, 2));
        detail.spec_rougeL.push_back(rouge_l(generated, reference));
        detail.spec_exact.push_back(vocab.detokenize(generated) == e.output ? 1 : 0);
    }
    auto mean = [](const std::vector<double>& xs) {
        if (xs.empty()) return 0.0;
        double s = 0;
        for (double x : xs) s += x;
        return s / double(xs.size());
    };
    auto frac = [](const std::vector<int>& xs) {
        if (xs.empty()) return 0.0;
        double s = 0;
        for (int x : xs) s += x;
        return s / double(xs.size());
    };

    // --- general knowledge: greedy recall, exact match
    for (const auto& e : suite.gen_kn) {
        std::vector<int> prompt_ids = vocab.tokenize(build_prompt(e, false));
        std::vector<int> prompt;
        prompt.push_back(Vocabulary::kBos);
        prompt.insert(prompt.end(), prompt_ids.begin(), prompt_ids.end());
        std::vector<int> generated = decode_greedy(mcfg, params, prompt, 8, Vocabulary::kEos);
        detail.kn_correct.push_back(vocab.detokenize(generated) == e.output ? 1 : 0);
    }

    // --- generic reasoning: log-likelihood option scoring per subtask
    std::array<double, 4> rs_hits{}, rs_totals{};
    for (const auto& item : suite.gen_rs) {
        Example as_example{item.instruction, item.input, ""};
        std::vector<int> ctx_ids = vocab.tokenize(build_prompt(as_example, false));
        std::vector<int> ctx;
        ctx.push_back(Vocabulary::kBos);
        ctx.insert(ctx.end(), ctx_ids.begin(), ctx_ids.end());
        std::vector<double> lls;
        std::vector<size_t> lens;
        for (const auto& opt : item.options) {
            std::vector<int> cont = vocab.tokenize(opt);
            cont.push_back(Vocabulary::kEos);
            lls.push_back(log_likelihood(mcfg, params, ctx, cont));
            lens.push_back(cont.size());
        }
        const int picked = pick_option(lls, lens, ChoiceScoring{opts.length_normalized_choice});
        const int hit = picked == item.answer ? 1 : 0;
        detail.rs_correct.push_back(hit);
        rs_hits[size_t(item.subtask)] += hit;
        rs_totals[size_t(item.subtask)] += 1;
    }
    std::array<double, 4> rs_subs{};
    for (int i = 0; i < 4; ++i) rs_subs[size_t(i)] = rs_totals[size_t(i)] > 0 ? rs_hits[size_t(i)] / rs_totals[size_t(i)] : 0.0;

    // --- instruction following: mean per-item total NLL on held-out items
    for (const auto& e : suite.instruct_heldout) {
        std::vector<int> ctx_ids = vocab.tokenize(build_prompt(e, false));
        std::vector<int> ctx;
        ctx.push_back(Vocabulary::kBos);
        ctx.insert(ctx.end(), ctx_ids.begin(), ctx_ids.end());
        std::vector<int> cont = vocab.tokenize(e.output);
        cont.push_back(Vocabulary::kEos);
        detail.instruct_nll.push_back(-log_likelihood(mcfg, params, ctx, cont));
    }
    detail.mean_nll = mean(detail.instruct_nll);

    RawScores raw;
    if (opts.spec_kind == SpecTaskKind::Generative) {
        raw.embed_f1 = mean(detail.spec_embed_f1);
        raw.bleu = mean(detail.spec_bleu);
        raw.rouge1 = mean(detail.spec_rouge1);
        raw.rouge2 = mean(detail.spec_rouge2);
        raw.rougeL = mean(detail.spec_rougeL);
    } else {
        raw.accuracy = frac(detail.spec_exact);
    }
    raw.gen_kn = frac(detail.kn_correct);
    raw.gen_rs_subs = rs_subs;
    raw.instruct = instruct_score(detail.mean_nll, opts.instruct_divisor);
    detail.breakdown = compose(raw);
    return detail;
}

} // namespace coft
