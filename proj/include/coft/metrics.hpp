#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "coft/common.hpp"

namespace coft {

// maps a token id to its unit-normalized embedding
using EmbeddingProvider = std::function<std::vector<double>(int)>;

using TokenSeq = std::vector<int>;

// Clipped modified n-gram precision BLEU with add-epsilon smoothing on zero
// counts and brevity penalty exp(1 - r/c) when the candidate is shorter than
// the (closest-length) reference. Empty candidate scores 0 by contract.
double bleu(const TokenSeq& candidate, const std::vector<TokenSeq>& references, int max_n = 4);

double rouge_n(const TokenSeq& candidate, const TokenSeq& reference, int n);
double rouge_l(const TokenSeq& candidate, const TokenSeq& reference);

// BERTScore-style greedy matching F1 over an embedding provider. Per-token
// best-match cosines are floored at 0 so the score stays in [0,1].
double embed_match_f1(const TokenSeq& candidate, const TokenSeq& reference, const EmbeddingProvider& provider);

// Instruct. = 1 - nll/divisor, unclamped.
double instruct_score(double total_nll, double divisor = 1000.0);

enum class SpecTaskKind { Generative, ExactAnswer };

struct ScoreBreakdown {
    double embed_f1 = 0, bleu = 0, rouge1 = 0, rouge2 = 0, rougeL = 0;
    double rouge = 0;
    double spec = 0;
    double gen_kn = 0;
    std::array<double, 4> gen_rs_subs{};
    double gen_rs = 0;
    double instruct = 0;
    double vers = 0;
    double uni = 0;
    double uni_wo_instruct = 0;
    SpecTaskKind spec_kind = SpecTaskKind::Generative;
};

// Raw inputs for compose(). Generative tasks supply embed_f1/bleu/rouges;
// exact-answer tasks supply accuracy. gen_rs may be given as four sub-scores
// or as a precomposed value.
struct RawScores {
    std::optional<double> embed_f1, bleu, rouge1, rouge2, rougeL;
    std::optional<double> accuracy;
    std::optional<double> gen_kn;
    std::optional<std::array<double, 4>> gen_rs_subs;
    std::optional<double> gen_rs;
    std::optional<double> instruct;
};

ScoreBreakdown compose(const RawScores& raw);

// lm-eval style option scoring: option with the highest summed continuation
// log-likelihood wins, exact ties resolved toward the lowest option index.
// Option log-likelihoods are supplied by the caller (one vector per item).
struct ChoiceScoring {
    bool length_normalized = false;
};
int pick_option(const std::vector<double>& option_lls, const std::vector<size_t>& option_lengths,
                const ChoiceScoring& scoring = {});

} // namespace coft
