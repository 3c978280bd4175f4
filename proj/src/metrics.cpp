#include "coft/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace coft {

namespace {

constexpr double kBleuEps = 1e-9;

std::map<TokenSeq, int> ngram_counts(const TokenSeq& seq, int n) {
    std::map<TokenSeq, int> counts;
    if (int(seq.size()) >= n)
        for (size_t i = 0; i + size_t(n) <= seq.size(); ++i)
            ++counts[TokenSeq(seq.begin() + long(i), seq.begin() + long(i) + n)];
    return counts;
}

} // namespace

double bleu(const TokenSeq& candidate, const std::vector<TokenSeq>& references, int max_n) {
    if (references.empty()) throw MissingScore("bleu requires at least one reference");
    if (candidate.empty()) return 0.0;

    const size_t c = candidate.size();
    // effective reference length: closest to candidate, ties toward shorter
    size_t r = references[0].size();
    for (const auto& ref : references) {
        const size_t len = ref.size();
        const auto dist = [&](size_t x) { return x > c ? x - c : c - x; };
        if (dist(len) < dist(r) || (dist(len) == dist(r) && len < r)) r = len;
    }

    double log_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        auto cand = ngram_counts(candidate, n);
        std::map<TokenSeq, int> clip;
        for (const auto& ref : references) {
            auto rc = ngram_counts(ref, n);
            for (const auto& [gram, cnt] : rc) {
                auto it = clip.find(gram);
                if (it == clip.end()) clip[gram] = cnt;
                else it->second = std::max(it->second, cnt);
            }
        }
        long long total = 0, matched = 0;
        for (const auto& [gram, cnt] : cand) {
            total += cnt;
            auto it = clip.find(gram);
            if (it != clip.end()) matched += std::min(cnt, it->second);
        }
        double p = (total > 0 && matched > 0) ? double(matched) / double(total) : kBleuEps;
        log_sum += std::log(p);
    }
    double geo = std::exp(log_sum / double(max_n));
    double bp = (c < r) ? std::exp(1.0 - double(r) / double(c)) : 1.0;
    return bp * geo;
}

double rouge_n(const TokenSeq& candidate, const TokenSeq& reference, int n) {
    if (n < 1) throw BadConfig("rouge_n needs n >= 1");
    if (int(candidate.size()) < n || int(reference.size()) < n) return 0.0;
    auto cand = ngram_counts(candidate, n);
    auto ref = ngram_counts(reference, n);
    long long overlap = 0, cand_total = 0, ref_total = 0;
    for (const auto& [gram, cnt] : cand) {
        cand_total += cnt;
        auto it = ref.find(gram);
        if (it != ref.end()) overlap += std::min(cnt, it->second);
    }
    for (const auto& [gram, cnt] : ref) ref_total += cnt;
    if (overlap == 0) return 0.0;
    double p = double(overlap) / double(cand_total);
    double rcl = double(overlap) / double(ref_total);
    return 2.0 * p * rcl / (p + rcl);
}

double rouge_l(const TokenSeq& candidate, const TokenSeq& reference) {
    if (candidate.empty() || reference.empty()) return 0.0;
    const size_t m = candidate.size(), n = reference.size();
    std::vector<int> prev(n + 1, 0), cur(n + 1, 0);
    for (size_t i = 1; i <= m; ++i) {
        for (size_t j = 1; j <= n; ++j)
            cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    const int lcs = prev[n];
    if (lcs == 0) return 0.0;
    double p = double(lcs) / double(m);
    double r = double(lcs) / double(n);
    return 2.0 * p * r / (p + r);
}

double embed_match_f1(const TokenSeq& candidate, const TokenSeq& reference, const EmbeddingProvider& provider) {
    if (candidate.empty() || reference.empty()) return 0.0;
    std::vector<std::vector<double>> ce, re;
    ce.reserve(candidate.size());
    re.reserve(reference.size());
    for (int t : candidate) ce.push_back(provider(t));
    for (int t : reference) re.push_back(provider(t));
    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0;
        for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    auto side = [&](const std::vector<std::vector<double>>& from, const std::vector<std::vector<double>>& to) {
        double sum = 0;
        for (const auto& e : from) {
            double best = 0; // floor negative matches at 0
            for (const auto& f : to) best = std::max(best, dot(e, f));
            sum += best;
        }
        return sum / double(from.size());
    };
    double p = side(ce, re), r = side(re, ce);
    if (p + r == 0.0) return 0.0;
    return 2.0 * p * r / (p + r);
}

double instruct_score(double total_nll, double divisor) {
    if (total_nll < 0) throw MissingScore("nll must be nonnegative");
    return 1.0 - total_nll / divisor;
}

ScoreBreakdown compose(const RawScores& raw) {
    ScoreBreakdown b;
    const bool generative = raw.embed_f1.has_value() || raw.bleu.has_value() || raw.rouge1.has_value();
    if (generative) {
        if (!(raw.embed_f1 && raw.bleu && raw.rouge1 && raw.rouge2 && raw.rougeL))
            throw MissingScore("generative speciality needs embed_f1, bleu and all three rouges");
        b.spec_kind = SpecTaskKind::Generative;
        b.embed_f1 = *raw.embed_f1;
        b.bleu = *raw.bleu;
        b.rouge1 = *raw.rouge1;
        b.rouge2 = *raw.rouge2;
        b.rougeL = *raw.rougeL;
        b.rouge = (b.rouge1 + b.rouge2 + b.rougeL) / 3.0;
        b.spec = (b.embed_f1 + b.rouge + b.bleu) / 3.0;
    } else if (raw.accuracy) {
        b.spec_kind = SpecTaskKind::ExactAnswer;
        b.spec = *raw.accuracy;
    } else {
        throw MissingScore("no speciality inputs given");
    }

    if (!raw.gen_kn) throw MissingScore("gen_kn missing");
    b.gen_kn = *raw.gen_kn;
    if (raw.gen_rs_subs) {
        b.gen_rs_subs = *raw.gen_rs_subs;
        b.gen_rs = (b.gen_rs_subs[0] + b.gen_rs_subs[1] + b.gen_rs_subs[2] + b.gen_rs_subs[3]) / 4.0;
    } else if (raw.gen_rs) {
        b.gen_rs = *raw.gen_rs;
        b.gen_rs_subs = {b.gen_rs, b.gen_rs, b.gen_rs, b.gen_rs};
    } else {
        throw MissingScore("gen_rs missing");
    }
    if (!raw.instruct) throw MissingScore("instruct missing");
    b.instruct = *raw.instruct;

    b.vers = (b.gen_kn + b.gen_rs + b.instruct) / 3.0;
    b.uni = b.spec + b.vers;
    b.uni_wo_instruct = b.spec + (b.gen_kn + b.gen_rs) / 2.0;
    return b;
}

int pick_option(const std::vector<double>& option_lls, const std::vector<size_t>& option_lengths,
                const ChoiceScoring& scoring) {
    if (option_lls.empty()) throw MissingScore("no options to score");
    int best = 0;
    double best_score = scoring.length_normalized && option_lengths[0] > 0
                            ? option_lls[0] / double(option_lengths[0])
                            : option_lls[0];
    for (size_t i = 1; i < option_lls.size(); ++i) {
        double s = scoring.length_normalized && option_lengths[i] > 0 ? option_lls[i] / double(option_lengths[i])
                                                                      : option_lls[i];
        if (s > best_score) {
            best = int(i);
            best_score = s;
        }
    }
    return best;
}

} // namespace coft
