#include "coft/search.hpp"

#include <algorithm>
#include <cmath>

namespace coft {

const char* search_modules_name(SearchModules m) {
    switch (m) {
        case SearchModules::MhaFfn: return "MHA&FFN";
        case SearchModules::Ffn: return "FFN";
        case SearchModules::Mha: return "MHA";
        case SearchModules::Down: return "down_proj";
        default: return "up_proj";
    }
}

std::string search_modules_scope_token(SearchModules m) {
    switch (m) {
        case SearchModules::MhaFfn: return "MHA+FFN";
        case SearchModules::Ffn: return "FFN";
        case SearchModules::Mha: return "MHA";
        case SearchModules::Down: return "DOWN";
        default: return "UP";
    }
}

std::string CandidateConfig::str() const {
    return "(" + std::to_string(start) + "," + std::to_string(start + span) + "]-" + search_modules_name(modules);
}

const EvalRecord& SearchState::evaluate(const CandidateConfig& c, int step) {
    auto it = cache_.find(c);
    bool cached = it != cache_.end();
    if (!cached) {
        EvalRecord rec = evaluator_(c);
        rec.candidate = c;
        if (std::abs(rec.uni - (rec.spec + rec.vers)) > 1e-9)
            throw BadConfig("evaluator broke uni == spec + vers for " + c.str());
        it = cache_.emplace(c, std::move(rec)).first;
        first_step_.emplace(c, step);
    }
    trace_.push_back({step, c, it->second.spec, it->second.vers, it->second.uni, cached});
    return it->second;
}

int candidate_first_step(const SearchState& st, const CandidateConfig& c) {
    auto it = st.first_step_.find(c);
    return it == st.first_step_.end() ? 1 << 20 : it->second;
}

namespace {

// best / second-best start among a local result dict; ties toward the
// lowest start index
int arg_best(const std::map<int, double>& result) {
    int best = -1;
    for (const auto& [start, uni] : result)
        if (best < 0 || uni > result.at(best)) best = start;
    return best;
}

int arg_second(const std::map<int, double>& result, int exclude) {
    int best = -1;
    for (const auto& [start, uni] : result) {
        if (start == exclude) continue;
        if (best < 0 || uni > result.at(best)) best = start;
    }
    return best;
}

} // namespace

int get_best_layer_range(int num_layers, int left, int right, int alpha, SearchState& state, int step) {
    if (left < 0 || left >= right) throw BadRange("need 0 <= left < right");
    if (right + alpha > num_layers)
        throw BadRange("right + alpha = " + std::to_string(right + alpha) + " exceeds N = " +
                       std::to_string(num_layers));
    const int pivot = (left + right) / 2;
    std::map<int, double> result;
    result[left] = state.evaluate({left, alpha, SearchModules::MhaFfn}, step).uni;
    result[right] = state.evaluate({right, alpha, SearchModules::MhaFfn}, step).uni;
    result[pivot] = state.evaluate({pivot, alpha, SearchModules::MhaFfn}, step).uni;
    const int best = arg_best(result);
    const int second = arg_second(result, best);
    const int pivot2 = (best + second) / 2;
    result[pivot2] = state.evaluate({pivot2, alpha, SearchModules::MhaFfn}, step).uni;
    return arg_best(result);
}

SearchResult coarse_search(int num_layers, CandidateEvaluator evaluator) {
    if (num_layers < 4) throw BadRange("coarse search needs at least 4 layers");
    SearchState state(std::move(evaluator));

    // step 1: broad halves
    int alpha = num_layers / 2;
    const int s1 = get_best_layer_range(num_layers, 0, num_layers / 2, alpha, state, 1);

    // step 2: halved span inside the step-1 winner
    alpha /= 2;
    const int s2 = get_best_layer_range(num_layers, s1, s1 + alpha, alpha, state, 2);

    // step 3: module decomposition inside (s2, s2+alpha]
    const EvalRecord& mha = state.evaluate({s2, alpha, SearchModules::Mha}, 3);
    const EvalRecord& ffn = state.evaluate({s2, alpha, SearchModules::Ffn}, 3);
    const bool ffn_wins = ffn.uni >= mha.uni; // FFN precedes MHA in tie order
    if (ffn_wins) {
        state.evaluate({s2, alpha, SearchModules::Up}, 3);
        state.evaluate({s2, alpha, SearchModules::Down}, 3);
    }
    // MHA has no explored sub-modules at this granularity

    // global winner across all three steps
    SearchResult out;
    bool have = false;
    auto better = [&](const EvalRecord& a, const EvalRecord& b) {
        if (a.uni != b.uni) return a.uni > b.uni;
        const int sa = candidate_first_step(state, a.candidate);
        const int sb = candidate_first_step(state, b.candidate);
        if (sa != sb) return sa < sb;
        if (a.candidate.start != b.candidate.start) return a.candidate.start < b.candidate.start;
        return uint8_t(a.candidate.modules) < uint8_t(b.candidate.modules);
    };
    for (const auto& [c, rec] : state.records()) {
        if (!have || better(rec, out.best_record)) {
            out.best_record = rec;
            out.best = c;
            have = true;
        }
    }
    out.trace = state.trace();
    out.records = state.records();
    out.distinct_evaluations = state.distinct_evaluations();
    out.step1_start = s1;
    out.step2_start = s2;
    out.step2_span = alpha;
    return out;
}

} // namespace coft
