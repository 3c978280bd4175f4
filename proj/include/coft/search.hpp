#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "coft/common.hpp"

namespace coft {

// Trainable-module choice explored by the coarse search.
enum class SearchModules : uint8_t { MhaFfn = 0, Ffn = 1, Mha = 2, Down = 3, Up = 4 };

const char* search_modules_name(SearchModules m); // "MHA&FFN", "FFN", ...
std::string search_modules_scope_token(SearchModules m); // "MHA+FFN", "FFN", ...

struct CandidateConfig {
    int start = 0; // layer range (start, start+span]
    int span = 0;
    SearchModules modules = SearchModules::MhaFfn;

    bool operator<(const CandidateConfig& o) const {
        return std::tie(start, span, modules) < std::tie(o.start, o.span, o.modules);
    }
    bool operator==(const CandidateConfig& o) const {
        return start == o.start && span == o.span && modules == o.modules;
    }
    std::string str() const; // "(8,16]-FFN"
};

struct EvalRecord {
    CandidateConfig candidate;
    double spec = 0;
    double vers = 0;
    double uni = 0;
    uint64_t seed = 0;
    int steps = 0; // training steps spent
};

using CandidateEvaluator = std::function<EvalRecord(const CandidateConfig&)>;

// Memoized evaluation cache plus the step-by-step trace.
class SearchState {
public:
    explicit SearchState(CandidateEvaluator evaluator) : evaluator_(std::move(evaluator)) {}

    // Serves from cache when possible; checks uni == spec + vers on insert.
    const EvalRecord& evaluate(const CandidateConfig& c, int step);

    int distinct_evaluations() const { return int(cache_.size()); }
    const std::map<CandidateConfig, EvalRecord>& records() const { return cache_; }

    struct TraceRow {
        int step;
        CandidateConfig candidate;
        double spec, vers, uni;
        bool cached;
    };
    const std::vector<TraceRow>& trace() const { return trace_; }

private:
    CandidateEvaluator evaluator_;
    std::map<CandidateConfig, EvalRecord> cache_;
    std::map<CandidateConfig, int> first_step_; // step that first evaluated it
    std::vector<TraceRow> trace_;

    friend struct SearchResult;
    friend int candidate_first_step(const SearchState&, const CandidateConfig&);
};

// One GetBestLayerRange call: evaluates (left,left+a], (right,right+a] and
// the pivot range, then the second pivot between the best and second-best
// starts. Returns the start index with maximal Uni (ties toward the lowest
// start). All candidates use MHA&FFN modules.
int get_best_layer_range(int num_layers, int left, int right, int alpha, SearchState& state, int step = 1);

struct SearchResult {
    CandidateConfig best;
    EvalRecord best_record;
    std::vector<SearchState::TraceRow> trace;
    std::map<CandidateConfig, EvalRecord> records;
    int distinct_evaluations = 0;
    int step1_start = 0, step2_start = 0;
    int step2_span = 0;
};

// Three-step coarse exploration: broad halves, narrowed halves, then module
// decomposition inside the winning range. Global winner is the max-Uni
// record over every step, ties broken by earlier step, lower start, then
// module order MHA&FFN, FFN, MHA, down_proj, up_proj.
SearchResult coarse_search(int num_layers, CandidateEvaluator evaluator);

} // namespace coft
