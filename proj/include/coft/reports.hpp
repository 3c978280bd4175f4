#pragma once

#include <string>
#include <vector>

#include "coft/metrics.hpp"
#include "coft/search.hpp"

namespace coft {

struct RunReport {
    std::string method;
    std::string scope; // "a:b:MODS" when applicable
    uint64_t seed = 0;
    std::string config_hash;
    ScoreBreakdown scores;
    // optional per-item arrays
    std::vector<double> spec_embed_f1, spec_bleu, spec_rouge1, spec_rouge2, spec_rougeL;
    std::vector<int> kn_correct, rs_correct;
    std::vector<double> instruct_nll;
};

std::string report_to_json(const RunReport& r);
RunReport report_from_json(const std::string& text);

// Structural validation of a serialized report; returns false and fills
// `error` when a required key is missing or has the wrong type.
bool validate_report_json(const std::string& text, std::string* error);

// Detail-table column order: BERTScore-role, Rouge, BLEU, Rouge-1/2/L, Spec,
// then Instruct, Gen-Kn, Gen-Rs, its four sub-scores, Vers, and finally the
// two unified scores.
std::string breakdown_csv_header();
std::string breakdown_csv_row(const ScoreBreakdown& b);

// Method comparison table (rows sorted by method name; missing values blank).
std::string comparison_csv(const std::vector<RunReport>& reports);

std::string search_report_json(const SearchResult& res, uint64_t seed, const std::string& config_hash);
std::string search_trace_csv(const SearchResult& res);

// FNV-64 over canonical JSON, as a hex string.
std::string config_hash_hex(const std::string& canonical_json);

} // namespace coft
