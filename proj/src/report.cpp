#include "coft/reports.hpp"

#include <algorithm>
#include <cstdio>

#include <json.hpp>

#include "coft/softmask.hpp"

namespace coft {

using nlohmann::json;

namespace {

json breakdown_to_json(const ScoreBreakdown& b) {
    return json{{"embed_f1", b.embed_f1},
                {"bleu", b.bleu},
                {"rouge1", b.rouge1},
                {"rouge2", b.rouge2},
                {"rougeL", b.rougeL},
                {"rouge", b.rouge},
                {"spec", b.spec},
                {"gen_kn", b.gen_kn},
                {"gen_rs_subs", b.gen_rs_subs},
                {"gen_rs", b.gen_rs},
                {"instruct", b.instruct},
                {"vers", b.vers},
                {"uni", b.uni},
                {"uni_wo_instruct", b.uni_wo_instruct},
                {"spec_kind", b.spec_kind == SpecTaskKind::Generative ? "generative" : "exact"}};
}

ScoreBreakdown breakdown_from_json(const json& j) {
    ScoreBreakdown b;
    b.embed_f1 = j.at("embed_f1").get<double>();
    b.bleu = j.at("bleu").get<double>();
    b.rouge1 = j.at("rouge1").get<double>();
    b.rouge2 = j.at("rouge2").get<double>();
    b.rougeL = j.at("rougeL").get<double>();
    b.rouge = j.at("rouge").get<double>();
    b.spec = j.at("spec").get<double>();
    b.gen_kn = j.at("gen_kn").get<double>();
    auto subs = j.at("gen_rs_subs").get<std::vector<double>>();
    for (size_t i = 0; i < 4 && i < subs.size(); ++i) b.gen_rs_subs[i] = subs[i];
    b.gen_rs = j.at("gen_rs").get<double>();
    b.instruct = j.at("instruct").get<double>();
    b.vers = j.at("vers").get<double>();
    b.uni = j.at("uni").get<double>();
    b.uni_wo_instruct = j.at("uni_wo_instruct").get<double>();
    b.spec_kind = j.at("spec_kind").get<std::string>() == "exact" ? SpecTaskKind::ExactAnswer
                                                                  : SpecTaskKind::Generative;
    return b;
}

} // namespace

std::string report_to_json(const RunReport& r) {
    json j{{"method", r.method},
           {"scope", r.scope},
           {"seed", r.seed},
           {"config_hash", r.config_hash},
           {"scores", breakdown_to_json(r.scores)}};
    json detail;
    detail["spec_embed_f1"] = r.spec_embed_f1;
    detail["spec_bleu"] = r.spec_bleu;
    detail["spec_rouge1"] = r.spec_rouge1;
    detail["spec_rouge2"] = r.spec_rouge2;
    detail["spec_rougeL"] = r.spec_rougeL;
    detail["kn_correct"] = r.kn_correct;
    detail["rs_correct"] = r.rs_correct;
    detail["instruct_nll"] = r.instruct_nll;
    j["detail"] = detail;
    return j.dump(2);
}

RunReport report_from_json(const std::string& text) {
    json j = json::parse(text);
    RunReport r;
    r.method = j.at("method").get<std::string>();
    r.scope = j.at("scope").get<std::string>();
    r.seed = j.at("seed").get<uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.scores = breakdown_from_json(j.at("scores"));
    if (j.contains("detail")) {
        const json& d = j["detail"];
        r.spec_embed_f1 = d.value("spec_embed_f1", std::vector<double>{});
        r.spec_bleu = d.value("spec_bleu", std::vector<double>{});
        r.spec_rouge1 = d.value("spec_rouge1", std::vector<double>{});
        r.spec_rouge2 = d.value("spec_rouge2", std::vector<double>{});
        r.spec_rougeL = d.value("spec_rougeL", std::vector<double>{});
        r.kn_correct = d.value("kn_correct", std::vector<int>{});
        r.rs_correct = d.value("rs_correct", std::vector<int>{});
        r.instruct_nll = d.value("instruct_nll", std::vector<double>{});
    }
    return r;
}

bool validate_report_json(const std::string& text, std::string* error) {
    auto fail = [&](const std::string& msg) {
        if (error) *error = msg;
        return false;
    };
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) return fail("not valid JSON");
    if (!j.is_object()) return fail("top level must be an object");
    for (const char* key : {"method", "scope", "config_hash"})
        if (!j.contains(key) || !j[key].is_string()) return fail(std::string("missing string key '") + key + "'");
    if (!j.contains("seed") || !j["seed"].is_number()) return fail("missing numeric key 'seed'");
    if (!j.contains("scores") || !j["scores"].is_object()) return fail("missing object key 'scores'");
    const json& s = j["scores"];
    for (const char* key : {"embed_f1", "bleu", "rouge1", "rouge2", "rougeL", "rouge", "spec", "gen_kn", "gen_rs",
                            "instruct", "vers", "uni", "uni_wo_instruct"})
        if (!s.contains(key) || !s[key].is_number()) return fail(std::string("scores missing number '") + key + "'");
    if (!s.contains("gen_rs_subs") || !s["gen_rs_subs"].is_array() || s["gen_rs_subs"].size() != 4)
        return fail("scores.gen_rs_subs must be a 4-element array");
    if (!s.contains("spec_kind") || !s["spec_kind"].is_string()) return fail("scores.spec_kind missing");
    return true;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

} // namespace

std::string breakdown_csv_header() {
    return "bertscore,rouge,bleu,rouge1,rouge2,rougeL,spec,instruct,gen_kn,gen_rs,"
           "rs_reverse,rs_sort,rs_max,rs_succ,vers,uni,uni_wo_instruct";
}

std::string breakdown_csv_row(const ScoreBreakdown& b) {
    std::string row = fmt(b.embed_f1) + "," + fmt(b.rouge) + "," + fmt(b.bleu) + "," + fmt(b.rouge1) + "," +
                      fmt(b.rouge2) + "," + fmt(b.rougeL) + "," + fmt(b.spec) + "," + fmt(b.instruct) + "," +
                      fmt(b.gen_kn) + "," + fmt(b.gen_rs);
    for (double s : b.gen_rs_subs) row += "," + fmt(s);
    row += "," + fmt(b.vers) + "," + fmt(b.uni) + "," + fmt(b.uni_wo_instruct);
    return row;
}

std::string comparison_csv(const std::vector<RunReport>& reports) {
    std::vector<const RunReport*> sorted;
    for (const auto& r : reports) sorted.push_back(&r);
    std::sort(sorted.begin(), sorted.end(),
              [](const RunReport* a, const RunReport* b) { return a->method < b->method; });
    std::string out = "method,spec,vers,uni,uni_wo_instruct\n";
    for (const RunReport* r : sorted) {
        out += r->method + "," + fmt(r->scores.spec) + "," + fmt(r->scores.vers) + "," + fmt(r->scores.uni) + "," +
               fmt(r->scores.uni_wo_instruct) + "\n";
    }
    return out;
}

std::string search_report_json(const SearchResult& res, uint64_t seed, const std::string& config_hash) {
    json records = json::array();
    for (const auto& [c, rec] : res.records)
        records.push_back(json{{"candidate", c.str()},
                               {"scope", std::to_string(c.start) + ":" + std::to_string(c.start + c.span) + ":" +
                                             search_modules_scope_token(c.modules)},
                               {"spec", rec.spec},
                               {"vers", rec.vers},
                               {"uni", rec.uni},
                               {"seed", rec.seed},
                               {"steps", rec.steps}});
    json trace = json::array();
    for (const auto& row : res.trace)
        trace.push_back(json{{"step", row.step},
                             {"candidate", row.candidate.str()},
                             {"spec", row.spec},
                             {"vers", row.vers},
                             {"uni", row.uni},
                             {"cached", row.cached}});
    json j{{"seed", seed},
           {"config_hash", config_hash},
           {"winner", res.best.str()},
           {"winner_scope", std::to_string(res.best.start) + ":" + std::to_string(res.best.start + res.best.span) +
                                ":" + search_modules_scope_token(res.best.modules)},
           {"winner_uni", res.best_record.uni},
           {"distinct_evaluations", res.distinct_evaluations},
           {"step1_start", res.step1_start},
           {"step2_start", res.step2_start},
           {"step2_span", res.step2_span},
           {"records", records},
           {"trace", trace}};
    return j.dump(2);
}

std::string search_trace_csv(const SearchResult& res) {
    std::string out = "step,candidate,spec,vers,uni,cached\n";
    for (const auto& row : res.trace)
        out += std::to_string(row.step) + "," + row.candidate.str() + "," + fmt(row.spec) + "," + fmt(row.vers) +
               "," + fmt(row.uni) + "," + (row.cached ? "1" : "0") + "\n";
    return out;
}

std::string config_hash_hex(const std::string& canonical_json) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)fnv1a64(canonical_json));
    return buf;
}

std::string importance_to_json(const ImportanceMaskSetT<float>& masks) {
    json arr = json::array();
    for (const auto& [m, iv] : masks.items) {
        arr.push_back(json{{"layer", m.layer},
                           {"module", m.module == ModuleKind::MHA ? "mha" : "ffn"},
                           {"values", iv.values},
                           {"raw_max", iv.raw_max},
                           {"normalized", iv.normalized}});
    }
    return json{{"importance", arr}}.dump(2);
}

ImportanceMaskSetT<float> importance_from_json(const std::string& text) {
    ImportanceMaskSetT<float> out;
    json j = json::parse(text);
    for (const auto& item : j.at("importance")) {
        ModuleRef m;
        m.layer = item.at("layer").get<int>();
        m.module = item.at("module").get<std::string>() == "mha" ? ModuleKind::MHA : ModuleKind::FFN;
        ImportanceVectorT<float> iv;
        iv.module = m;
        iv.values = item.at("values").get<std::vector<float>>();
        iv.raw_max = item.at("raw_max").get<float>();
        iv.normalized = item.at("normalized").get<bool>();
        out.items[m] = std::move(iv);
    }
    return out;
}

} // namespace coft
