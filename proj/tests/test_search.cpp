#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "coft/evaluate.hpp"
#include "coft/search.hpp"

using namespace coft;

namespace {

// Spec and Vers values from the published 7B Finance exploration tables.
// The step-1 second pivot (12,28] never appears there; the scripted
// evaluator returns a sentinel 0 for unlisted candidates.
std::map<std::string, std::pair<double, double>> finance_7b_table() {
    return {
        {"(0,16]-MHA&FFN", {0.4300, 0.4272}},   {"(8,24]-MHA&FFN", {0.4332, 0.4460}},
        {"(16,32]-MHA&FFN", {0.4123, 0.4574}},  {"(8,16]-MHA&FFN", {0.4264, 0.4575}},
        {"(16,24]-MHA&FFN", {0.4101, 0.4661}},  {"(12,20]-MHA&FFN", {0.4188, 0.4599}},
        {"(10,18]-MHA&FFN", {0.4213, 0.4583}},  {"(8,16]-FFN", {0.4220, 0.4653}},
        {"(8,16]-MHA", {0.4081, 0.4699}},       {"(8,16]-down_proj", {0.4143, 0.4692}},
        {"(8,16]-up_proj", {0.4103, 0.4729}},
    };
}

CandidateEvaluator scripted(std::map<std::string, std::pair<double, double>> table, int* calls = nullptr) {
    return [table, calls](const CandidateConfig& c) {
        if (calls) ++*calls;
        EvalRecord rec;
        rec.candidate = c;
        auto it = table.find(c.str());
        if (it != table.end()) {
            rec.spec = it->second.first;
            rec.vers = it->second.second;
        }
        rec.uni = rec.spec + rec.vers;
        return rec;
    };
}

CandidateEvaluator constant_eval(double uni, int* calls = nullptr) {
    return [uni, calls](const CandidateConfig& c) {
        if (calls) ++*calls;
        EvalRecord rec;
        rec.candidate = c;
        rec.spec = uni / 2;
        rec.vers = uni / 2;
        rec.uni = uni;
        return rec;
    };
}

} // namespace

TEST_CASE("get_best_layer_range reproduces the published step-2 trace") {
    int calls = 0;
    SearchState state(scripted(finance_7b_table(), &calls));
    int best = get_best_layer_range(32, 8, 16, 8, state, 2);
    CHECK(best == 8);
    CHECK(calls == 4);
    bool saw_pivot2 = false;
    for (const auto& row : state.trace())
        if (row.candidate.start == 10 && row.candidate.span == 8) saw_pivot2 = true;
    CHECK(saw_pivot2);
    CHECK(state.records().at({8, 8, SearchModules::MhaFfn}).uni == doctest::Approx(0.8839).epsilon(1e-9));
    CHECK(state.records().at({10, 8, SearchModules::MhaFfn}).uni == doctest::Approx(0.8796).epsilon(1e-9));
}

TEST_CASE("get_best_layer_range validates its range") {
    SearchState state(constant_eval(1.0));
    CHECK_THROWS_AS(get_best_layer_range(32, -1, 8, 8, state), BadRange);
    CHECK_THROWS_AS(get_best_layer_range(32, 8, 8, 8, state), BadRange);
    CHECK_THROWS_AS(get_best_layer_range(32, 8, 16, 20, state), BadRange);
}

TEST_CASE("constant landscape: returns left, four evaluations, ties break low and early") {
    int calls = 0;
    SearchState state(constant_eval(0.5, &calls));
    int best = get_best_layer_range(32, 0, 16, 16, state, 1);
    CHECK(best == 0);
    CHECK(calls == 4); // pivot2 = (0+8)/2 = 4 is distinct here

    auto res = coarse_search(32, constant_eval(0.5));
    CHECK(res.best.start == 0);
    CHECK(res.best.span == 16);
    CHECK(res.best.modules == SearchModules::MhaFfn);
    CHECK(res.distinct_evaluations <= 12);
}

TEST_CASE("monotone landscape returns the largest evaluated start") {
    auto increasing = [](const CandidateConfig& c) {
        EvalRecord rec;
        rec.candidate = c;
        rec.spec = 0.0;
        rec.vers = double(c.start);
        rec.uni = rec.vers;
        return rec;
    };
    SearchState state(increasing);
    int best = get_best_layer_range(32, 0, 16, 16, state, 1);
    CHECK(best == 16);
}

TEST_CASE("coarse_search reproduces the published winner with at most 12 evaluations") {
    int calls = 0;
    auto res = coarse_search(32, scripted(finance_7b_table(), &calls));
    CHECK(res.step1_start == 8);
    CHECK(res.step2_start == 8);
    CHECK(res.step2_span == 8);
    CHECK(res.best.str() == "(8,16]-FFN");
    CHECK(res.best_record.uni == doctest::Approx(0.8873).epsilon(1e-9));
    CHECK(res.distinct_evaluations <= 12);
    CHECK(calls == res.distinct_evaluations);

    // every cached record has uni <= winner
    for (const auto& [c, rec] : res.records) CHECK(rec.uni <= res.best_record.uni + 1e-12);

    // rerun determinism
    auto res2 = coarse_search(32, scripted(finance_7b_table()));
    CHECK(res2.best.str() == res.best.str());
    CHECK(res2.trace.size() == res.trace.size());
}

TEST_CASE("memoization: repeated candidates cost no extra evaluator calls") {
    int calls = 0;
    SearchState state(constant_eval(1.0, &calls));
    CandidateConfig c{4, 8, SearchModules::MhaFfn};
    state.evaluate(c, 1);
    state.evaluate(c, 1);
    state.evaluate(c, 2);
    CHECK(calls == 1);
    CHECK(state.distinct_evaluations() == 1);
    CHECK(state.trace().size() == 3);
    CHECK(state.trace()[1].cached);
}

TEST_CASE("search rejects evaluators that break uni == spec + vers") {
    auto broken = [](const CandidateConfig& c) {
        EvalRecord rec;
        rec.candidate = c;
        rec.spec = 0.5;
        rec.vers = 0.4;
        rec.uni = 1.0;
        return rec;
    };
    SearchState state(broken);
    CHECK_THROWS_AS(state.evaluate({0, 8, SearchModules::MhaFfn}, 1), BadConfig);
}

TEST_CASE("budget stays within 12 distinct evaluations on random landscapes") {
    for (uint64_t seed = 0; seed < 8; ++seed) {
        auto noisy = [seed](const CandidateConfig& c) {
            SeededRng rng(seed, fnv1a64(c.str()));
            EvalRecord rec;
            rec.candidate = c;
            rec.spec = rng.uniform();
            rec.vers = rng.uniform();
            rec.uni = rec.spec + rec.vers;
            return rec;
        };
        auto res = coarse_search(32, noisy);
        CHECK(res.distinct_evaluations <= 12);
        for (const auto& [c, rec] : res.records) CHECK(rec.uni <= res.best_record.uni + 1e-12);
    }
}

TEST_CASE("training-backed evaluator: memoized, order independent, trains from the base weights") {
    ModelConfig cfg;
    cfg.vocab_size = 99;
    cfg.embed_dim = 16;
    cfg.num_heads = 2;
    cfg.ffn_dim = 24;
    cfg.num_layers = 4;
    cfg.max_seq_len = 200;
    auto base = init_params<float>(cfg, SeededRng(3));
    Vocabulary vocab;
    SuiteSizes sizes;
    sizes.spec_train = 4;
    sizes.spec_test = 2;
    sizes.gen_kn = 2;
    sizes.gen_rs_per_task = 1;
    sizes.instruct_train = 2;
    sizes.instruct_heldout = 2;
    TaskSuite suite = generate_suite(5, sizes);

    TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.batch_size = 4;
    tcfg.peak_lr = 1e-3;
    EvalOptions eopts;
    eopts.max_new_tokens = 20;

    auto evaluator = make_training_evaluator(cfg, base, suite, vocab, tcfg, eopts, 17);

    CandidateConfig c1{1, 2, SearchModules::Ffn};
    CandidateConfig c2{2, 2, SearchModules::Mha};

    // order A
    SearchState sa(evaluator);
    EvalRecord a1 = sa.evaluate(c1, 1);
    EvalRecord a2 = sa.evaluate(c2, 1);
    // order B
    SearchState sb(evaluator);
    EvalRecord b2 = sb.evaluate(c2, 1);
    EvalRecord b1 = sb.evaluate(c1, 1);

    CHECK(a1.uni == doctest::Approx(b1.uni).epsilon(1e-12));
    CHECK(a2.uni == doctest::Approx(b2.uni).epsilon(1e-12));
    CHECK(a1.seed == b1.seed);
    CHECK(a1.seed != a2.seed);
    CHECK(a1.uni == doctest::Approx(a1.spec + a1.vers).epsilon(1e-12));

    // cache: second evaluation of c1 runs zero training steps
    const EvalRecord& cached = sa.evaluate(c1, 2);
    CHECK(cached.steps == a1.steps);
    CHECK(sa.distinct_evaluations() == 2);
}
