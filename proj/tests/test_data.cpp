#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <regex>
#include <set>

#include "coft/data.hpp"

using namespace coft;

TEST_CASE("prompt template is exact") {
    Example e{"I", "", "O"};
    std::string with = build_prompt(e, true);
    std::string without = build_prompt(e, false);

    std::string expected =
        "Below is an instruction that describes a task. "
        "Write a response that appropriately completes the request.\n\n"
        "### Instruction:\nI\n\n### Response: O";
    CHECK(with == expected);
    CHECK(without == expected.substr(0, expected.size() - 1));
    CHECK(with.substr(0, without.size()) == without);
    CHECK(build_prompt(e, true) == with); // byte-identical across calls

    Example e2{"Do it", "payload", "ok"};
    std::string s2 = build_prompt(e2, true);
    CHECK(s2.find("### Instruction:\nDo it\npayload\n\n### Response: ok") != std::string::npos);
}

TEST_CASE("tokenizer round trip") {
    Vocabulary vocab;
    CHECK(vocab.size() <= 128);
    CHECK(vocab.tokenize("").empty());

    std::string s = "Hello, world! (3 + 9) mod 23?\n### Response: ok";
    CHECK(vocab.detokenize(vocab.tokenize(s)) == s);

    SeededRng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::string fuzz;
        int len = int(rng.next_u64() % 40);
        for (int i = 0; i < len; ++i) fuzz.push_back(char(32 + rng.next_u64() % 95));
        CHECK(vocab.detokenize(vocab.tokenize(fuzz)) == fuzz);
    }

    CHECK_THROWS_AS(vocab.tokenize(std::string(1, char(7))), UnknownSymbol);
}

namespace {

// independent solver for speciality items
bool check_mod_answer(const Example& e) {
    static const std::regex pat(R"(\((\d+) \+ (\d+)\) (?:mod|modulo) (\d+))");
    std::smatch m;
    if (!std::regex_search(e.instruction, m, pat)) return false;
    const int a = std::stoi(m[1]), b = std::stoi(m[2]), p = std::stoi(m[3]);
    return e.output == "Result: " + std::to_string((a + b) % p) + ".";
}

// independent solver for the four reasoning subtasks
std::string solve_choice(const ChoiceItem& c) {
    std::smatch m;
    static const std::regex rev(R"(reversal of ([a-z]+)\.)");
    static const std::regex srt(R"(ascending sort of ([a-z]+)\.)");
    static const std::regex mx(R"(largest of (\d+), (\d+), (\d+), (\d+)\.)");
    static const std::regex succ(R"(letter after ([a-z]) in the alphabet\.)");
    if (std::regex_search(c.instruction, m, rev)) {
        std::string s = m[1];
        return std::string(s.rbegin(), s.rend()) + ".";
    }
    if (std::regex_search(c.instruction, m, srt)) {
        std::string s = m[1];
        std::sort(s.begin(), s.end());
        return s + ".";
    }
    if (std::regex_search(c.instruction, m, mx)) {
        int best = 0;
        for (int i = 1; i <= 4; ++i) best = std::max(best, std::stoi(m[size_t(i)]));
        return std::to_string(best) + ".";
    }
    if (std::regex_search(c.instruction, m, succ)) {
        char ch = m[1].str()[0];
        return std::string(1, char(ch + 1)) + ".";
    }
    return "";
}

} // namespace

TEST_CASE("suite generation: determinism, disjointness, verified answers") {
    SuiteSizes sizes;
    TaskSuite a = generate_suite(11, sizes);
    TaskSuite b = generate_suite(11, sizes);
    CHECK(a.spec_train.size() == size_t(sizes.spec_train));
    CHECK(a.spec_test.size() == size_t(sizes.spec_test));
    CHECK(a.gen_kn.size() == size_t(sizes.gen_kn));
    CHECK(a.gen_rs.size() == size_t(4 * sizes.gen_rs_per_task));
    CHECK(a.instruct_heldout.size() == size_t(sizes.instruct_heldout));

    auto key = [](const Example& e) { return e.instruction + "|" + e.input + "|" + e.output; };
    for (size_t i = 0; i < a.spec_train.size(); ++i) CHECK(key(a.spec_train[i]) == key(b.spec_train[i]));
    for (size_t i = 0; i < a.gen_rs.size(); ++i) CHECK(a.gen_rs[i].instruction == b.gen_rs[i].instruction);

    TaskSuite c = generate_suite(12, sizes);
    bool differs = false;
    for (size_t i = 0; i < a.spec_train.size(); ++i) differs = differs || key(a.spec_train[i]) != key(c.spec_train[i]);
    CHECK(differs);

    std::set<std::string> train_set;
    for (const auto& e : a.spec_train) train_set.insert(key(e));
    for (const auto& e : a.spec_test) CHECK(train_set.count(key(e)) == 0);

    for (const auto& e : a.spec_train) CHECK(check_mod_answer(e));
    for (const auto& e : a.spec_test) CHECK(check_mod_answer(e));

    for (const auto& item : a.gen_rs) {
        CHECK(item.options.size() == 4);
        const std::string solved = solve_choice(item);
        REQUIRE(!solved.empty());
        CHECK(item.options[size_t(item.answer)] == solved);
        CHECK(std::count(item.options.begin(), item.options.end(), solved) == 1);
    }

    // pretrain mixture covers exactly the versatility data
    CHECK(a.pretrain_mixture.size() == a.gen_kn.size() + a.gen_rs.size() + a.instruct_train.size());
}

TEST_CASE("jsonl round trip") {
    SuiteSizes sizes;
    sizes.spec_train = 6;
    sizes.spec_test = 3;
    sizes.gen_kn = 4;
    sizes.gen_rs_per_task = 2;
    sizes.instruct_train = 4;
    sizes.instruct_heldout = 2;
    TaskSuite s = generate_suite(3, sizes);

    auto dir = std::filesystem::temp_directory_path() / "coft_data_test";
    std::filesystem::remove_all(dir);
    save_suite(dir.string(), s);
    TaskSuite r = load_suite(dir.string());

    REQUIRE(r.spec_train.size() == s.spec_train.size());
    for (size_t i = 0; i < s.spec_train.size(); ++i) {
        CHECK(r.spec_train[i].instruction == s.spec_train[i].instruction);
        CHECK(r.spec_train[i].output == s.spec_train[i].output);
    }
    REQUIRE(r.gen_rs.size() == s.gen_rs.size());
    for (size_t i = 0; i < s.gen_rs.size(); ++i) {
        CHECK(r.gen_rs[i].options == s.gen_rs[i].options);
        CHECK(r.gen_rs[i].answer == s.gen_rs[i].answer);
        CHECK(r.gen_rs[i].subtask == s.gen_rs[i].subtask);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("vocabulary covers every suite string") {
    Vocabulary vocab;
    TaskSuite s = generate_suite(21, SuiteSizes{});
    auto check_text = [&](const std::string& text) {
        CHECK(vocab.detokenize(vocab.tokenize(text)) == text);
    };
    for (const auto& e : s.spec_train) check_text(build_prompt(e, true));
    for (const auto& e : s.spec_test) check_text(build_prompt(e, true));
    for (const auto& e : s.pretrain_mixture) check_text(build_prompt(e, true));
    for (const auto& c : s.gen_rs)
        for (const auto& o : c.options) check_text(o);
}
