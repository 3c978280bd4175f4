#include "coft/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

namespace coft {

using nlohmann::json;

Vocabulary::Vocabulary() {
    std::fill(std::begin(char_to_id_), std::end(char_to_id_), -1);
    id_to_char_.assign(3, '\0'); // PAD, BOS, EOS have no surface form
    for (int c = 32; c <= 126; ++c) {
        char_to_id_[c] = int(id_to_char_.size());
        id_to_char_.push_back(char(c));
    }
    char_to_id_['\n'] = int(id_to_char_.size());
    id_to_char_.push_back('\n');
    size_ = int(id_to_char_.size());
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
        int id = char_to_id_[c];
        if (id < 0) throw UnknownSymbol("character code " + std::to_string(int(c)) + " not in vocabulary");
        ids.push_back(id);
    }
    return ids;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= size_) throw UnknownSymbol("token id " + std::to_string(id) + " out of range");
        if (id <= kEos) continue; // markers have no surface form
        out.push_back(id_to_char_[size_t(id)]);
    }
    return out;
}

std::string build_prompt(const Example& e, bool include_output) {
    std::string s =
        "Below is an instruction that describes a task. "
        "Write a response that appropriately completes the request.\n\n"
        "### Instruction:\n";
    s += e.instruction;
    s += '\n';
    if (!e.input.empty()) {
        s += e.input;
        s += '\n';
    }
    s += "\n### Response: ";
    if (include_output) s += e.output;
    return s;
}

namespace {

std::string pick(SeededRng& rng, const std::vector<std::string>& xs) {
    return xs[size_t(rng.next_u64() % xs.size())];
}

int rand_int(SeededRng& rng, int lo, int hi) { // inclusive
    return lo + int(rng.next_u64() % uint64_t(hi - lo + 1));
}


template <typename T>
void shuffle_in_place(SeededRng& rng, std::vector<T>& xs) {
    for (size_t i = xs.size(); i > 1; --i) std::swap(xs[i - 1], xs[size_t(rng.next_u64() % i)]);
}

void shuffle_string(SeededRng& rng, std::string& s) {
    for (size_t i = s.size(); i > 1; --i) std::swap(s[i - 1], s[size_t(rng.next_u64() % i)]);
}

std::string random_letters(SeededRng& rng, int n, char base) {
    std::string s;
    for (int i = 0; i < n; ++i) s.push_back(char(base + rand_int(rng, 0, 25)));
    return s;
}

std::string random_digits(SeededRng& rng, int n) {
    std::string s;
    for (int i = 0; i < n; ++i) s.push_back(char('0' + rand_int(rng, 0, 9)));
    return s;
}

constexpr int kModulus = 23;

std::string spec_instruction(int a, int b, int phrasing) {
    const std::string as = std::to_string(a), bs = std::to_string(b), ps = std::to_string(kModulus);
    switch (phrasing) {
        case 0: return "Compute (" + as + " + " + bs + ") mod " + ps + ".";
        case 1: return "What is (" + as + " + " + bs + ") mod " + ps + "?";
        case 2: return "Calculate (" + as + " + " + bs + ") modulo " + ps + ".";
        default: return "Evaluate (" + as + " + " + bs + ") mod " + ps + ".";
    }
}

std::string spec_output(int a, int b) { return "Result: " + std::to_string((a + b) % kModulus) + "."; }

} // namespace

const char* gen_rs_subtask_name(int subtask) {
    switch (subtask) {
        case 0: return "reverse";
        case 1: return "sort";
        case 2: return "max";
        case 3: return "succ";
        default: return "?";
    }
}

TaskSuite generate_suite(uint64_t seed, const SuiteSizes& sizes) {
    if (sizes.spec_train <= 0 || sizes.spec_test <= 0 || sizes.gen_kn <= 0 || sizes.gen_rs_per_task <= 0 ||
        sizes.instruct_train <= 0 || sizes.instruct_heldout <= 0)
        throw BadConfig("suite sizes must be positive");

    TaskSuite suite;
    SeededRng rng(seed, fnv1a64("task-suite"));

    // --- speciality: modular addition QA. Test items are drawn from the
    // training pairs and re-phrased, so disjointness is by surface form.
    {
        SeededRng r = rng.substream(1);
        std::set<std::pair<int, int>> used;
        std::set<std::string> train_strings;
        while (int(suite.spec_train.size()) < sizes.spec_train) {
            int a = rand_int(r, 0, kModulus - 1), b = rand_int(r, 0, kModulus - 1);
            if (!used.insert({a, b}).second) continue;
            Example e{spec_instruction(a, b, int(r.next_u64() % 2)), "", spec_output(a, b)};
            train_strings.insert(e.instruction);
            suite.spec_train.push_back(std::move(e));
        }
        std::vector<std::pair<int, int>> pairs(used.begin(), used.end());
        SeededRng r2 = rng.substream(2);
        std::set<std::string> test_strings;
        while (int(suite.spec_test.size()) < sizes.spec_test) {
            auto [a, b] = pairs[size_t(r2.next_u64() % pairs.size())];
            Example e{spec_instruction(a, b, 2 + int(r2.next_u64() % 2)), "", spec_output(a, b)};
            if (train_strings.count(e.instruction) || !test_strings.insert(e.instruction).second) continue;
            suite.spec_test.push_back(std::move(e));
        }
    }

    // --- general knowledge: random key->value codes, seen in pretraining
    {
        SeededRng r = rng.substream(3);
        std::set<std::string> keys;
        while (int(suite.gen_kn.size()) < sizes.gen_kn) {
            std::string key = random_letters(r, 3, 'A');
            if (!keys.insert(key).second) continue;
            suite.gen_kn.push_back({"Recall the code for " + key + ".", "", random_digits(r, 3) + "."});
        }
    }

    // --- generic reasoning: four multiple-choice subtasks
    {
        SeededRng r = rng.substream(4);
        for (int sub = 0; sub < 4; ++sub) {
            std::set<std::string> seen;
            int made = 0;
            while (made < sizes.gen_rs_per_task) {
                ChoiceItem item;
                item.subtask = sub;
                std::vector<std::string> opts;
                std::string correct;
                if (sub == 0) { // reverse
                    std::string s = random_letters(r, 5, 'a');
                    item.instruction = "Select the reversal of " + s + ".";
                    correct = std::string(s.rbegin(), s.rend()) + ".";
                    std::set<std::string> o{correct};
                    while (o.size() < 4) {
                        std::string p = s;
                        shuffle_string(r, p);
                        o.insert(p + ".");
                    }
                    opts.assign(o.begin(), o.end());
                } else if (sub == 1) { // ascending sort
                    std::string s = random_letters(r, 5, 'a');
                    item.instruction = "Select the ascending sort of " + s + ".";
                    std::string sorted = s;
                    std::sort(sorted.begin(), sorted.end());
                    correct = sorted + ".";
                    std::set<std::string> o{correct};
                    while (o.size() < 4) {
                        std::string p = s;
                        shuffle_string(r, p);
                        o.insert(p + ".");
                    }
                    opts.assign(o.begin(), o.end());
                } else if (sub == 2) { // max of four numbers
                    std::set<int> nums;
                    while (nums.size() < 4) nums.insert(rand_int(r, 10, 99));
                    std::vector<int> v(nums.begin(), nums.end());
                    shuffle_in_place(r, v);
                    item.instruction = "Select the largest of " + std::to_string(v[0]) + ", " + std::to_string(v[1]) +
                                       ", " + std::to_string(v[2]) + ", " + std::to_string(v[3]) + ".";
                    int mx = *std::max_element(v.begin(), v.end());
                    correct = std::to_string(mx) + ".";
                    for (int n : v) opts.push_back(std::to_string(n) + ".");
                } else { // successor letter
                    char c = char('a' + rand_int(r, 0, 24));
                    item.instruction = std::string("Select the letter after ") + c + " in the alphabet.";
                    correct = std::string(1, char(c + 1)) + ".";
                    std::set<std::string> o{correct};
                    while (o.size() < 4) o.insert(std::string(1, char('a' + rand_int(r, 0, 25))) + ".");
                    opts.assign(o.begin(), o.end());
                }
                if (!seen.insert(item.instruction).second) continue;
                shuffle_in_place(r, opts);
                item.options = opts;
                item.answer = int(std::find(opts.begin(), opts.end(), correct) - opts.begin());
                suite.gen_rs.push_back(std::move(item));
                ++made;
            }
        }
    }

    // --- instruction following: simple generic patterns; the held-out
    // split shares the distribution but not the instances
    {
        SeededRng r = rng.substream(5);
        std::set<std::string> seen;
        auto make_one = [&](std::vector<Example>& dst) {
            while (true) {
                Example e;
                switch (int(r.next_u64() % 4)) {
                    case 0: {
                        std::string w = random_letters(r, 4, 'a');
                        e = {"Repeat the word " + w + " twice.", "", w + " " + w + "."};
                        break;
                    }
                    case 1: {
                        std::string w = random_letters(r, 4, 'a');
                        std::string spelled;
                        for (size_t i = 0; i < w.size(); ++i) {
                            if (i) spelled += ' ';
                            spelled += w[i];
                        }
                        e = {"Spell the word " + w + ".", "", spelled + "."};
                        break;
                    }
                    case 2: {
                        std::string s = random_letters(r, 6, 'a');
                        e = {"Echo the text.", s, s + "."};
                        break;
                    }
                    default: {
                        std::string w = random_letters(r, rand_int(r, 3, 6), 'a');
                        e = {"Count the letters in " + w + ".", "", std::to_string(w.size()) + "."};
                        break;
                    }
                }
                if (!seen.insert(e.instruction + "|" + e.input).second) continue;
                dst.push_back(std::move(e));
                return;
            }
        };
        for (int i = 0; i < sizes.instruct_train; ++i) make_one(suite.instruct_train);
        for (int i = 0; i < sizes.instruct_heldout; ++i) make_one(suite.instruct_heldout);
    }

    // --- pretraining mixture: versatility data only
    suite.pretrain_mixture = suite.gen_kn;
    for (const auto& c : suite.gen_rs)
        suite.pretrain_mixture.push_back({c.instruction, c.input, c.options[size_t(c.answer)]});
    for (const auto& e : suite.instruct_train) suite.pretrain_mixture.push_back(e);
    {
        SeededRng r = rng.substream(6);
        shuffle_in_place(r, suite.pretrain_mixture);
    }
    return suite;
}

namespace {

json example_to_json(const Example& e) {
    return json{{"instruction", e.instruction}, {"input", e.input}, {"output", e.output}};
}

Example example_from_json(const json& j) {
    return Example{j.at("instruction").get<std::string>(), j.at("input").get<std::string>(),
                   j.at("output").get<std::string>()};
}

} // namespace

void save_examples_jsonl(const std::string& path, const std::vector<Example>& xs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (const auto& e : xs) out << example_to_json(e).dump() << "\n";
}

std::vector<Example> load_examples_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<Example> xs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        xs.push_back(example_from_json(json::parse(line)));
    }
    return xs;
}

void save_choices_jsonl(const std::string& path, const std::vector<ChoiceItem>& xs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (const auto& c : xs) {
        json j{{"instruction", c.instruction}, {"input", c.input},      {"output", c.options[size_t(c.answer)]},
               {"options", c.options},         {"answer", c.answer},    {"subtask", c.subtask}};
        out << j.dump() << "\n";
    }
}

std::vector<ChoiceItem> load_choices_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<ChoiceItem> xs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        ChoiceItem c;
        c.instruction = j.at("instruction").get<std::string>();
        c.input = j.at("input").get<std::string>();
        c.options = j.at("options").get<std::vector<std::string>>();
        c.answer = j.at("answer").get<int>();
        c.subtask = j.at("subtask").get<int>();
        xs.push_back(std::move(c));
    }
    return xs;
}

void save_suite(const std::string& dir, const TaskSuite& suite) {
    std::filesystem::create_directories(dir);
    auto p = [&](const char* f) { return (std::filesystem::path(dir) / f).string(); };
    save_examples_jsonl(p("speciality_train.jsonl"), suite.spec_train);
    save_examples_jsonl(p("speciality_test.jsonl"), suite.spec_test);
    save_examples_jsonl(p("gen_kn.jsonl"), suite.gen_kn);
    save_choices_jsonl(p("gen_rs.jsonl"), suite.gen_rs);
    save_examples_jsonl(p("instruct_train.jsonl"), suite.instruct_train);
    save_examples_jsonl(p("instruct_heldout.jsonl"), suite.instruct_heldout);
    save_examples_jsonl(p("pretrain_mixture.jsonl"), suite.pretrain_mixture);
}

TaskSuite load_suite(const std::string& dir) {
    auto p = [&](const char* f) { return (std::filesystem::path(dir) / f).string(); };
    TaskSuite s;
    s.spec_train = load_examples_jsonl(p("speciality_train.jsonl"));
    s.spec_test = load_examples_jsonl(p("speciality_test.jsonl"));
    s.gen_kn = load_examples_jsonl(p("gen_kn.jsonl"));
    s.gen_rs = load_choices_jsonl(p("gen_rs.jsonl"));
    s.instruct_train = load_examples_jsonl(p("instruct_train.jsonl"));
    s.instruct_heldout = load_examples_jsonl(p("instruct_heldout.jsonl"));
    s.pretrain_mixture = load_examples_jsonl(p("pretrain_mixture.jsonl"));
    return s;
}

} // namespace coft
