#pragma once

#include <string>
#include <vector>

#include "coft/common.hpp"

namespace coft {

// Character-level vocabulary: three reserved markers followed by printable
// ASCII. Fixed ids: PAD=0, BOS=1, EOS=2.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;

    Vocabulary();
    int size() const { return size_; }
    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<int>& ids) const;

private:
    int char_to_id_[256];
    std::string id_to_char_;
    int size_;
};

struct Example {
    std::string instruction;
    std::string input;
    std::string output;
};

// Multiple-choice item: exactly four candidate answers, one correct.
struct ChoiceItem {
    std::string instruction;
    std::string input;
    std::vector<std::string> options;
    int answer = 0;
    int subtask = 0; // 0..3
};

struct SuiteSizes {
    int spec_train = 96;
    int spec_test = 24;
    int gen_kn = 24;
    int gen_rs_per_task = 8; // four subtasks
    int instruct_train = 32;
    int instruct_heldout = 16;
};

struct TaskSuite {
    std::vector<Example> spec_train;
    std::vector<Example> spec_test;
    std::vector<Example> gen_kn;          // fact recall, included in pretraining
    std::vector<ChoiceItem> gen_rs;       // four subtasks interleaved
    std::vector<Example> instruct_train;  // included in pretraining
    std::vector<Example> instruct_heldout;
    std::vector<Example> pretrain_mixture;
};

// Exact instruction template; include_output appends the response text so
// that the string without output is a strict prefix.
std::string build_prompt(const Example& e, bool include_output);

TaskSuite generate_suite(uint64_t seed, const SuiteSizes& sizes);

// 0..3 subtask names for reports
const char* gen_rs_subtask_name(int subtask);

// JSON-lines persistence (one object per line, UTF-8)
void save_examples_jsonl(const std::string& path, const std::vector<Example>& xs);
std::vector<Example> load_examples_jsonl(const std::string& path);
void save_choices_jsonl(const std::string& path, const std::vector<ChoiceItem>& xs);
std::vector<ChoiceItem> load_choices_jsonl(const std::string& path);

void save_suite(const std::string& dir, const TaskSuite& suite);
TaskSuite load_suite(const std::string& dir);

} // namespace coft
