#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rba/tensor.hpp"

namespace rba {

// Desk-scale synthetic classification tasks over an integer vocabulary.
// Every label is recomputable from the tokens alone, so the stored label is
// never the only source of truth.
//
//   seq_len_bucket     - label = equal-width length bucket
//   word_content       - exactly one tracked token (ids 0..classes-1) appears;
//                        label = its id
//   bigram_shift       - sequences are non-decreasing by construction; class 1
//                        swaps one differing adjacent pair, creating a descent
//   token_count_parity - label = parity of the number of occurrences of
//                        token 0

enum class TaskKind {
  kSeqLenBucket,
  kWordContent,
  kBigramShift,
  kTokenCountParity,
};

TaskKind task_kind_from_string(const std::string& name);
std::string to_string(TaskKind kind);

struct TaskSpec {
  TaskKind kind = TaskKind::kBigramShift;
  int vocab_size = 64;
  int min_len = 4;
  int max_len = 16;
  int classes = 2;
  int train_size = 10000;
  int valid_size = 1000;
  int test_size = 1000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Example {
  std::vector<int> tokens;
  int label = 0;
};

struct DatasetSplits {
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
};

// Pure function of the spec: same spec, same splits, bit for bit. Splits are
// disjoint (duplicate token sequences are rejected during sampling) and each
// split is class-balanced within one example.
DatasetSplits generate(const TaskSpec& spec);

// Recomputes the ground-truth label from the tokens.
int label_oracle(const TaskSpec& spec, const std::vector<int>& tokens);

// One example per line: "label<TAB>space-separated token ids", LF endings.
void save_examples(const std::filesystem::path& path,
                   const std::vector<Example>& examples);
std::vector<Example> load_examples(const std::filesystem::path& path);

}  // namespace rba
