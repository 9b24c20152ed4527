#include "rba/synth_tasks.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace rba {

namespace {

std::string sequence_key(const std::vector<int>& tokens) {
  std::string key;
  key.reserve(tokens.size() * 3);
  for (int t : tokens) {
    key += std::to_string(t);
    key += ',';
  }
  return key;
}

int length_bucket(const TaskSpec& spec, int length) {
  const int span = spec.max_len - spec.min_len + 1;
  const int bucket = (length - spec.min_len) * spec.classes / span;
  return std::min(bucket, spec.classes - 1);
}

int draw_length(const TaskSpec& spec, Rng& rng) {
  std::uniform_int_distribution<int> dist(spec.min_len, spec.max_len);
  return dist(rng);
}

}  // namespace

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "seq_len_bucket") return TaskKind::kSeqLenBucket;
  if (name == "word_content") return TaskKind::kWordContent;
  if (name == "bigram_shift") return TaskKind::kBigramShift;
  if (name == "token_count_parity") return TaskKind::kTokenCountParity;
  throw ConfigError("unknown task kind '" + name + "'");
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kSeqLenBucket: return "seq_len_bucket";
    case TaskKind::kWordContent: return "word_content";
    case TaskKind::kBigramShift: return "bigram_shift";
    case TaskKind::kTokenCountParity: return "token_count_parity";
  }
  throw ConfigError("unknown task kind value");
}

void TaskSpec::validate() const {
  if (vocab_size < 2) throw ConfigError("task: vocabulary must have >= 2 tokens");
  if (min_len < 1 || max_len < min_len) {
    throw ConfigError("task: invalid length range [" + std::to_string(min_len) +
                      ", " + std::to_string(max_len) + "]");
  }
  if (classes < 2) throw ConfigError("task: need at least two classes");
  if (train_size < 1 || valid_size < 1 || test_size < 1) {
    throw ConfigError("task: split sizes must be positive");
  }
  switch (kind) {
    case TaskKind::kSeqLenBucket:
      if (classes > max_len - min_len + 1) {
        throw ConfigError("task: more classes (" + std::to_string(classes) +
                          ") than distinct lengths (" +
                          std::to_string(max_len - min_len + 1) + ")");
      }
      break;
    case TaskKind::kWordContent:
      if (classes >= vocab_size) {
        throw ConfigError("task: word_content needs classes < vocab so filler "
                          "tokens exist");
      }
      break;
    case TaskKind::kBigramShift:
      if (classes != 2) throw ConfigError("task: bigram_shift is binary");
      if (min_len < 2) throw ConfigError("task: bigram_shift needs length >= 2");
      break;
    case TaskKind::kTokenCountParity:
      if (classes != 2) throw ConfigError("task: token_count_parity is binary");
      break;
  }
}

int label_oracle(const TaskSpec& spec, const std::vector<int>& tokens) {
  switch (spec.kind) {
    case TaskKind::kSeqLenBucket:
      return length_bucket(spec, static_cast<int>(tokens.size()));
    case TaskKind::kWordContent: {
      int found = -1;
      for (int t : tokens) {
        if (t < spec.classes) {
          if (found >= 0) {
            throw DataError("word_content: multiple tracked tokens in sequence");
          }
          found = t;
        }
      }
      if (found < 0) throw DataError("word_content: no tracked token in sequence");
      return found;
    }
    case TaskKind::kBigramShift:
      for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        if (tokens[i] > tokens[i + 1]) return 1;
      }
      return 0;
    case TaskKind::kTokenCountParity: {
      int count = 0;
      for (int t : tokens) count += (t == 0) ? 1 : 0;
      return count % 2;
    }
  }
  throw ConfigError("unknown task kind value");
}

namespace {

std::vector<int> sample_tokens(const TaskSpec& spec, int label, Rng& rng) {
  std::uniform_int_distribution<int> any_token(0, spec.vocab_size - 1);
  switch (spec.kind) {
    case TaskKind::kSeqLenBucket: {
      // uniform length within the requested bucket
      std::vector<int> lengths;
      for (int len = spec.min_len; len <= spec.max_len; ++len) {
        if (length_bucket(spec, len) == label) lengths.push_back(len);
      }
      std::uniform_int_distribution<std::size_t> pick(0, lengths.size() - 1);
      std::vector<int> tokens(static_cast<std::size_t>(lengths[pick(rng)]));
      for (int& t : tokens) t = any_token(rng);
      return tokens;
    }
    case TaskKind::kWordContent: {
      std::uniform_int_distribution<int> filler(spec.classes, spec.vocab_size - 1);
      std::vector<int> tokens(static_cast<std::size_t>(draw_length(spec, rng)));
      for (int& t : tokens) t = filler(rng);
      std::uniform_int_distribution<std::size_t> pos(0, tokens.size() - 1);
      tokens[pos(rng)] = label;
      return tokens;
    }
    case TaskKind::kBigramShift: {
      while (true) {
        std::vector<int> tokens(static_cast<std::size_t>(draw_length(spec, rng)));
        for (int& t : tokens) t = any_token(rng);
        std::sort(tokens.begin(), tokens.end());
        if (label == 0) return tokens;
        std::vector<std::size_t> spots;
        for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
          if (tokens[i] != tokens[i + 1]) spots.push_back(i);
        }
        if (spots.empty()) continue;  // all tokens equal, cannot shift
        std::uniform_int_distribution<std::size_t> pick(0, spots.size() - 1);
        const std::size_t i = spots[pick(rng)];
        std::swap(tokens[i], tokens[i + 1]);
        return tokens;
      }
    }
    case TaskKind::kTokenCountParity: {
      std::vector<int> tokens(static_cast<std::size_t>(draw_length(spec, rng)));
      for (int& t : tokens) t = any_token(rng);
      int count = 0;
      for (int t : tokens) count += (t == 0) ? 1 : 0;
      if (count % 2 != label) {
        std::uniform_int_distribution<std::size_t> pos(0, tokens.size() - 1);
        std::uniform_int_distribution<int> nonzero(1, spec.vocab_size - 1);
        const std::size_t p = pos(rng);
        tokens[p] = tokens[p] == 0 ? nonzero(rng) : 0;
      }
      return tokens;
    }
  }
  throw ConfigError("unknown task kind value");
}

std::vector<Example> sample_split(const TaskSpec& spec, int size, Rng& rng,
                                  std::unordered_set<std::string>& seen) {
  std::vector<Example> examples;
  examples.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) {
    const int label = i % spec.classes;  // balanced within one example
    int attempts = 0;
    while (true) {
      if (++attempts > 100000) {
        throw ConfigError("task: cannot draw enough distinct examples; "
                          "shrink the splits or widen the task");
      }
      std::vector<int> tokens = sample_tokens(spec, label, rng);
      if (!seen.insert(sequence_key(tokens)).second) continue;
      examples.push_back(Example{std::move(tokens), label});
      break;
    }
  }
  return examples;
}

}  // namespace

DatasetSplits generate(const TaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::unordered_set<std::string> seen;  // shared, so splits stay disjoint
  DatasetSplits splits;
  splits.train = sample_split(spec, spec.train_size, rng, seen);
  splits.valid = sample_split(spec, spec.valid_size, rng, seen);
  splits.test = sample_split(spec, spec.test_size, rng, seen);
  return splits;
}

void save_examples(const std::filesystem::path& path,
                   const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  for (const Example& e : examples) {
    out << e.label << '\t';
    for (std::size_t i = 0; i < e.tokens.size(); ++i) {
      if (i) out << ' ';
      out << e.tokens[i];
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<Example> load_examples(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Example> examples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": missing tab separator");
    }
    Example e;
    try {
      e.label = std::stoi(line.substr(0, tab));
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": bad label");
    }
    std::istringstream rest(line.substr(tab + 1));
    int token;
    while (rest >> token) e.tokens.push_back(token);
    if (!rest.eof()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": bad token id");
    }
    if (e.tokens.empty()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": empty token list");
    }
    examples.push_back(std::move(e));
  }
  return examples;
}

}  // namespace rba
