#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace chg {

// Closed symbol table shared by every task. Answers are single tokens.
namespace vocab {
inline constexpr int kBos = 0;
inline constexpr int kSep = 1;
inline constexpr int kQ = 2;
inline constexpr int kA = 3;
inline constexpr int kInstr = 4;
inline constexpr int kInstrEnd = 5;
inline constexpr int kTask0 = 6;  // kTask0 + mapping_id, six of them
inline constexpr int kCaret = 12;
inline constexpr int kFirstWord = 16;
inline constexpr int kNumWords = 48;
inline constexpr int kSize = kFirstWord + kNumWords;  // 64

// Word tokens w00..w47 are kFirstWord + i.
constexpr int word(int i) { return kFirstWord + i; }

// Key/value mappings act on the first kKvDomain words. The first kKvAnchors
// of those are mapped identically by every mapping, so an example built on an
// anchor carries no information about which mapping is in force.
inline constexpr int kKvDomain = 24;
inline constexpr int kKvAnchors = 4;
inline constexpr int kNumMappings = 6;

std::string token_name(int id);
// Two-column "id<TAB>name" listing of every token.
std::string symbol_table_text();
}  // namespace vocab

enum class PromptFormat { icl, instruction };

std::string_view format_name(PromptFormat f);

struct Example {
  std::vector<int> tokens;                // prompt followed by the answer
  std::vector<std::uint8_t> target_mask;  // 1 on answer positions (a contiguous suffix)
  std::vector<int> answer;                // tokens under the mask

  std::size_t prompt_length() const { return tokens.size() - answer.size(); }
};

struct TaskBatch {
  std::string task_name;
  PromptFormat format = PromptFormat::icl;
  std::uint64_t seed = 0;
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
};

struct PromptPair {
  std::vector<int> clean;    // prompt only, answer excluded
  std::vector<int> corrupt;  // same length as clean
  int answer = 0;
  std::vector<std::size_t> differing_positions;
};

enum class SymbolicRule { aba, abb };

// Fixed mapping table: mapping(id, word index) for word index in
// [0, kKvDomain). Bijective on the domain.
int kv_map(int mapping_id, int word_index);
// Token-level: returns the token the mapping sends `token` to.
int kv_map_token(int mapping_id, int token);

TaskBatch gen_induction(std::uint64_t seed, std::size_t n, int vocab_words, std::size_t seq_len);
TaskBatch gen_symbolic(std::uint64_t seed, std::size_t n, SymbolicRule rule, int vocab_words);
TaskBatch gen_kv_icl(std::uint64_t seed, std::size_t n, int mapping_id, std::size_t k_shots = 10);
TaskBatch gen_instruction_variant(std::uint64_t seed, std::size_t n, int mapping_id);

// Positions of in-context answers (tokens following an A: marker before the
// query) for an ICL example.
std::vector<std::size_t> icl_answer_positions(const Example& ex);

std::vector<PromptPair> corrupt_shuffle(const TaskBatch& batch, std::uint64_t seed);

// Concatenates batches; the result keeps the first batch's name and format
// unless `name` is given.
TaskBatch concat_batches(const std::vector<TaskBatch>& parts, std::string name = {});

// One JSON object per line: {"tokens":[...],"mask":[...],"answer":[...]}.
std::string export_batch_jsonl(const TaskBatch& batch);

// Named task specs used by the CLI and the experiment drivers:
//   induction | aba | abb | kv-icl:<id> | kv-instr:<id> | kv-icl | kv-instr
// The bare kv forms cycle over all six mappings.
TaskBatch make_task(std::string_view spec, std::uint64_t seed, std::size_t n);

}  // namespace chg
