#include "chg/tasks.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>

#include "chg/errors.hpp"
#include "chg/rng.hpp"
#include "json.hpp"

namespace chg {

namespace vocab {

std::string token_name(int id) {
  switch (id) {
    case kBos: return "<bos>";
    case kSep: return "<sep>";
    case kQ: return "Q:";
    case kA: return "A:";
    case kInstr: return "<instr>";
    case kInstrEnd: return "</instr>";
    case kCaret: return "^";
    default: break;
  }
  if (id >= kTask0 && id < kTask0 + kNumMappings) return "<task" + std::to_string(id - kTask0) + ">";
  if (id >= kFirstWord && id < kSize) {
    const int w = id - kFirstWord;
    return std::string("w") + static_cast<char>('0' + w / 10) + static_cast<char>('0' + w % 10);
  }
  if (id >= 0 && id < kSize) return "<reserved" + std::to_string(id) + ">";
  throw VocabularyError("token id " + std::to_string(id) + " outside the symbol table");
}

std::string symbol_table_text() {
  std::string out;
  for (int id = 0; id < kSize; ++id) out += std::to_string(id) + "\t" + token_name(id) + "\n";
  return out;
}

}  // namespace vocab

std::string_view format_name(PromptFormat f) { return f == PromptFormat::icl ? "icl" : "instruction"; }

// ---- mapping table --------------------------------------------------------------

namespace {

constexpr int kFree = vocab::kKvDomain - vocab::kKvAnchors;  // non-anchor words

// Rows of a shuffled cyclic Latin square: for a fixed word, the six mappings
// send it to six different words.
struct MappingTable {
  std::array<std::array<int, vocab::kKvDomain>, vocab::kNumMappings> image{};

  MappingTable() {
    Rng rng(0x6b765f6d6170ULL);
    std::array<int, kFree> col{}, sym{}, row{};
    std::iota(col.begin(), col.end(), 0);
    std::iota(sym.begin(), sym.end(), 0);
    std::iota(row.begin(), row.end(), 0);
    rng.shuffle(col.begin(), col.end());
    rng.shuffle(sym.begin(), sym.end());
    rng.shuffle(row.begin(), row.end());
    for (int m = 0; m < vocab::kNumMappings; ++m) {
      for (int a = 0; a < vocab::kKvAnchors; ++a) image[m][a] = (a + 1) % vocab::kKvAnchors;
      for (int j = 0; j < kFree; ++j)
        image[m][vocab::kKvAnchors + j] = vocab::kKvAnchors + sym[(row[m] + col[j]) % kFree];
    }
  }
};

const MappingTable& mapping_table() {
  static const MappingTable table;
  return table;
}

void check_mapping(int mapping_id) {
  if (mapping_id < 0 || mapping_id >= vocab::kNumMappings)
    throw ConfigError("unknown mapping_id " + std::to_string(mapping_id) + " (expected 0.." +
                      std::to_string(vocab::kNumMappings - 1) + ")");
}

Example finish_example(std::vector<int> prompt, int answer) {
  Example ex;
  ex.tokens = std::move(prompt);
  ex.tokens.push_back(answer);
  ex.target_mask.assign(ex.tokens.size(), 0);
  ex.target_mask.back() = 1;
  ex.answer = {answer};
  return ex;
}

// Query words for a kv batch. Shared by the ICL and instruction generators so
// matched seeds give matched (query, answer) pairs.
std::vector<int> draw_queries(std::uint64_t seed, std::size_t n) {
  Rng rng(derive_seed(seed, "query"));
  std::vector<int> q(n);
  for (auto& w : q) w = vocab::kKvAnchors + static_cast<int>(rng.uniform_index(kFree));
  return q;
}

}  // namespace

int kv_map(int mapping_id, int word_index) {
  check_mapping(mapping_id);
  if (word_index < 0 || word_index >= vocab::kKvDomain)
    throw VocabularyError("word index " + std::to_string(word_index) + " outside the mapping domain");
  return mapping_table().image[mapping_id][word_index];
}

int kv_map_token(int mapping_id, int token) {
  return vocab::word(kv_map(mapping_id, token - vocab::kFirstWord));
}

// ---- generators -------------------------------------------------------------------

TaskBatch gen_induction(std::uint64_t seed, std::size_t n, int vocab_words, std::size_t seq_len) {
  if (seq_len < 8) throw GenerationError("induction: seq_len must be at least 8, got " + std::to_string(seq_len));
  if (vocab_words < 4 || vocab_words > vocab::kNumWords)
    throw GenerationError("induction: need between 4 and " + std::to_string(vocab::kNumWords) +
                          " word tokens, got " + std::to_string(vocab_words));
  Rng rng(derive_seed(seed, "induction"));
  TaskBatch batch{"induction", PromptFormat::icl, seed, {}};
  batch.examples.reserve(n);
  // Layout: <bos> filler... q b filler... q | b
  const std::size_t prompt_len = seq_len - 1;
  for (std::size_t e = 0; e < n; ++e) {
    const int q = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(vocab_words)));
    int b = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(vocab_words - 1)));
    if (b >= q) ++b;
    std::vector<int> prompt(prompt_len);
    prompt[0] = vocab::kBos;
    for (std::size_t i = 1; i + 1 < prompt_len; ++i) {
      int f = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(vocab_words - 1)));
      if (f >= q) ++f;
      prompt[i] = vocab::word(f);
    }
    // First occurrence somewhere in [1, prompt_len - 3] so its successor sits
    // before the final query.
    const auto p = 1 + rng.uniform_index(prompt_len - 3);
    prompt[p] = vocab::word(q);
    prompt[p + 1] = vocab::word(b);
    prompt[prompt_len - 1] = vocab::word(q);
    batch.examples.push_back(finish_example(std::move(prompt), vocab::word(b)));
  }
  return batch;
}

TaskBatch gen_symbolic(std::uint64_t seed, std::size_t n, SymbolicRule rule, int vocab_words) {
  if (vocab_words < 6 || vocab_words > vocab::kNumWords)
    throw GenerationError("symbolic: need between 6 and " + std::to_string(vocab::kNumWords) +
                          " word tokens, got " + std::to_string(vocab_words));
  Rng rng(derive_seed(seed, rule == SymbolicRule::aba ? "symbolic-aba" : "symbolic-abb"));
  TaskBatch batch{rule == SymbolicRule::aba ? "symbolic-aba" : "symbolic-abb", PromptFormat::icl, seed, {}};
  batch.examples.reserve(n);
  for (std::size_t e = 0; e < n; ++e) {
    std::array<int, 6> w{};
    // Fresh tokens for every slot; any collision regenerates the draw.
    for (;;) {
      for (auto& x : w) x = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(vocab_words)));
      auto sorted = w;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end()) break;
    }
    std::vector<int> prompt{vocab::kBos};
    for (int t = 0; t < 3; ++t) {
      const int a = vocab::word(w[2 * t]), b = vocab::word(w[2 * t + 1]);
      prompt.insert(prompt.end(), {a, vocab::kCaret, b, vocab::kCaret});
      if (t < 2) prompt.insert(prompt.end(), {rule == SymbolicRule::aba ? a : b, vocab::kSep});
    }
    const int answer = vocab::word(rule == SymbolicRule::aba ? w[4] : w[5]);
    batch.examples.push_back(finish_example(std::move(prompt), answer));
  }
  return batch;
}

TaskBatch gen_kv_icl(std::uint64_t seed, std::size_t n, int mapping_id, std::size_t k_shots) {
  check_mapping(mapping_id);
  if (k_shots > static_cast<std::size_t>(kFree - 1))
    throw GenerationError("kv-icl: at most " + std::to_string(kFree - 1) + " shots fit the mapping domain");
  const auto queries = draw_queries(seed, n);
  Rng rng(derive_seed(seed, "context"));
  TaskBatch batch{"kv-icl:" + std::to_string(mapping_id), PromptFormat::icl, seed, {}};
  batch.examples.reserve(n);
  for (std::size_t e = 0; e < n; ++e) {
    const int q = queries[e];
    std::vector<int> pool;
    for (int j = vocab::kKvAnchors; j < vocab::kKvDomain; ++j)
      if (j != q) pool.push_back(j);
    // Partial Fisher-Yates: the first k entries are the shots.
    for (std::size_t i = 0; i < k_shots; ++i) {
      const auto j = i + rng.uniform_index(pool.size() - i);
      std::swap(pool[i], pool[j]);
    }
    std::vector<int> prompt{vocab::kBos};
    for (std::size_t i = 0; i < k_shots; ++i)
      prompt.insert(prompt.end(),
                    {vocab::kQ, vocab::word(pool[i]), vocab::kA, vocab::word(kv_map(mapping_id, pool[i]))});
    prompt.insert(prompt.end(), {vocab::kQ, vocab::word(q), vocab::kA});
    batch.examples.push_back(finish_example(std::move(prompt), vocab::word(kv_map(mapping_id, q))));
  }
  return batch;
}

TaskBatch gen_instruction_variant(std::uint64_t seed, std::size_t n, int mapping_id) {
  check_mapping(mapping_id);
  const auto queries = draw_queries(seed, n);
  Rng rng(derive_seed(seed, "context"));
  TaskBatch batch{"kv-instr:" + std::to_string(mapping_id), PromptFormat::instruction, seed, {}};
  batch.examples.reserve(n);
  for (std::size_t e = 0; e < n; ++e) {
    const int q = queries[e];
    const int anchor = static_cast<int>(rng.uniform_index(vocab::kKvAnchors));
    std::vector<int> prompt{vocab::kBos, vocab::kInstr, vocab::kTask0 + mapping_id, vocab::kInstrEnd};
    prompt.insert(prompt.end(),
                  {vocab::kQ, vocab::word(anchor), vocab::kA, vocab::word(kv_map(mapping_id, anchor))});
    prompt.insert(prompt.end(), {vocab::kQ, vocab::word(q), vocab::kA});
    batch.examples.push_back(finish_example(std::move(prompt), vocab::word(kv_map(mapping_id, q))));
  }
  return batch;
}

// ---- corruption ---------------------------------------------------------------------

std::vector<std::size_t> icl_answer_positions(const Example& ex) {
  std::vector<std::size_t> pos;
  const auto plen = ex.prompt_length();
  for (std::size_t i = 1; i < plen; ++i)
    if (ex.tokens[i - 1] == vocab::kA) pos.push_back(i);
  return pos;
}

std::vector<PromptPair> corrupt_shuffle(const TaskBatch& batch, std::uint64_t seed) {
  if (batch.format != PromptFormat::icl)
    throw CorruptionError("corrupt_shuffle: batch '" + batch.task_name + "' is not in ICL format");
  Rng rng(derive_seed(seed, "shuffle"));
  std::vector<PromptPair> pairs;
  pairs.reserve(batch.size());
  for (const auto& ex : batch.examples) {
    if (ex.answer.size() != 1) throw CorruptionError("corrupt_shuffle: multi-token answers are not supported");
    const auto pos = icl_answer_positions(ex);
    const auto k = pos.size();
    if (k < 2) throw CorruptionError("corrupt_shuffle: need at least 2 in-context examples, got " + std::to_string(k));
    std::vector<std::size_t> perm(k);
    // Uniform derangement by rejection.
    for (;;) {
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(perm.begin(), perm.end());
      bool fixed = false;
      for (std::size_t i = 0; i < k; ++i) fixed |= perm[i] == i;
      if (!fixed) break;
    }
    PromptPair pair;
    pair.clean.assign(ex.tokens.begin(), ex.tokens.begin() + static_cast<std::ptrdiff_t>(ex.prompt_length()));
    pair.corrupt = pair.clean;
    for (std::size_t i = 0; i < k; ++i) pair.corrupt[pos[i]] = pair.clean[pos[perm[i]]];
    for (std::size_t i = 0; i < pair.clean.size(); ++i)
      if (pair.clean[i] != pair.corrupt[i]) pair.differing_positions.push_back(i);
    pair.answer = ex.answer[0];
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

// ---- batches --------------------------------------------------------------------

TaskBatch concat_batches(const std::vector<TaskBatch>& parts, std::string name) {
  if (parts.empty()) throw InvalidBatchError("concat_batches: no parts");
  TaskBatch out{name.empty() ? parts[0].task_name : std::move(name), parts[0].format, parts[0].seed, {}};
  for (const auto& p : parts) out.examples.insert(out.examples.end(), p.examples.begin(), p.examples.end());
  return out;
}

std::string export_batch_jsonl(const TaskBatch& batch) {
  std::string out;
  for (const auto& ex : batch.examples) {
    nlohmann::json j;
    j["tokens"] = ex.tokens;
    j["mask"] = ex.target_mask;
    j["answer"] = ex.answer;
    out += j.dump() + "\n";
  }
  return out;
}

namespace {

std::vector<int> parse_mapping_list(std::string_view s) {
  std::vector<int> out;
  while (!s.empty()) {
    const auto comma = s.find(',');
    const auto item = s.substr(0, comma);
    int v = -1;
    auto res = std::from_chars(item.data(), item.data() + item.size(), v);
    if (res.ec != std::errc{} || res.ptr != item.data() + item.size())
      throw ConfigError("task spec: bad mapping id '" + std::string(item) + "'");
    check_mapping(v);
    out.push_back(v);
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  if (out.empty()) throw ConfigError("task spec: empty mapping list");
  return out;
}

}  // namespace

TaskBatch make_task(std::string_view spec, std::uint64_t seed, std::size_t n) {
  if (spec == "induction") return gen_induction(seed, n, vocab::kNumWords, 24);
  if (spec == "aba") return gen_symbolic(seed, n, SymbolicRule::aba, vocab::kNumWords);
  if (spec == "abb") return gen_symbolic(seed, n, SymbolicRule::abb, vocab::kNumWords);
  const bool icl = spec.starts_with("kv-icl");
  const bool instr = spec.starts_with("kv-instr");
  if (!icl && !instr) throw ConfigError("unknown task '" + std::string(spec) + "'");
  const auto rest = spec.substr(icl ? 6 : 8);
  std::vector<int> mappings;
  if (rest.empty()) {
    for (int m = 0; m < vocab::kNumMappings; ++m) mappings.push_back(m);
  } else if (rest.front() == ':') {
    mappings = parse_mapping_list(rest.substr(1));
  } else {
    throw ConfigError("unknown task '" + std::string(spec) + "'");
  }
  // Round-robin over mappings; each mapping has its own matched-seed stream.
  std::vector<TaskBatch> per_mapping;
  for (std::size_t i = 0; i < mappings.size(); ++i) {
    const auto count = n / mappings.size() + (i < n % mappings.size() ? 1 : 0);
    const auto s = derive_seed(seed, "mapping" + std::to_string(mappings[i]));
    per_mapping.push_back(icl ? gen_kv_icl(s, count, mappings[i]) : gen_instruction_variant(s, count, mappings[i]));
  }
  TaskBatch out{std::string(spec), icl ? PromptFormat::icl : PromptFormat::instruction, seed, {}};
  for (std::size_t e = 0; out.examples.size() < n; ++e)
    for (const auto& b : per_mapping)
      if (e < b.size()) out.examples.push_back(b.examples[e]);
  return out;
}

}  // namespace chg
