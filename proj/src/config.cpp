#include "chg/config.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "chg/io.hpp"

namespace chg {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text, std::string source) {
  KeyValueConfig c;
  c.source_ = std::move(source);
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError(c.source_ + ":" + std::to_string(line_no) + ": expected 'key = value', got '" +
                        std::string(line) + "'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(c.source_ + ":" + std::to_string(line_no) + ": empty key");
    if (value.empty())
      throw ConfigError(c.source_ + ":" + std::to_string(line_no) + ": field '" + std::string(key) + "' has no value");
    if (c.entries_.count(key))
      throw ConfigError(c.source_ + ":" + std::to_string(line_no) + ": field '" + std::string(key) +
                        "' given twice (first on line " + std::to_string(c.entries_.find(key)->second.line) + ")");
    c.entries_.emplace(std::string(key), Entry{std::string(value), line_no});
    if (end == text.size()) break;
  }
  return c;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  return parse(read_file(path), path.string());
}

void KeyValueConfig::check_keys(std::span<const std::string_view> allowed) const {
  for (const auto& [k, e] : entries_)
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw ConfigError(source_ + ":" + std::to_string(e.line) + ": unknown field '" + k + "'");
}

void KeyValueConfig::require(std::span<const std::string_view> keys) const {
  for (auto k : keys)
    if (!has(k)) throw ConfigError(source_ + ": missing required field '" + std::string(k) + "'");
}

bool KeyValueConfig::has(std::string_view key) const { return entries_.find(key) != entries_.end(); }

std::string KeyValueConfig::where(std::string_view key) const {
  const auto it = entries_.find(key);
  return source_ + ":" + std::to_string(it->second.line) + ": field '" + std::string(key) + "'";
}

std::string KeyValueConfig::get_string(std::string_view key, std::string fallback) const {
  const auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second.value;
}

double KeyValueConfig::get_double(std::string_view key, double fallback) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const auto& s = it->second.value;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError(where(key) + ": expected a number, got '" + s + "'");
  return v;
}

std::uint64_t KeyValueConfig::get_u64(std::string_view key, std::uint64_t fallback) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const auto& s = it->second.value;
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ConfigError(where(key) + ": expected a non-negative integer, got '" + s + "'");
  return v;
}

std::size_t KeyValueConfig::get_size(std::string_view key, std::size_t fallback) const {
  return static_cast<std::size_t>(get_u64(key, fallback));
}

std::map<std::string, std::string> KeyValueConfig::entries() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, e] : entries_) out.emplace(k, e.value);
  return out;
}

// ---- command schemas -----------------------------------------------------------------

TrainJob train_job_from(const KeyValueConfig& kv) {
  static constexpr std::string_view kAllowed[] = {
      "seed", "steps", "n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq_len", "norm_eps",
      "batch_size", "lr", "beta1", "beta2", "eps", "weight_decay", "clip_norm", "warmup_steps", "mix_induction",
      "mix_symbolic", "mix_kv_icl", "mix_kv_instruction", "log_every", "eval_every", "eval_examples",
      "divergence_window", "planted_layer", "planted_head"};
  static constexpr std::string_view kRequired[] = {"seed", "steps"};
  kv.check_keys(kAllowed);
  kv.require(kRequired);
  TrainJob job;
  auto& t = job.train;
  auto& m = t.model;
  m.n_layers = kv.get_size("n_layers", m.n_layers);
  m.n_heads = kv.get_size("n_heads", m.n_heads);
  m.d_model = kv.get_size("d_model", m.d_model);
  m.d_ff = kv.get_size("d_ff", m.d_ff);
  m.vocab_size = kv.get_size("vocab_size", m.vocab_size);
  m.max_seq_len = kv.get_size("max_seq_len", m.max_seq_len);
  m.norm_eps = kv.get_double("norm_eps", m.norm_eps);
  t.seed = kv.get_u64("seed", t.seed);
  t.steps = kv.get_size("steps", t.steps);
  t.batch_size = kv.get_size("batch_size", t.batch_size);
  t.lr = kv.get_double("lr", t.lr);
  t.beta1 = kv.get_double("beta1", t.beta1);
  t.beta2 = kv.get_double("beta2", t.beta2);
  t.eps = kv.get_double("eps", t.eps);
  t.weight_decay = kv.get_double("weight_decay", t.weight_decay);
  t.clip_norm = kv.get_double("clip_norm", t.clip_norm);
  t.warmup_steps = kv.get_size("warmup_steps", t.warmup_steps);
  t.mixture.induction = kv.get_double("mix_induction", t.mixture.induction);
  t.mixture.symbolic = kv.get_double("mix_symbolic", t.mixture.symbolic);
  t.mixture.kv_icl = kv.get_double("mix_kv_icl", t.mixture.kv_icl);
  t.mixture.kv_instruction = kv.get_double("mix_kv_instruction", t.mixture.kv_instruction);
  t.log_every = kv.get_size("log_every", t.log_every);
  t.eval_every = kv.get_size("eval_every", t.eval_every);
  t.eval_examples = kv.get_size("eval_examples", t.eval_examples);
  t.divergence_window = kv.get_size("divergence_window", t.divergence_window);
  if (kv.has("planted_layer") != kv.has("planted_head"))
    throw ConfigError(kv.source() + ": planted_layer and planted_head must be given together");
  if (kv.has("planted_layer")) {
    job.plant = true;
    job.planted_layer = kv.get_size("planted_layer", 0);
    job.planted_head = kv.get_size("planted_head", 0);
    if (job.planted_layer >= m.n_layers || job.planted_head >= m.n_heads)
      throw ConfigError(kv.source() + ": planted head (" + std::to_string(job.planted_layer) + "," +
                        std::to_string(job.planted_head) + ") outside the model");
  }
  try {
    t.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(kv.source() + ": " + e.what());
  }
  return job;
}

FitJob fit_job_from(const KeyValueConfig& kv) {
  static constexpr std::string_view kAllowed[] = {
      "seed", "lambda_plus", "lambda_minus", "s_max", "s0", "lr", "beta1", "beta2", "eps", "warmup_steps", "steps",
      "batch_size", "alpha", "tau", "n_examples", "eval_examples", "k_max", "cma_pairs", "precision"};
  kv.check_keys(kAllowed);
  FitJob job;
  auto& f = job.fit;
  f.seed = kv.get_u64("seed", 1);
  f.lambda_plus = kv.get_double("lambda_plus", f.lambda_plus);
  f.lambda_minus = kv.get_double("lambda_minus", f.lambda_minus);
  f.s_max = kv.get_double("s_max", f.s_max);
  f.s0 = kv.get_double("s0", f.s0);
  f.lr = kv.get_double("lr", f.lr);
  f.beta1 = kv.get_double("beta1", f.beta1);
  f.beta2 = kv.get_double("beta2", f.beta2);
  f.eps = kv.get_double("eps", f.eps);
  f.warmup_steps = kv.get_size("warmup_steps", f.warmup_steps);
  f.steps = kv.get_size("steps", f.steps);
  f.batch_size = kv.get_size("batch_size", f.batch_size);
  f.alpha = kv.get_double("alpha", f.alpha);
  f.tau = kv.get_double("tau", f.tau);
  job.n_examples = kv.get_size("n_examples", job.n_examples);
  job.eval_examples = kv.get_size("eval_examples", job.eval_examples);
  job.k_max = kv.get_size("k_max", job.k_max);
  job.cma_pairs = kv.get_size("cma_pairs", job.cma_pairs);
  job.precision = kv.get_string("precision", job.precision);
  if (job.precision != "fp32" && job.precision != "fp64")
    throw ConfigError(kv.source() + ": field 'precision' must be fp32 or fp64");
  if (job.n_examples == 0 || job.eval_examples == 0 || job.cma_pairs == 0)
    throw ConfigError(kv.source() + ": example counts must be positive");
  try {
    f.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(kv.source() + ": " + e.what());
  }
  return job;
}

}  // namespace chg
