#include "chg/evaluate.hpp"

#include <algorithm>
#include <numeric>
#include <optional>

namespace chg {

namespace {

constexpr std::size_t kChunk = 256;

template <typename T, typename PerExample>
void for_each_scored(const Weights<T>& w, const TaskBatch& batch, const GateMatrix* gates, PerExample&& fn) {
  if (batch.empty()) throw InvalidBatchError("evaluation: empty batch '" + batch.task_name + "'");
  std::optional<GateValues<T>> gv;
  if (gates) gv = gate_values<T>(*gates);
  const auto vocab = w.config.vocab_size;
  for (std::size_t start = 0; start < batch.size(); start += kChunk) {
    const auto end = std::min(batch.size(), start + kChunk);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto lb = pack_for_loss(batch, idx);
    Tape<T> tape;
    const auto logits = forward_packed<T>(tape, w, lb.seqs, gv ? &*gv : nullptr);
    const auto logp = log_softmax_rows(logits);
    for (std::size_t s = 0; s < lb.seqs.n_segments(); ++s) {
      double sum = 0.0;
      std::size_t count = 0;
      bool all_argmax = true;
      for (auto r = lb.seqs.offsets[s]; r < lb.seqs.offsets[s + 1]; ++r) {
        if (!lb.mask[r]) continue;
        const T* row = logp.data() + r * vocab;
        sum += static_cast<double>(row[lb.targets[r]]);
        ++count;
        const auto best = static_cast<std::size_t>(std::max_element(row, row + vocab) - row);
        all_argmax &= best == static_cast<std::size_t>(lb.targets[r]);
      }
      fn(start + s, sum, count, all_argmax);
    }
  }
}

}  // namespace

LossBatch pack_for_loss(const TaskBatch& batch) {
  std::vector<std::size_t> idx(batch.size());
  std::iota(idx.begin(), idx.end(), 0);
  return pack_for_loss(batch, idx);
}

LossBatch pack_for_loss(const TaskBatch& batch, std::span<const std::size_t> indices) {
  if (indices.empty()) throw InvalidBatchError("pack_for_loss: no examples selected");
  LossBatch lb;
  for (auto i : indices) {
    const auto& ex = batch.examples.at(i);
    if (ex.tokens.size() < 2 || ex.target_mask.size() != ex.tokens.size())
      throw InvalidBatchError("pack_for_loss: malformed example in '" + batch.task_name + "'");
    const std::span<const int> toks(ex.tokens);
    lb.seqs.append(toks.first(toks.size() - 1));
    std::size_t n_masked = 0;
    for (std::size_t t = 1; t < ex.tokens.size(); ++t) {
      lb.targets.push_back(ex.tokens[t]);
      lb.mask.push_back(ex.target_mask[t]);
      n_masked += ex.target_mask[t] ? 1 : 0;
    }
    if (n_masked == 0) throw InvalidBatchError("pack_for_loss: example with empty target mask in '" + batch.task_name + "'");
    lb.n_target_tokens += n_masked;
  }
  return lb;
}

template <typename T>
std::vector<double> target_logprob(const Weights<T>& w, const TaskBatch& batch, const GateMatrix* gates) {
  std::vector<double> out(batch.size());
  for_each_scored(w, batch, gates, [&](std::size_t i, double sum, std::size_t, bool) { out[i] = sum; });
  return out;
}

template <typename T>
std::vector<double> target_logprob(const Weights<T>& w, const TaskBatch& batch, const GateMatrix& gates) {
  return target_logprob(w, batch, &gates);
}

template <typename T>
double mean_logprob_per_token(const Weights<T>& w, const TaskBatch& batch, const GateMatrix* gates) {
  double acc = 0.0;
  for_each_scored(w, batch, gates,
                  [&](std::size_t, double sum, std::size_t count, bool) { acc += sum / static_cast<double>(count); });
  return acc / static_cast<double>(batch.size());
}

template <typename T>
double greedy_accuracy(const Weights<T>& w, const TaskBatch& batch, const GateMatrix* gates) {
  std::size_t hits = 0;
  for_each_scored(w, batch, gates, [&](std::size_t, double, std::size_t, bool ok) { hits += ok ? 1 : 0; });
  return static_cast<double>(hits) / static_cast<double>(batch.size());
}

#define CHG_INSTANTIATE(T)                                                                             \
  template std::vector<double> target_logprob(const Weights<T>&, const TaskBatch&, const GateMatrix&); \
  template std::vector<double> target_logprob(const Weights<T>&, const TaskBatch&, const GateMatrix*); \
  template double mean_logprob_per_token(const Weights<T>&, const TaskBatch&, const GateMatrix*);      \
  template double greedy_accuracy(const Weights<T>&, const TaskBatch&, const GateMatrix*);

CHG_INSTANTIATE(float)
CHG_INSTANTIATE(double)

#undef CHG_INSTANTIATE

}  // namespace chg
