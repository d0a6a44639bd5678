#include "chg/train.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "chg/evaluate.hpp"
#include "chg/io.hpp"
#include "chg/rng.hpp"
#include "chg/tasks.hpp"

namespace chg {

// ---- Adam -----------------------------------------------------------------------

template <typename T>
void AdamState<T>::reset(std::span<const std::size_t> sizes) {
  step = 0;
  m.assign(sizes.size(), {});
  v.assign(sizes.size(), {});
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    m[i].assign(sizes[i], T(0));
    v[i].assign(sizes[i], T(0));
  }
}

template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads, AdamState<T>& state,
               const AdamHyper& hyper) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " + std::to_string(state.m.size()) +
                         " moment slots");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != params[i].size() || state.m[i].size() != params[i].size())
      throw DimensionError("adam_step: size mismatch for parameter " + std::to_string(i));
    for (std::size_t j = 0; j < grads[i].size(); ++j)
      if (!std::isfinite(grads[i][j]))
        throw NumericError("adam_step: non-finite gradient in parameter " + std::to_string(i) + " at element " +
                           std::to_string(j) + " (step " + std::to_string(state.step + 1) + ")");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  const T corr1 = static_cast<T>(1.0 - std::pow(hyper.beta1, t));
  const T corr2 = static_cast<T>(1.0 - std::pow(hyper.beta2, t));
  const T lr = static_cast<T>(hyper.lr), eps = static_cast<T>(hyper.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto g = grads[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T m_hat = m[j] / corr1;
      const T v_hat = v[j] / corr2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const AdamHyper& hyper) {
  std::vector<std::span<T>> p;
  std::vector<std::span<const T>> g;
  for (auto& t : params) {
    if (!t.has_grad()) throw DimensionError("adam_step: parameter without gradient buffer");
    p.push_back(t.mutable_data());
    g.push_back(t.grad());
  }
  adam_step<T>(std::span<const std::span<T>>(p), std::span<const std::span<const T>>(g), state, hyper);
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(std::span<const std::span<float>>, std::span<const std::span<const float>>,
                        AdamState<float>&, const AdamHyper&);
template void adam_step(std::span<const std::span<double>>, std::span<const std::span<const double>>,
                        AdamState<double>&, const AdamHyper&);
template void adam_step(std::span<Tensor<float>>, AdamState<float>&, const AdamHyper&);
template void adam_step(std::span<Tensor<double>>, AdamState<double>&, const AdamHyper&);

// ---- config ---------------------------------------------------------------------

void TrainConfig::validate() const {
  model.validate();
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ConfigError(std::string("train config: '") + name + "' must be positive");
  };
  positive(static_cast<double>(batch_size), "batch_size");
  positive(lr, "lr");
  positive(beta1, "beta1");
  positive(beta2, "beta2");
  positive(eps, "eps");
  positive(clip_norm, "clip_norm");
  positive(static_cast<double>(divergence_window), "divergence_window");
  if (beta1 >= 1.0 || beta2 >= 1.0) throw ConfigError("train config: Adam betas must be below 1");
  if (weight_decay < 0.0) throw ConfigError("train config: 'weight_decay' must be non-negative");
  const auto& w = mixture;
  for (double x : {w.induction, w.symbolic, w.kv_icl, w.kv_instruction})
    if (x < 0.0) throw ConfigError("train config: mixture weights must be non-negative");
  const double total = w.induction + w.symbolic + w.kv_icl + w.kv_instruction;
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("train config: mixture weights must sum to 1");
  if (model.vocab_size < static_cast<std::size_t>(vocab::kSize))
    throw ConfigError("train config: vocab_size must be at least " + std::to_string(vocab::kSize));
  if (model.max_seq_len < 44) throw ConfigError("train config: max_seq_len must be at least 44 for kv-icl prompts");
}

// ---- training ---------------------------------------------------------------------

namespace {

Example sample_mixture_example(Rng& rng, const MixtureWeights& w) {
  const double u = rng.uniform01();
  const auto seed = rng.next_u64();
  // Lengths and shot counts vary during training only. A fixed layout lets
  // positional shortcuts fit the data, which stalls the content-matching
  // circuit the held-out tasks need.
  if (u < w.induction)
    return gen_induction(seed, 1, vocab::kNumWords, 8 + rng.uniform_index(17)).examples[0];
  if (u < w.induction + w.symbolic) {
    const auto rule = rng.uniform_index(2) == 0 ? SymbolicRule::aba : SymbolicRule::abb;
    return gen_symbolic(seed, 1, rule, vocab::kNumWords).examples[0];
  }
  const int mapping = static_cast<int>(rng.uniform_index(vocab::kNumMappings));
  if (u < w.induction + w.symbolic + w.kv_icl) return gen_kv_icl(seed, 1, mapping, 1 + rng.uniform_index(10)).examples[0];
  return gen_instruction_variant(seed, 1, mapping).examples[0];
}

bool is_matrix(const std::string& name) {
  return name.find("norm") == std::string::npos;
}

}  // namespace

std::vector<MetricRow> evaluate_heldout(const ModelCheckpoint& ckpt, std::uint64_t seed, std::size_t n_examples,
                                        std::size_t step) {
  std::vector<MetricRow> rows;
  for (const char* spec : {"induction", "aba", "abb", "kv-icl", "kv-instr"}) {
    const auto batch = make_task(spec, derive_seed(seed, std::string("heldout-") + spec), n_examples);
    const double lp = mean_logprob_per_token(ckpt, batch, nullptr);
    rows.push_back({step, -lp, std::string("eval:") + spec, greedy_accuracy(ckpt, batch, nullptr)});
  }
  return rows;
}

TrainResult train(const TrainConfig& config, const ModelCheckpoint& init, const TrainProgress& progress) {
  config.validate();
  if (!(init.config == config.model)) throw ConfigError("train: initial checkpoint does not match model config");

  TrainResult result;
  result.checkpoint = init.deep_copy();
  auto& w = result.checkpoint;
  w.set_requires_grad(true);
  const auto named = w.named();
  std::vector<Tensor<float>> params;
  std::vector<std::size_t> sizes;
  std::vector<bool> decay;
  for (const auto& [name, t] : named) {
    params.push_back(t);
    sizes.push_back(t.numel());
    decay.push_back(is_matrix(name));
  }
  AdamState<float> adam;
  adam.reset(sizes);

  Rng data_rng(derive_seed(config.seed, "data"));
  const auto eval_seed = derive_seed(config.seed, "eval");
  auto emit = [&](MetricRow row) {
    if (progress) progress(row);
    result.log.push_back(std::move(row));
  };

  double initial_loss = 0.0;
  std::size_t above_initial = 0;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    TaskBatch batch{"mixture", PromptFormat::icl, config.seed, {}};
    for (std::size_t i = 0; i < config.batch_size; ++i) batch.examples.push_back(sample_mixture_example(data_rng, config.mixture));
    const auto lb = pack_for_loss(batch);

    for (auto& p : params) p.zero_grad();
    Tape<float> tape;
    const auto logits = forward_packed<float>(tape, w, lb.seqs, nullptr);
    const auto loss = cross_entropy(tape, logits, lb.targets, lb.mask);
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) throw NumericError("train: non-finite loss at step " + std::to_string(step));
    tape.backward(loss);

    double sq = 0.0;
    for (const auto& p : params)
      for (float g : p.grad()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("train: non-finite gradient norm at step " + std::to_string(step));
    if (norm > config.clip_norm) {
      const auto factor = static_cast<float>(config.clip_norm / norm);
      for (auto& p : params)
        for (auto& g : p.grad_buffer()) g *= factor;
    }

    const double lr_now =
        config.warmup_steps > 0 && step <= config.warmup_steps
            ? config.lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps)
            : config.lr;
    if (config.weight_decay > 0.0) {
      const auto shrink = static_cast<float>(1.0 - lr_now * config.weight_decay);
      for (std::size_t i = 0; i < params.size(); ++i)
        if (decay[i])
          for (auto& x : params[i].mutable_data()) x *= shrink;
    }
    adam_step<float>(std::span<Tensor<float>>(params), adam, {lr_now, config.beta1, config.beta2, config.eps});

    if (step == 1) initial_loss = loss_value;
    above_initial = loss_value > initial_loss ? above_initial + 1 : 0;
    if (above_initial >= config.divergence_window)
      throw TrainingFailure("train: loss above its initial value for " + std::to_string(above_initial) +
                            " consecutive steps (step " + std::to_string(step) + ")");

    if (config.log_every > 0 && (step % config.log_every == 0 || step == 1)) {
      std::size_t hits = 0, rows = 0;
      const auto vocab = w.config.vocab_size;
      auto ld = logits.data();
      for (std::size_t r = 0; r < lb.mask.size(); ++r) {
        if (!lb.mask[r]) continue;
        const float* row = ld.data() + r * vocab;
        hits += static_cast<std::size_t>(std::max_element(row, row + vocab) - row) ==
                        static_cast<std::size_t>(lb.targets[r])
                    ? 1
                    : 0;
        ++rows;
      }
      emit({step, loss_value, "mixture", static_cast<double>(hits) / static_cast<double>(rows)});
    }
    if (config.eval_every > 0 && step % config.eval_every == 0)
      for (auto& row : evaluate_heldout(w, eval_seed, config.eval_examples, step)) emit(std::move(row));
  }
  w.set_requires_grad(false);
  return result;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "step,loss,task,accuracy\n";
  for (const auto& r : rows) os << r.step << ',' << format_sig9(r.loss) << ',' << r.task << ',' << format_sig9(r.accuracy) << '\n';
  return os.str();
}

}  // namespace chg
