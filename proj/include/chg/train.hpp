#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "chg/model.hpp"

namespace chg {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moments per parameter tensor, one shared step counter.
template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  // Zero moments for tensors of the given sizes; step reset to 0.
  void reset(std::span<const std::size_t> sizes);
};

// One bias-corrected Adam update of every (param, grad) pair. Throws
// NumericError naming the first non-finite gradient before touching params.
template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads, AdamState<T>& state,
               const AdamHyper& hyper);

// Convenience overload over tensors' own gradient buffers.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const AdamHyper& hyper);

struct MixtureWeights {
  double induction = 0.45;
  double symbolic = 0.1;
  double kv_icl = 0.3;
  double kv_instruction = 0.15;
};

struct TrainConfig {
  ModelConfig model;
  std::size_t steps = 20000;
  std::size_t batch_size = 96;
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t warmup_steps = 200;
  std::uint64_t seed = 1;
  MixtureWeights mixture;
  std::size_t log_every = 50;
  std::size_t eval_every = 1000;
  std::size_t eval_examples = 256;
  std::size_t divergence_window = 500;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

struct MetricRow {
  std::size_t step = 0;
  double loss = 0.0;
  std::string task;
  double accuracy = 0.0;
};

struct TrainResult {
  ModelCheckpoint checkpoint;
  std::vector<MetricRow> log;
};

using TrainProgress = std::function<void(const MetricRow&)>;

// Trains `init` (copied, never modified) on the synthetic mixture.
TrainResult train(const TrainConfig& config, const ModelCheckpoint& init, const TrainProgress& progress = {});

// Held-out greedy accuracy per task family, evaluated under an ungated forward.
std::vector<MetricRow> evaluate_heldout(const ModelCheckpoint& ckpt, std::uint64_t seed, std::size_t n_examples,
                                        std::size_t step);

// CSV with header "step,loss,task,accuracy".
std::string metrics_csv(const std::vector<MetricRow>& rows);

}  // namespace chg
