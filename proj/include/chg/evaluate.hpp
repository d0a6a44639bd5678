#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "chg/model.hpp"
#include "chg/tasks.hpp"

namespace chg {

// Next-token layout of a batch: inputs are tokens[0..n-2] of every example,
// row r predicts the token after it, and mask marks answer predictions.
struct LossBatch {
  PackedSequences seqs;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
  std::size_t n_target_tokens = 0;
};

LossBatch pack_for_loss(const TaskBatch& batch);
LossBatch pack_for_loss(const TaskBatch& batch, std::span<const std::size_t> indices);

// Sum of log P(target | prefix) over each example's target positions.
template <typename T>
std::vector<double> target_logprob(const Weights<T>& w, const TaskBatch& batch, const GateMatrix& gates);

// Same with an optional gate matrix (null = ungated).
template <typename T>
std::vector<double> target_logprob(const Weights<T>& w, const TaskBatch& batch, const GateMatrix* gates);

// Mean over examples of target_logprob / number of target tokens.
template <typename T>
double mean_logprob_per_token(const Weights<T>& w, const TaskBatch& batch, const GateMatrix* gates);

// Fraction of examples whose every target token is the greedy argmax.
template <typename T>
double greedy_accuracy(const Weights<T>& w, const TaskBatch& batch, const GateMatrix* gates);

}  // namespace chg
