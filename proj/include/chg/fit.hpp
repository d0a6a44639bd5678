#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "chg/evaluate.hpp"
#include "chg/model.hpp"
#include "chg/tasks.hpp"

namespace chg {

struct FitConfig {
  double lambda_plus = 3e-3;
  double lambda_minus = -3e-3;
  double s_max = 8.0;
  double s0 = 4.0;
  double lr = 5e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 300;
  std::size_t steps = 700;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  // Contrastive objective: retain NLL - alpha * min(forget NLL, tau) - lambda * sum(clip(s)).
  double alpha = 1.0;
  double tau = 10.0;

  // Throws ConfigError naming the field.
  void validate() const;
  // Canonical "key=value" lines, sorted by key.
  std::string to_text() const;
  // First 16 hex digits of SHA-256 over to_text().
  std::string fingerprint() const;
};

struct TracePoint {
  std::string phase;  // G0 | Gplus | Gminus | contrastive
  std::size_t step = 0;
  double loss = 0.0;
  double nll = 0.0;     // retain NLL for contrastive fits
  double forget = 0.0;  // forget NLL (contrastive only)
};

struct ChgResult {
  GateMatrix g0;
  GateMatrix gplus;
  GateMatrix gminus;
  std::vector<TracePoint> trace;
  std::string fingerprint;
};

// Mean-per-target-token NLL under sigmoid(clip(s)) minus lambda * sum(clip(s)).
// `logits` is an [L x H] tensor and may require grad.
template <typename T>
Tensor<T> chg_loss(Tape<T>& tape, const Weights<T>& w, const LossBatch& batch, const Tensor<T>& logits,
                   double lambda, double s_max);

// Value and gradient of chg_loss with respect to the logits.
template <typename T>
double chg_loss_grad(const Weights<T>& w, const LossBatch& batch, std::span<const double> logits, double lambda,
                     double s_max, std::vector<double>* grad);

// lambda = 0 phase starting from s0 for warmup_steps. Minibatches come from
// the "warmup" stream of config.seed.
template <typename T>
GateMatrix fit_warmup(const Weights<T>& w, const TaskBatch& data, const FitConfig& config,
                      std::vector<TracePoint>* trace = nullptr);

// Starts from g0 with fresh optimizer state. Minibatches come from the
// "regularized" stream, shared by both signs of lambda.
template <typename T>
GateMatrix fit_regularized(const Weights<T>& w, const TaskBatch& data, const GateMatrix& g0, double lambda,
                           const FitConfig& config, std::vector<TracePoint>* trace = nullptr);

// Warmup, then G+ and G- from the shared warmup gates.
template <typename T>
ChgResult fit_chg(const Weights<T>& w, const TaskBatch& data, const FitConfig& config);

// Retain/forget fit from s0 for config.steps steps, lambda < 0.
template <typename T>
GateMatrix fit_contrastive(const Weights<T>& w, const TaskBatch& retain, const TaskBatch& forget, double lambda,
                           const FitConfig& config, std::vector<TracePoint>* trace = nullptr);

// "# fingerprint=<hex>" line, then phase,layer,head,logit,gate rows.
std::string gates_csv(const ChgResult& result);
// Parses gates_csv output; trace is left empty. Throws IntegrityError.
ChgResult parse_gates_csv(std::string_view text);
// Single-matrix variant used for contrastive output (phase column = name).
std::string gate_matrix_csv(const GateMatrix& g, std::string_view phase, std::string_view fingerprint);
GateMatrix parse_gate_matrix_csv(std::string_view text, std::string_view phase);

std::string trace_csv(const std::vector<TracePoint>& trace);

}  // namespace chg
