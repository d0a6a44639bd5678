#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chg/tensor.hpp"

namespace chg {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 8;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 48;
  double norm_eps = 1e-5;

  std::size_t d_head() const { return d_model / n_heads; }
  std::size_t n_gates() const { return n_layers * n_heads; }
  // Throws ConfigError on a non-positive field or d_model % n_heads != 0.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

std::map<std::string, std::string> to_key_values(const ModelConfig& config);
ModelConfig model_config_from_key_values(const std::map<std::string, std::string>& kv);

template <typename T>
struct LayerWeights {
  Tensor<T> attn_norm;  // [d]
  Tensor<T> wq, wk, wv;  // [d x d], head h owns columns [h*dk, (h+1)*dk)
  Tensor<T> wo;          // [H*dk x d], head h owns rows [h*dk, (h+1)*dk)
  Tensor<T> mlp_norm;    // [d]
  Tensor<T> w_in;        // [d x d_ff]
  Tensor<T> w_out;       // [d_ff x d]
};

template <typename T>
struct Weights {
  ModelConfig config;
  Tensor<T> tok_embed;  // [V x d]
  Tensor<T> pos_embed;  // [max_seq_len x d]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;  // [d]
  Tensor<T> unembed;     // [d x V]

  // Stable (name, tensor) listing; the order is the checkpoint order.
  std::vector<std::pair<std::string, Tensor<T>>> named() const;
  std::vector<Tensor<T>> parameters() const;

  void set_requires_grad(bool on) const;
  void freeze() const;
  Weights deep_copy() const;
};

using ModelCheckpoint = Weights<float>;

template <typename To, typename From>
Weights<To> weights_cast(const Weights<From>& w);

// Seeded small random init: N(0, 0.02), residual projections scaled by
// 1/sqrt(2L), norm weights 1.
ModelCheckpoint init_weights(const ModelConfig& config, std::uint64_t seed);

// Zeroes head (layer, head)'s W_V column block, so the head's output and the
// NLL gradient of its gate are exactly zero.
void plant_irrelevant_head(ModelCheckpoint& ckpt, std::size_t layer, std::size_t head);

bool bitwise_equal(const ModelCheckpoint& a, const ModelCheckpoint& b);

// ---- gates -----------------------------------------------------------------

enum class GateMode { soft, hard };

// One scalar gate per (layer, head). Soft gates are sigmoid(logit) with the
// logit clamped to [-s_max, s_max]; hard gates are explicit values in [0, 1].
class GateMatrix {
 public:
  GateMatrix() = default;

  static GateMatrix soft(std::size_t layers, std::size_t heads, std::vector<double> logits, double s_max);
  static GateMatrix soft_constant(std::size_t layers, std::size_t heads, double logit, double s_max);
  static GateMatrix hard(std::size_t layers, std::size_t heads, std::vector<double> values);
  static GateMatrix ones(std::size_t layers, std::size_t heads);

  std::size_t layers() const noexcept { return layers_; }
  std::size_t heads() const noexcept { return heads_; }
  std::size_t size() const noexcept { return layers_ * heads_; }
  GateMode mode() const noexcept { return mode_; }
  double s_max() const noexcept { return s_max_; }

  double gate(std::size_t layer, std::size_t head) const;
  // Soft mode only.
  double logit(std::size_t layer, std::size_t head) const;
  std::vector<double> gates() const;
  const std::vector<double>& logits() const;

  // Hard copy of these gate values with one entry overridden.
  GateMatrix with_gate(std::size_t layer, std::size_t head, double value) const;
  GateMatrix to_hard() const;

  bool operator==(const GateMatrix&) const = default;

 private:
  std::size_t layers_ = 0;
  std::size_t heads_ = 0;
  GateMode mode_ = GateMode::hard;
  double s_max_ = 0.0;
  std::vector<double> values_;  // logits (soft) or gate values (hard)
};

double sigmoid_scalar(double x);
// Inverse sigmoid with clipping of the logit to [-s_max, s_max].
double clipped_logit(double g, double s_max);

// Gate values in the forward's scalar type; `values` may require grad.
template <typename T>
struct GateValues {
  Tensor<T> values;  // [L x H]
  bool hard = false;
};

template <typename T>
GateValues<T> gate_values(const GateMatrix& gates);

// ---- hooks -------------------------------------------------------------------

// (layer, head, position) inside one sequence.
struct HeadSite {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t position = 0;
  bool operator==(const HeadSite&) const = default;
};

struct HeadPatch {
  HeadSite site;
  std::vector<double> value;  // length d_k, replaces the post-gate Z
};

struct CapturedActivations {
  std::vector<HeadSite> sites;
  std::vector<std::vector<double>> values;  // post-gate Z per site
};

// Several sequences laid out back to back; attention never crosses segments.
struct PackedSequences {
  std::vector<int> tokens;
  std::vector<std::size_t> offsets{0};  // size = n_segments + 1

  void append(std::span<const int> seq);
  std::size_t n_segments() const { return offsets.size() - 1; }
  std::size_t length(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
};

struct BatchHooks {
  // (segment, site) pairs.
  std::vector<std::pair<std::size_t, HeadSite>> captures;
  std::vector<std::pair<std::size_t, HeadPatch>> patches;
};

// ---- forward -------------------------------------------------------------------

// Logits [N x V] for packed sequences. `gates` may be null (ungated
// reference). Captured values are written to `captured` in capture order.
template <typename T>
Tensor<T> forward_packed(Tape<T>& tape, const Weights<T>& w, const PackedSequences& seqs,
                         const GateValues<T>* gates, const BatchHooks* hooks = nullptr,
                         std::vector<std::vector<double>>* captured = nullptr);

template <typename T>
Tensor<T> forward(const Weights<T>& w, std::span<const int> tokens, const GateMatrix& gates);

template <typename T>
Tensor<T> forward_ungated(const Weights<T>& w, std::span<const int> tokens);

template <typename T>
std::pair<Tensor<T>, CapturedActivations> forward_with_capture(const Weights<T>& w,
                                                               std::span<const int> tokens,
                                                               const GateMatrix& gates,
                                                               std::span<const HeadSite> probes);

template <typename T>
Tensor<T> forward_with_patch(const Weights<T>& w, std::span<const int> tokens, const GateMatrix& gates,
                             std::span<const HeadPatch> patches);

// Fused multi-head causal attention with per-head gates applied to A.V.
// q, k, v: [N x d]. Returns the concatenated post-gate Z [N x d].
template <typename T>
Tensor<T> gated_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                          const GateValues<T>* gates, std::size_t layer, std::size_t n_heads,
                          std::span<const std::size_t> offsets, const BatchHooks* hooks,
                          std::vector<std::vector<double>>* captured);

}  // namespace chg
