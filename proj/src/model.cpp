#include "chg/model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

#include "chg/rng.hpp"

namespace chg {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedConst = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using StridedMut = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

std::size_t parse_size(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ConfigError("model config: missing field '" + key + "'");
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument(key);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("model config: field '" + key + "' is not an unsigned integer: " + it->second);
  }
}

}  // namespace

// ---- config ---------------------------------------------------------------------

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0 || max_seq_len == 0)
    throw ConfigError("model config: all sizes must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  if (!(norm_eps > 0.0)) throw ConfigError("model config: norm_eps must be positive");
}

std::map<std::string, std::string> to_key_values(const ModelConfig& c) {
  char eps[64];
  std::snprintf(eps, sizeof eps, "%.17g", c.norm_eps);
  return {{"n_layers", std::to_string(c.n_layers)},   {"n_heads", std::to_string(c.n_heads)},
          {"d_model", std::to_string(c.d_model)},     {"d_ff", std::to_string(c.d_ff)},
          {"vocab_size", std::to_string(c.vocab_size)}, {"max_seq_len", std::to_string(c.max_seq_len)},
          {"norm_eps", eps}};
}

ModelConfig model_config_from_key_values(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  c.n_layers = parse_size(kv, "n_layers");
  c.n_heads = parse_size(kv, "n_heads");
  c.d_model = parse_size(kv, "d_model");
  c.d_ff = parse_size(kv, "d_ff");
  c.vocab_size = parse_size(kv, "vocab_size");
  c.max_seq_len = parse_size(kv, "max_seq_len");
  if (auto it = kv.find("norm_eps"); it != kv.end()) {
    try {
      c.norm_eps = std::stod(it->second);
    } catch (const std::exception&) {
      throw ConfigError("model config: field 'norm_eps' is not a number: " + it->second);
    }
  }
  c.validate();
  return c;
}

// ---- weights --------------------------------------------------------------------

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Weights<T>::named() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("tok_embed", tok_embed);
  out.emplace_back("pos_embed", pos_embed);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto p = "layers." + std::to_string(l) + ".";
    const auto& lw = layers[l];
    out.emplace_back(p + "attn_norm", lw.attn_norm);
    out.emplace_back(p + "wq", lw.wq);
    out.emplace_back(p + "wk", lw.wk);
    out.emplace_back(p + "wv", lw.wv);
    out.emplace_back(p + "wo", lw.wo);
    out.emplace_back(p + "mlp_norm", lw.mlp_norm);
    out.emplace_back(p + "w_in", lw.w_in);
    out.emplace_back(p + "w_out", lw.w_out);
  }
  out.emplace_back("final_norm", final_norm);
  out.emplace_back("unembed", unembed);
  return out;
}

template <typename T>
std::vector<Tensor<T>> Weights<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

template <typename T>
void Weights<T>::set_requires_grad(bool on) const {
  for (auto t : parameters()) t.set_requires_grad(on);
}

template <typename T>
void Weights<T>::freeze() const {
  for (auto t : parameters()) t.freeze();
}

template <typename T>
Weights<T> Weights<T>::deep_copy() const {
  Weights<T> w;
  w.config = config;
  w.tok_embed = tok_embed.deep_copy();
  w.pos_embed = pos_embed.deep_copy();
  for (const auto& lw : layers) {
    w.layers.push_back({lw.attn_norm.deep_copy(), lw.wq.deep_copy(), lw.wk.deep_copy(), lw.wv.deep_copy(),
                        lw.wo.deep_copy(), lw.mlp_norm.deep_copy(), lw.w_in.deep_copy(), lw.w_out.deep_copy()});
  }
  w.final_norm = final_norm.deep_copy();
  w.unembed = unembed.deep_copy();
  return w;
}

template <typename To, typename From>
Weights<To> weights_cast(const Weights<From>& w) {
  Weights<To> out;
  out.config = w.config;
  out.tok_embed = tensor_cast<To>(w.tok_embed);
  out.pos_embed = tensor_cast<To>(w.pos_embed);
  for (const auto& lw : w.layers) {
    out.layers.push_back({tensor_cast<To>(lw.attn_norm), tensor_cast<To>(lw.wq), tensor_cast<To>(lw.wk),
                          tensor_cast<To>(lw.wv), tensor_cast<To>(lw.wo), tensor_cast<To>(lw.mlp_norm),
                          tensor_cast<To>(lw.w_in), tensor_cast<To>(lw.w_out)});
  }
  out.final_norm = tensor_cast<To>(w.final_norm);
  out.unembed = tensor_cast<To>(w.unembed);
  return out;
}

ModelCheckpoint init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const double std_dev = 0.02;
  const double resid_std = std_dev / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  auto normal = [&](Shape shape, double sd) {
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.normal() * sd);
    return Tensor<float>::from(std::move(shape), std::move(v));
  };
  auto ones = [](std::size_t n) { return Tensor<float>::from({n}, std::vector<float>(n, 1.0f)); };

  const auto d = config.d_model;
  ModelCheckpoint w;
  w.config = config;
  w.tok_embed = normal({config.vocab_size, d}, std_dev);
  w.pos_embed = normal({config.max_seq_len, d}, std_dev);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights<float> lw;
    lw.attn_norm = ones(d);
    lw.wq = normal({d, d}, std_dev);
    lw.wk = normal({d, d}, std_dev);
    lw.wv = normal({d, d}, std_dev);
    lw.wo = normal({d, d}, resid_std);
    lw.mlp_norm = ones(d);
    lw.w_in = normal({d, config.d_ff}, std_dev);
    lw.w_out = normal({config.d_ff, d}, resid_std);
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = ones(d);
  w.unembed = normal({d, config.vocab_size}, std_dev);
  return w;
}

void plant_irrelevant_head(ModelCheckpoint& ckpt, std::size_t layer, std::size_t head) {
  const auto& c = ckpt.config;
  if (layer >= c.n_layers || head >= c.n_heads)
    throw ConfigError("planted head (" + std::to_string(layer) + "," + std::to_string(head) +
                      ") outside model of " + std::to_string(c.n_layers) + "x" + std::to_string(c.n_heads));
  auto wv = ckpt.layers[layer].wv.mutable_data();
  const auto d = c.d_model, dk = c.d_head();
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t j = head * dk; j < (head + 1) * dk; ++j) wv[r * d + j] = 0.0f;
}

bool bitwise_equal(const ModelCheckpoint& a, const ModelCheckpoint& b) {
  if (!(a.config == b.config)) return false;
  const auto na = a.named(), nb = b.named();
  if (na.size() != nb.size()) return false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    if (na[i].first != nb[i].first || na[i].second.shape() != nb[i].second.shape()) return false;
    const auto da = na[i].second.data(), db = nb[i].second.data();
    if (std::memcmp(da.data(), db.data(), da.size_bytes()) != 0) return false;
  }
  return true;
}

// ---- gates ----------------------------------------------------------------------

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double clipped_logit(double g, double s_max) {
  if (g <= 0.0) return -s_max;
  if (g >= 1.0) return s_max;
  return std::clamp(std::log(g) - std::log1p(-g), -s_max, s_max);
}

GateMatrix GateMatrix::soft(std::size_t layers, std::size_t heads, std::vector<double> logits, double s_max) {
  if (logits.size() != layers * heads)
    throw DimensionError("gate matrix: " + std::to_string(logits.size()) + " logits for " +
                         std::to_string(layers) + "x" + std::to_string(heads));
  if (!(s_max > 0.0)) throw ConfigError("gate matrix: s_max must be positive");
  GateMatrix g;
  g.layers_ = layers;
  g.heads_ = heads;
  g.mode_ = GateMode::soft;
  g.s_max_ = s_max;
  for (auto& s : logits) s = std::clamp(s, -s_max, s_max);
  g.values_ = std::move(logits);
  return g;
}

GateMatrix GateMatrix::soft_constant(std::size_t layers, std::size_t heads, double logit, double s_max) {
  return soft(layers, heads, std::vector<double>(layers * heads, logit), s_max);
}

GateMatrix GateMatrix::hard(std::size_t layers, std::size_t heads, std::vector<double> values) {
  if (values.size() != layers * heads)
    throw DimensionError("gate matrix: " + std::to_string(values.size()) + " gates for " +
                         std::to_string(layers) + "x" + std::to_string(heads));
  for (double v : values)
    if (!(v >= 0.0 && v <= 1.0)) throw DimensionError("gate matrix: hard gate outside [0,1]");
  GateMatrix g;
  g.layers_ = layers;
  g.heads_ = heads;
  g.mode_ = GateMode::hard;
  g.values_ = std::move(values);
  return g;
}

GateMatrix GateMatrix::ones(std::size_t layers, std::size_t heads) {
  return hard(layers, heads, std::vector<double>(layers * heads, 1.0));
}

double GateMatrix::gate(std::size_t layer, std::size_t head) const {
  const double v = values_.at(layer * heads_ + head);
  return mode_ == GateMode::soft ? sigmoid_scalar(v) : v;
}

double GateMatrix::logit(std::size_t layer, std::size_t head) const {
  if (mode_ != GateMode::soft) throw ConfigError("gate matrix: logits exist only in soft mode");
  return values_.at(layer * heads_ + head);
}

std::vector<double> GateMatrix::gates() const {
  std::vector<double> out(values_.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = mode_ == GateMode::soft ? sigmoid_scalar(values_[i]) : values_[i];
  return out;
}

const std::vector<double>& GateMatrix::logits() const {
  if (mode_ != GateMode::soft) throw ConfigError("gate matrix: logits exist only in soft mode");
  return values_;
}

GateMatrix GateMatrix::with_gate(std::size_t layer, std::size_t head, double value) const {
  auto g = to_hard();
  g.values_.at(layer * heads_ + head) = value;
  return g;
}

GateMatrix GateMatrix::to_hard() const {
  if (mode_ == GateMode::hard) return *this;
  return hard(layers_, heads_, gates());
}

template <typename T>
GateValues<T> gate_values(const GateMatrix& gates) {
  const auto g = gates.gates();
  std::vector<T> v(g.begin(), g.end());
  return {Tensor<T>::from({gates.layers(), gates.heads()}, std::move(v)), gates.mode() == GateMode::hard};
}

// ---- packed sequences -------------------------------------------------------------

void PackedSequences::append(std::span<const int> seq) {
  tokens.insert(tokens.end(), seq.begin(), seq.end());
  offsets.push_back(tokens.size());
}

// ---- attention ------------------------------------------------------------------

template <typename T>
Tensor<T> gated_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                          const GateValues<T>* gates, std::size_t layer, std::size_t n_heads,
                          std::span<const std::size_t> offsets, const BatchHooks* hooks,
                          std::vector<std::vector<double>>* captured) {
  const auto n = q.rows(), d = q.cols();
  if (k.shape() != q.shape() || v.shape() != q.shape())
    throw DimensionError("gated_attention: q/k/v shapes differ");
  if (d % n_heads != 0) throw DimensionError("gated_attention: width not divisible by heads");
  if (offsets.empty() || offsets.back() != n) throw DimensionError("gated_attention: offsets do not cover rows");
  const auto dk = d / n_heads;
  const auto n_seg = offsets.size() - 1;
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));

  if (gates && (gates->values.rows() <= layer || gates->values.cols() != n_heads))
    throw DimensionError("gated_attention: gate matrix " + shape_string(gates->values.shape()) +
                         " has no row for layer " + std::to_string(layer));

  // Patched rows: patch_row[(seg*H + h)] -> list of (position, value index).
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> patched(n_seg * n_heads);
  if (hooks) {
    for (std::size_t i = 0; i < hooks->patches.size(); ++i) {
      const auto& [seg, patch] = hooks->patches[i];
      if (patch.site.layer != layer) continue;
      if (seg >= n_seg || patch.site.head >= n_heads || patch.site.position >= offsets[seg + 1] - offsets[seg])
        throw PatchError("patch site (layer " + std::to_string(layer) + ", head " +
                         std::to_string(patch.site.head) + ", position " + std::to_string(patch.site.position) +
                         ") outside the sequence");
      if (patch.value.size() != dk)
        throw PatchError("patch vector has length " + std::to_string(patch.value.size()) + ", expected d_k = " +
                         std::to_string(dk));
      patched[seg * n_heads + patch.site.head].emplace_back(patch.site.position, i);
    }
  }

  std::vector<T> z(n * d);
  // Saved per (segment, head): attention probabilities and un-gated A.V.
  std::vector<std::vector<T>> probs(n_seg * n_heads), av(n_seg * n_heads);
  const auto qd = q.data(), kd = k.data(), vd = v.data();

  for (std::size_t s = 0; s < n_seg; ++s) {
    const auto off = offsets[s];
    const auto len = offsets[s + 1] - off;
    if (len == 0) continue;
    for (std::size_t h = 0; h < n_heads; ++h) {
      StridedConst<T> qh(qd.data() + off * d + h * dk, len, dk, Eigen::OuterStride<>(d));
      StridedConst<T> kh(kd.data() + off * d + h * dk, len, dk, Eigen::OuterStride<>(d));
      StridedConst<T> vh(vd.data() + off * d + h * dk, len, dk, Eigen::OuterStride<>(d));
      RowMat<T> scores = qh * kh.transpose();
      auto& p = probs[s * n_heads + h];
      p.resize(len * len);
      for (std::size_t i = 0; i < len; ++i)
        causal_softmax_row(scores.data() + i * len, scale, i + 1, len, p.data() + i * len);
      auto& o = av[s * n_heads + h];
      o.resize(len * dk);
      Eigen::Map<RowMat<T>> om(o.data(), len, dk);
      om.noalias() = Eigen::Map<const RowMat<T>>(p.data(), len, len) * vh;

      const T g = gates ? gates->values.data()[layer * n_heads + h] : T(1);
      const bool skip = !gates || (g == T(1) && !gates->values.requires_grad());
      StridedMut<T> zh(z.data() + off * d + h * dk, len, dk, Eigen::OuterStride<>(d));
      if (skip)
        zh = om;
      else
        zh = om * g;
      for (const auto& [pos, idx] : patched[s * n_heads + h]) {
        const auto& val = hooks->patches[idx].second.value;
        for (std::size_t j = 0; j < dk; ++j) zh(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(j)) = static_cast<T>(val[j]);
      }
    }
  }

  if (hooks && captured) {
    if (captured->size() < hooks->captures.size()) captured->resize(hooks->captures.size());
    for (std::size_t i = 0; i < hooks->captures.size(); ++i) {
      const auto& [seg, site] = hooks->captures[i];
      if (site.layer != layer) continue;
      if (seg >= n_seg || site.head >= n_heads || site.position >= offsets[seg + 1] - offsets[seg])
        throw ProbeError("probe (layer " + std::to_string(site.layer) + ", head " + std::to_string(site.head) +
                         ", position " + std::to_string(site.position) + ") outside the sequence");
      const T* row = z.data() + (offsets[seg] + site.position) * d + site.head * dk;
      (*captured)[i].assign(row, row + dk);
    }
  }

  auto out = Tensor<T>::from({n, d}, std::move(z));
  const bool gate_grad = gates && gates->values.requires_grad();
  if (q.requires_grad() || k.requires_grad() || v.requires_grad() || gate_grad) {
    std::vector<std::size_t> offs(offsets.begin(), offsets.end());
    std::optional<Tensor<T>> gate_tensor;
    if (gates) gate_tensor = gates->values;
    tape.record(out, "gated_attention",
                [q, k, v, out, gate_tensor, layer, n_heads, dk, d, scale, offs = std::move(offs),
                 probs = std::move(probs), av = std::move(av), patched = std::move(patched)] {
                  const auto gz = out.grad_buffer();
                  const auto qd = q.data(), kd = k.data(), vd = v.data();
                  const bool need_qkv = q.requires_grad() || k.requires_grad() || v.requires_grad();
                  const bool need_gate = gate_tensor && gate_tensor->requires_grad();
                  const auto n_seg = offs.size() - 1;
                  for (std::size_t s = 0; s < n_seg; ++s) {
                    const auto off = offs[s];
                    const auto len = offs[s + 1] - off;
                    if (len == 0) continue;
                    for (std::size_t h = 0; h < n_heads; ++h) {
                      const auto idx = s * n_heads + h;
                      const T g = gate_tensor ? gate_tensor->data()[layer * n_heads + h] : T(1);
                      // dZ with patched rows removed: those rows do not depend on A.V or g.
                      RowMat<T> dz = StridedConst<T>(gz.data() + off * d + h * dk, len, dk, Eigen::OuterStride<>(d));
                      for (const auto& pr : patched[idx]) dz.row(static_cast<Eigen::Index>(pr.first)).setZero();
                      Eigen::Map<const RowMat<T>> o(av[idx].data(), len, dk);
                      if (need_gate) {
                        T acc = T(0);
                        for (std::size_t i = 0; i < len * dk; ++i) acc += dz.data()[i] * o.data()[i];
                        gate_tensor->grad_buffer()[layer * n_heads + h] += acc;
                      }
                      if (!need_qkv) continue;
                      RowMat<T> d_o = dz * g;
                      Eigen::Map<const RowMat<T>> p(probs[idx].data(), len, len);
                      StridedConst<T> qh(qd.data() + off * d + h * dk, len, dk, Eigen::OuterStride<>(d));
                      StridedConst<T> kh(kd.data() + off * d + h * dk, len, dk, Eigen::OuterStride<>(d));
                      StridedConst<T> vh(vd.data() + off * d + h * dk, len, dk, Eigen::OuterStride<>(d));
                      if (v.requires_grad()) {
                        StridedMut<T> gv(v.grad_buffer().data() + off * d + h * dk, len, dk, Eigen::OuterStride<>(d));
                        gv.noalias() += p.transpose() * d_o;
                      }
                      if (!q.requires_grad() && !k.requires_grad()) continue;
                      RowMat<T> dp = d_o * vh.transpose();
                      RowMat<T> ds(len, len);
                      for (std::size_t i = 0; i < len; ++i) {
                        T dot = T(0);
                        for (std::size_t j = 0; j <= i; ++j) dot += p(i, j) * dp(i, j);
                        for (std::size_t j = 0; j <= i; ++j) ds(i, j) = scale * p(i, j) * (dp(i, j) - dot);
                        for (std::size_t j = i + 1; j < len; ++j) ds(i, j) = T(0);
                      }
                      if (q.requires_grad()) {
                        StridedMut<T> gq(q.grad_buffer().data() + off * d + h * dk, len, dk, Eigen::OuterStride<>(d));
                        gq.noalias() += ds * kh;
                      }
                      if (k.requires_grad()) {
                        StridedMut<T> gk(k.grad_buffer().data() + off * d + h * dk, len, dk, Eigen::OuterStride<>(d));
                        gk.noalias() += ds.transpose() * qh;
                      }
                    }
                  }
                });
  }
  return out;
}

// ---- forward --------------------------------------------------------------------

template <typename T>
Tensor<T> forward_packed(Tape<T>& tape, const Weights<T>& w, const PackedSequences& seqs,
                         const GateValues<T>* gates, const BatchHooks* hooks,
                         std::vector<std::vector<double>>* captured) {
  const auto& c = w.config;
  if (seqs.tokens.empty()) throw InvalidBatchError("forward: empty token sequence");
  std::vector<int> positions(seqs.tokens.size());
  for (std::size_t s = 0; s < seqs.n_segments(); ++s) {
    const auto len = seqs.length(s);
    if (len > c.max_seq_len)
      throw DimensionError("forward: sequence of length " + std::to_string(len) + " exceeds max_seq_len " +
                           std::to_string(c.max_seq_len));
    for (std::size_t t = 0; t < len; ++t) positions[seqs.offsets[s] + t] = static_cast<int>(t);
  }
  for (int id : seqs.tokens)
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size)
      throw VocabularyError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(c.vocab_size));
  if (gates && (gates->values.rows() != c.n_layers || gates->values.cols() != c.n_heads))
    throw DimensionError("forward: gate matrix " + shape_string(gates->values.shape()) + " for a " +
                         std::to_string(c.n_layers) + "x" + std::to_string(c.n_heads) + " model");
  if (captured && hooks) captured->assign(hooks->captures.size(), {});

  const T eps = static_cast<T>(c.norm_eps);
  auto x = add(tape, embedding(tape, w.tok_embed, seqs.tokens), embedding(tape, w.pos_embed, positions));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& lw = w.layers[l];
    auto h = rmsnorm(tape, x, lw.attn_norm, eps);
    auto q = matmul(tape, h, lw.wq);
    auto k = matmul(tape, h, lw.wk);
    auto v = matmul(tape, h, lw.wv);
    auto z = gated_attention(tape, q, k, v, gates, l, c.n_heads, seqs.offsets, hooks, captured);
    x = add(tape, x, matmul(tape, z, lw.wo));
    auto h2 = rmsnorm(tape, x, lw.mlp_norm, eps);
    x = add(tape, x, matmul(tape, silu(tape, matmul(tape, h2, lw.w_in)), lw.w_out));
  }
  return matmul(tape, rmsnorm(tape, x, w.final_norm, eps), w.unembed);
}

template <typename T>
Tensor<T> forward(const Weights<T>& w, std::span<const int> tokens, const GateMatrix& gates) {
  Tape<T> tape;
  PackedSequences seqs;
  seqs.append(tokens);
  const auto gv = gate_values<T>(gates);
  return forward_packed(tape, w, seqs, &gv);
}

template <typename T>
Tensor<T> forward_ungated(const Weights<T>& w, std::span<const int> tokens) {
  Tape<T> tape;
  PackedSequences seqs;
  seqs.append(tokens);
  return forward_packed<T>(tape, w, seqs, nullptr);
}

template <typename T>
std::pair<Tensor<T>, CapturedActivations> forward_with_capture(const Weights<T>& w,
                                                               std::span<const int> tokens,
                                                               const GateMatrix& gates,
                                                               std::span<const HeadSite> probes) {
  for (const auto& p : probes) {
    if (p.position >= tokens.size() || p.layer >= w.config.n_layers || p.head >= w.config.n_heads)
      throw ProbeError("probe (layer " + std::to_string(p.layer) + ", head " + std::to_string(p.head) +
                       ", position " + std::to_string(p.position) + ") out of range");
  }
  Tape<T> tape;
  PackedSequences seqs;
  seqs.append(tokens);
  BatchHooks hooks;
  for (const auto& p : probes) hooks.captures.emplace_back(0, p);
  std::vector<std::vector<double>> values;
  const auto gv = gate_values<T>(gates);
  auto logits = forward_packed(tape, w, seqs, &gv, &hooks, &values);
  CapturedActivations cap;
  cap.sites.assign(probes.begin(), probes.end());
  cap.values = std::move(values);
  return {std::move(logits), std::move(cap)};
}

template <typename T>
Tensor<T> forward_with_patch(const Weights<T>& w, std::span<const int> tokens, const GateMatrix& gates,
                             std::span<const HeadPatch> patches) {
  for (const auto& p : patches) {
    if (p.value.size() != w.config.d_head())
      throw PatchError("patch vector has length " + std::to_string(p.value.size()) + ", expected d_k = " +
                       std::to_string(w.config.d_head()));
    if (p.site.position >= tokens.size() || p.site.layer >= w.config.n_layers || p.site.head >= w.config.n_heads)
      throw PatchError("patch site out of range");
  }
  Tape<T> tape;
  PackedSequences seqs;
  seqs.append(tokens);
  BatchHooks hooks;
  for (const auto& p : patches) hooks.patches.emplace_back(0, p);
  const auto gv = gate_values<T>(gates);
  return forward_packed(tape, w, seqs, &gv, &hooks);
}

#define CHG_INSTANTIATE(T)                                                                                  \
  template struct Weights<T>;                                                                               \
  template GateValues<T> gate_values<T>(const GateMatrix&);                                                 \
  template Tensor<T> gated_attention(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                     const GateValues<T>*, std::size_t, std::size_t,                        \
                                     std::span<const std::size_t>, const BatchHooks*,                       \
                                     std::vector<std::vector<double>>*);                                    \
  template Tensor<T> forward_packed(Tape<T>&, const Weights<T>&, const PackedSequences&,                    \
                                    const GateValues<T>*, const BatchHooks*,                                \
                                    std::vector<std::vector<double>>*);                                     \
  template Tensor<T> forward(const Weights<T>&, std::span<const int>, const GateMatrix&);                   \
  template Tensor<T> forward_ungated(const Weights<T>&, std::span<const int>);                              \
  template std::pair<Tensor<T>, CapturedActivations> forward_with_capture(                                  \
      const Weights<T>&, std::span<const int>, const GateMatrix&, std::span<const HeadSite>);               \
  template Tensor<T> forward_with_patch(const Weights<T>&, std::span<const int>, const GateMatrix&,         \
                                        std::span<const HeadPatch>);

CHG_INSTANTIATE(float)
CHG_INSTANTIATE(double)

#undef CHG_INSTANTIATE

template Weights<double> weights_cast<double, float>(const Weights<float>&);
template Weights<float> weights_cast<float, double>(const Weights<double>&);
template Weights<float> weights_cast<float, float>(const Weights<float>&);

}  // namespace chg
