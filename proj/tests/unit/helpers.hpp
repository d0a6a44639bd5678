#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "chg/model.hpp"
#include "chg/rng.hpp"
#include "chg/tasks.hpp"
#include "chg/tensor.hpp"

namespace testing {

inline chg::ModelConfig small_config(std::size_t layers = 2, std::size_t heads = 4, std::size_t d = 16,
                                     std::size_t vocab = 64, std::size_t max_len = 48) {
  chg::ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d;
  c.d_ff = 4 * d;
  c.vocab_size = vocab;
  c.max_seq_len = max_len;
  return c;
}

// Init weights, then rescale so activations are far from the identity regime
// (the 0.02 init makes every head nearly irrelevant).
inline chg::ModelCheckpoint lively_model(const chg::ModelConfig& c, std::uint64_t seed) {
  auto w = chg::init_weights(c, seed);
  chg::Rng rng(seed ^ 0x5eed);
  for (auto t : w.parameters())
    for (auto& x : t.mutable_data()) x = static_cast<float>(x * 25.0 + (t.rank() == 1 ? 0.3 * rng.normal() : 0.0));
  return w;
}

inline std::vector<int> random_tokens(chg::Rng& rng, std::size_t n, int vocab) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(vocab)));
  return t;
}

inline double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nb), 1e-30});
}

template <typename T>
std::vector<double> to_doubles(std::span<const T> s) {
  return std::vector<double>(s.begin(), s.end());
}

// Straight-line double-precision forward written from the architecture
// description: every head's block of the concatenation is scaled explicitly.
// `zero_block` (layer, head, position) entries are set to 0 after scaling,
// `blocks` receives every post-gate block, `replace` substitutes all of them
// and `patch` substitutes single sites.
struct NaiveSite {
  std::size_t layer, head, pos;
};
using NaivePatch = std::pair<NaiveSite, std::vector<double>>;

inline std::vector<double> naive_forward(const chg::ModelCheckpoint& w, const std::vector<int>& tokens,
                                         const std::vector<double>& gates,
                                         const std::vector<NaiveSite>& zero_block = {},
                                         std::vector<std::vector<std::vector<double>>>* blocks = nullptr,
                                         const std::vector<std::vector<std::vector<double>>>* replace = nullptr,
                                         const std::vector<NaivePatch>& patch = {}) {
  const auto& c = w.config;
  const std::size_t n = tokens.size(), d = c.d_model, H = c.n_heads, dk = d / H, V = c.vocab_size;
  auto W = [](const chg::Tensor<float>& t, std::size_t i, std::size_t j) { return static_cast<double>(t.at(i, j)); };
  auto vec = [](const chg::Tensor<float>& t, std::size_t i) { return static_cast<double>(t.data()[i]); };
  auto rms = [&](const std::vector<double>& row, const chg::Tensor<float>& g) {
    double ms = 0.0;
    for (double v : row) ms += v * v;
    ms /= static_cast<double>(row.size());
    const double inv = 1.0 / std::sqrt(ms + c.norm_eps);
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] * inv * vec(g, i);
    return out;
  };
  auto mat = [&](const std::vector<double>& row, const chg::Tensor<float>& m) {
    std::vector<double> out(m.cols(), 0.0);
    for (std::size_t i = 0; i < row.size(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) out[j] += row[i] * W(m, i, j);
    return out;
  };
  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d; ++i) x[t][i] = W(w.tok_embed, tokens[t], i) + W(w.pos_embed, t, i);
  if (blocks) blocks->assign(c.n_layers * H, std::vector<std::vector<double>>(n));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& lw = w.layers[l];
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const auto h = rms(x[t], lw.attn_norm);
      q[t] = mat(h, lw.wq);
      k[t] = mat(h, lw.wk);
      v[t] = mat(h, lw.wv);
    }
    std::vector<std::vector<double>> concat(n, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t t = 0; t < n; ++t) {
        std::vector<double> s(t + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= t; ++j) {
          double dot = 0.0;
          for (std::size_t e = 0; e < dk; ++e) dot += q[t][hd * dk + e] * k[j][hd * dk + e];
          s[j] = dot / std::sqrt(static_cast<double>(dk));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        std::vector<double> block(dk, 0.0);
        for (std::size_t j = 0; j <= t; ++j)
          for (std::size_t e = 0; e < dk; ++e) block[e] += s[j] / z * v[j][hd * dk + e];
        const double g = gates[l * H + hd];
        for (auto& e : block) e *= g;
        for (const auto& zb : zero_block)
          if (zb.layer == l && zb.head == hd && zb.pos == t) std::fill(block.begin(), block.end(), 0.0);
        if (replace) block = (*replace)[l * H + hd][t];
        for (const auto& [site, value] : patch)
          if (site.layer == l && site.head == hd && site.pos == t) block = value;
        if (blocks) (*blocks)[l * H + hd][t] = block;
        for (std::size_t e = 0; e < dk; ++e) concat[t][hd * dk + e] = block[e];
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      const auto o = mat(concat[t], lw.wo);
      for (std::size_t i = 0; i < d; ++i) x[t][i] += o[i];
      auto a = mat(rms(x[t], lw.mlp_norm), lw.w_in);
      for (auto& e : a) e = e / (1.0 + std::exp(-e));
      const auto m = mat(a, lw.w_out);
      for (std::size_t i = 0; i < d; ++i) x[t][i] += m[i];
    }
  }
  std::vector<double> logits;
  logits.reserve(n * V);
  for (std::size_t t = 0; t < n; ++t) {
    const auto out = mat(rms(x[t], w.final_norm), w.unembed);
    logits.insert(logits.end(), out.begin(), out.end());
  }
  return logits;
}

// ---- gradient checking -------------------------------------------------------

struct Inputs {
  std::vector<chg::Shape> shapes;
  std::vector<std::vector<double>> values;

  void add(chg::Shape shape, chg::Rng& rng, double spread = 1.0) {
    std::vector<double> v(chg::shape_numel(shape));
    for (auto& x : v) x = spread * rng.normal();
    shapes.push_back(std::move(shape));
    values.push_back(std::move(v));
  }
};

// Gradient of f's scalar output w.r.t. every input, flattened, via the tape.
template <typename T, typename F>
std::vector<double> tape_grad(const Inputs& in, F f) {
  std::vector<chg::Tensor<T>> xs;
  for (std::size_t i = 0; i < in.shapes.size(); ++i)
    xs.push_back(chg::Tensor<T>::parameter(in.shapes[i], std::vector<T>(in.values[i].begin(), in.values[i].end())));
  chg::Tape<T> tape;
  const auto out = f(tape, xs);
  tape.backward(out);
  std::vector<double> g;
  for (const auto& x : xs)
    for (T v : x.grad()) g.push_back(static_cast<double>(v));
  return g;
}

// Central differences in double precision.
template <typename F>
std::vector<double> fd_grad(const Inputs& in, F f, double h) {
  auto eval = [&](const std::vector<std::vector<double>>& vals) {
    std::vector<chg::Tensor<double>> xs;
    for (std::size_t i = 0; i < in.shapes.size(); ++i) xs.push_back(chg::Tensor<double>::from(in.shapes[i], vals[i]));
    chg::Tape<double> tape;
    return f(tape, xs).item();
  };
  std::vector<double> g;
  auto vals = in.values;
  for (std::size_t i = 0; i < vals.size(); ++i)
    for (std::size_t j = 0; j < vals[i].size(); ++j) {
      const double x0 = vals[i][j];
      vals[i][j] = x0 + h;
      const double up = eval(vals);
      vals[i][j] = x0 - h;
      const double down = eval(vals);
      vals[i][j] = x0;
      g.push_back((up - down) / (2.0 * h));
    }
  return g;
}

// Reduces a tensor to a scalar with fixed pseudo-random weights so every
// output element contributes a distinct amount.
template <typename T>
chg::Tensor<T> project(chg::Tape<T>& tape, const chg::Tensor<T>& x, std::uint64_t seed = 99) {
  chg::Rng rng(seed);
  std::vector<T> w(x.numel());
  for (auto& v : w) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return chg::sum(tape, chg::mul(tape, x, chg::Tensor<T>::from(x.shape(), std::move(w))));
}

}  // namespace testing
