#include "chg/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace chg {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_string(s));
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<T>(n, T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data) {
  if (shape_numel(shape) != data.size())
    throw DimensionError("tensor: shape " + shape_string(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> data) {
  Tensor t = from(std::move(shape), std::move(data));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item(): tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  if (impl_->frozen) on = false;
  impl_->requires_grad = on;
  if (on && impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
  if (!on) impl_->grad.clear();
}

template <typename T>
void Tensor<T>::freeze() {
  impl_->frozen = true;
  set_requires_grad(false);
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::deep_copy() const {
  Tensor t = from(impl_->shape, impl_->data);
  t.impl_->frozen = impl_->frozen;
  t.set_requires_grad(impl_->requires_grad);
  return t;
}

// ---- Tape -----------------------------------------------------------------

template <typename T>
void Tape<T>::record(Tensor<T>& out, const char* op, BackwardFn backward) {
  if (consumed_) {
    // A new forward after backward starts a fresh tape.
    nodes_.clear();
    consumed_ = false;
    ++generation_;
  }
  auto& impl = *out.impl_;
  impl.requires_grad = true;
  impl.grad.assign(impl.data.size(), T(0));
  impl.tape_id = static_cast<std::int64_t>(nodes_.size());
  impl.tape = this;
  impl.tape_generation = generation_;
  nodes_.push_back(Node{op, std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw StaleTapeError("backward: undefined loss tensor");
  if (loss.numel() != 1)
    throw DimensionError("backward: loss must be scalar, got " + shape_string(loss.shape()));
  const auto& impl = *loss.impl_;
  if (impl.tape != this || impl.tape_id < 0)
    throw StaleTapeError("backward: loss was not recorded on this tape");
  if (consumed_ || impl.tape_generation != generation_)
    throw StaleTapeError("backward: tape already consumed; re-run the forward pass first");
  loss.impl_->grad[0] = T(1);
  for (std::size_t i = static_cast<std::size_t>(impl.tape_id) + 1; i-- > 0;) nodes_[i].backward();
  consumed_ = true;
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  consumed_ = false;
  ++generation_;
}

// ---- ops ------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul");
  require_rank2(b.shape(), "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out_data(m * n);
  {
    ConstMap<T> am(a.data().data(), m, k), bm(b.data().data(), k, n);
    MutMap<T> om(out_data.data(), m, n);
    om.noalias() = am * bm;
  }
  auto out = Tensor<T>::from({m, n}, std::move(out_data));
  if (any_requires_grad({&a, &b})) {
    tape.record(out, "matmul", [a, b, out, m, k, n] {
      ConstMap<T> g(out.grad_buffer().data(), m, n);
      if (a.requires_grad()) {
        MutMap<T> ga(a.grad_buffer().data(), m, k);
        ga.noalias() += g * ConstMap<T>(b.data().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        MutMap<T> gb(b.grad_buffer().data(), k, n);
        gb.noalias() += ConstMap<T>(a.data().data(), m, k).transpose() * g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out_data(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = ad[i] + bd[i];
  auto out = Tensor<T>::from(a.shape(), std::move(out_data));
  if (any_requires_grad({&a, &b})) {
    tape.record(out, "add", [a, b, out] {
      auto g = out.grad_buffer();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out_data(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = ad[i] - bd[i];
  auto out = Tensor<T>::from(a.shape(), std::move(out_data));
  if (any_requires_grad({&a, &b})) {
    tape.record(out, "sub", [a, b, out] {
      auto g = out.grad_buffer();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out_data(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = ad[i] * bd[i];
  auto out = Tensor<T>::from(a.shape(), std::move(out_data));
  if (any_requires_grad({&a, &b})) {
    tape.record(out, "mul", [a, b, out] {
      auto g = out.grad_buffer();
      auto ad = a.data(), bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  std::vector<T> out_data(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = xd[i] * factor;
  auto out = Tensor<T>::from(x.shape(), std::move(out_data));
  if (x.requires_grad()) {
    tape.record(out, "scale", [x, out, factor] {
      auto g = out.grad_buffer();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto out = Tensor<T>::scalar(acc);
  if (x.requires_grad()) {
    tape.record(out, "sum", [x, out] {
      const T g = out.grad_buffer()[0];
      for (auto& gx : x.grad_buffer()) gx += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  std::vector<T> out_data(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = T(1) / (T(1) + std::exp(-xd[i]));
  auto out = Tensor<T>::from(x.shape(), std::move(out_data));
  if (x.requires_grad()) {
    tape.record(out, "sigmoid", [x, out] {
      auto g = out.grad_buffer();
      auto y = out.data();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

// Eigen's vectorized exp and its scalar fallback round differently, and
// which elements take which path depends on the destination's alignment. The
// SiLU kernels therefore run on fixed-size aligned scratch blocks, so the split
// depends only on the element index.
template <typename T, typename Kernel>
void for_aligned_blocks(std::size_t n, Kernel&& kernel) {
  constexpr std::size_t kBlock = 256;
  for (std::size_t start = 0; start < n; start += kBlock) kernel(start, std::min(kBlock, n - start));
}

template <typename T>
Tensor<T> silu(Tape<T>& tape, const Tensor<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using AlignedMap = Eigen::Map<Arr, Eigen::Aligned64>;
  std::vector<T> out_data(x.numel());
  for_aligned_blocks<T>(x.numel(), [&](std::size_t start, std::size_t len) {
    alignas(64) T xb[256], yb[256];
    std::copy_n(x.data().data() + start, len, xb);
    const auto n = static_cast<Eigen::Index>(len);
    AlignedMap xa(xb, n);
    AlignedMap(yb, n) = xa / (T(1) + (-xa).exp());
    std::copy_n(yb, len, out_data.data() + start);
  });
  auto out = Tensor<T>::from(x.shape(), std::move(out_data));
  if (x.requires_grad()) {
    tape.record(out, "silu", [x, out] {
      const auto xd = x.data();
      const auto g = out.grad_buffer();
      auto gx = x.grad_buffer();
      for_aligned_blocks<T>(xd.size(), [&](std::size_t start, std::size_t len) {
        alignas(64) T xb[256], gb[256], db[256];
        std::copy_n(xd.data() + start, len, xb);
        std::copy_n(g.data() + start, len, gb);
        const auto n = static_cast<Eigen::Index>(len);
        AlignedMap xa(xb, n), ga(gb, n);
        AlignedMap sa(db, n);
        sa = T(1) / (T(1) + (-xa).exp());
        sa = ga * sa * (T(1) + xa * (T(1) - sa));
        for (std::size_t i = 0; i < len; ++i) gx[start + i] += db[i];
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> clamp(Tape<T>& tape, const Tensor<T>& x, T lo, T hi) {
  std::vector<T> out_data(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = std::clamp(xd[i], lo, hi);
  auto out = Tensor<T>::from(x.shape(), std::move(out_data));
  if (x.requires_grad()) {
    tape.record(out, "clamp", [x, out, lo, hi] {
      auto g = out.grad_buffer();
      auto xd = x.data();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xd[i] >= lo && xd[i] <= hi) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> min_scalar(Tape<T>& tape, const Tensor<T>& x, T ceiling) {
  const T v = x.item();
  auto out = Tensor<T>::scalar(std::min(v, ceiling));
  if (x.requires_grad()) {
    tape.record(out, "min_scalar", [x, out, v, ceiling] {
      if (v < ceiling) x.grad_buffer()[0] += out.grad_buffer()[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const int> ids) {
  require_rank2(table.shape(), "embedding");
  const auto vocab = table.rows(), d = table.cols();
  std::vector<T> out_data(ids.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw VocabularyError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                            std::to_string(vocab) + " rows");
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out_data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  auto out = Tensor<T>::from({ids.size(), d}, std::move(out_data));
  if (table.requires_grad()) {
    std::vector<int> id_copy(ids.begin(), ids.end());
    tape.record(out, "embedding", [table, out, id_copy = std::move(id_copy), d] {
      auto g = out.grad_buffer();
      auto gt = table.grad_buffer();
      for (std::size_t i = 0; i < id_copy.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(id_copy[i]) * d + j] += g[i * d + j];
    });
  }
  return out;
}

template <typename T>
void causal_softmax_row(const T* scores, T scale, std::size_t n_valid, std::size_t n_total, T* out) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n_valid; ++j) mx = std::max(mx, scores[j] * scale);
  T denom = T(0);
  for (std::size_t j = 0; j < n_valid; ++j) {
    out[j] = std::exp(scores[j] * scale - mx);
    denom += out[j];
  }
  const T inv = T(1) / denom;
  for (std::size_t j = 0; j < n_valid; ++j) out[j] *= inv;
  for (std::size_t j = n_valid; j < n_total; ++j) out[j] = T(0);
}

template <typename T>
Tensor<T> softmax_causal(Tape<T>& tape, const Tensor<T>& scores, T scale) {
  require_rank2(scores.shape(), "softmax_causal");
  const auto n = scores.rows();
  if (scores.cols() != n)
    throw DimensionError("softmax_causal: score matrix must be square, got " +
                         shape_string(scores.shape()));
  std::vector<T> out_data(n * n);
  auto sd = scores.data();
  for (std::size_t i = 0; i < n; ++i) causal_softmax_row(sd.data() + i * n, scale, i + 1, n, out_data.data() + i * n);
  auto out = Tensor<T>::from({n, n}, std::move(out_data));
  if (scores.requires_grad()) {
    tape.record(out, "softmax_causal", [scores, out, n, scale] {
      auto g = out.grad_buffer();
      auto p = out.data();
      auto gs = scores.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        T dot = T(0);
        for (std::size_t j = 0; j <= i; ++j) dot += p[i * n + j] * g[i * n + j];
        for (std::size_t j = 0; j <= i; ++j) gs[i * n + j] += scale * p[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> rmsnorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, T eps) {
  require_rank2(x.shape(), "rmsnorm");
  if (!(eps > T(0))) throw DimensionError("rmsnorm: eps must be positive");
  const auto rows = x.rows(), d = x.cols();
  if (weight.numel() != d)
    throw DimensionError("rmsnorm: weight " + shape_string(weight.shape()) + " does not match rows of " +
                         shape_string(x.shape()));
  std::vector<T> out_data(rows * d);
  std::vector<T> inv_rms(rows);
  auto xd = x.data();
  auto wd = weight.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * d;
    T ss = T(0);
    for (std::size_t j = 0; j < d; ++j) ss += row[j] * row[j];
    inv_rms[r] = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out_data[r * d + j] = row[j] * inv_rms[r] * wd[j];
  }
  auto out = Tensor<T>::from(x.shape(), std::move(out_data));
  if (any_requires_grad({&x, &weight})) {
    tape.record(out, "rmsnorm", [x, weight, out, inv_rms = std::move(inv_rms), rows, d] {
      auto g = out.grad_buffer();
      auto xd = x.data();
      auto wd = weight.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xd.data() + r * d;
        const T* gr = g.data() + r * d;
        const T ir = inv_rms[r];
        if (x.requires_grad()) {
          T dot = T(0);
          for (std::size_t j = 0; j < d; ++j) dot += gr[j] * wd[j] * row[j];
          const T coeff = ir * ir * ir * dot / static_cast<T>(d);
          T* gx = x.grad_buffer().data() + r * d;
          for (std::size_t j = 0; j < d; ++j) gx[j] += ir * wd[j] * gr[j] - row[j] * coeff;
        }
        if (weight.requires_grad()) {
          auto gw = weight.grad_buffer();
          for (std::size_t j = 0; j < d; ++j) gw[j] += gr[j] * row[j] * ir;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> targets,
                        std::span<const std::uint8_t> mask) {
  require_rank2(logits.shape(), "cross_entropy");
  const auto rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows || mask.size() != rows)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries for logits " +
                         shape_string(logits.shape()));
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab)
      throw VocabularyError("cross_entropy: target id " + std::to_string(targets[r]) +
                            " outside vocabulary of " + std::to_string(vocab));
    ++count;
  }
  if (count == 0) throw InvalidBatchError("cross_entropy: mask selects no positions");

  auto ld = logits.data();
  std::vector<T> lse(rows, T(0));
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const T* row = ld.data() + r * vocab;
    T mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    T s = T(0);
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(row[j] - mx);
    lse[r] = mx + std::log(s);
    total += lse[r] - row[targets[r]];
  }
  const T inv_count = T(1) / static_cast<T>(count);
  auto out = Tensor<T>::scalar(total * inv_count);
  if (logits.requires_grad()) {
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    tape.record(out, "cross_entropy",
                [logits, out, tgt = std::move(tgt), msk = std::move(msk), lse = std::move(lse), rows, vocab,
                 inv_count] {
                  const T g = out.grad_buffer()[0] * inv_count;
                  auto ld = logits.data();
                  auto gl = logits.grad_buffer();
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (!msk[r]) continue;
                    for (std::size_t j = 0; j < vocab; ++j)
                      gl[r * vocab + j] += g * std::exp(ld[r * vocab + j] - lse[r]);
                    gl[r * vocab + static_cast<std::size_t>(tgt[r])] -= g;
                  }
                });
  }
  return out;
}

template <typename T>
std::vector<T> log_softmax_rows(const Tensor<T>& logits) {
  require_rank2(logits.shape(), "log_softmax_rows");
  const auto rows = logits.rows(), vocab = logits.cols();
  auto ld = logits.data();
  std::vector<T> out(rows * vocab);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = ld.data() + r * vocab;
    T mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    T s = T(0);
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < vocab; ++j) out[r * vocab + j] = row[j] - lse;
  }
  return out;
}

#define CHG_INSTANTIATE(T)                                                                          \
  template class Tensor<T>;                                                                         \
  template class Tape<T>;                                                                           \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sub(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                          \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                               \
  template Tensor<T> sigmoid(Tape<T>&, const Tensor<T>&);                                           \
  template Tensor<T> silu(Tape<T>&, const Tensor<T>&);                                              \
  template Tensor<T> clamp(Tape<T>&, const Tensor<T>&, T, T);                                       \
  template Tensor<T> min_scalar(Tape<T>&, const Tensor<T>&, T);                                     \
  template Tensor<T> embedding(Tape<T>&, const Tensor<T>&, std::span<const int>);                   \
  template Tensor<T> softmax_causal(Tape<T>&, const Tensor<T>&, T);                                 \
  template Tensor<T> rmsnorm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, T);                      \
  template Tensor<T> cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const int>,                \
                                   std::span<const std::uint8_t>);                                  \
  template std::vector<T> log_softmax_rows(const Tensor<T>&);                                       \
  template void causal_softmax_row(const T*, T, std::size_t, std::size_t, T*);

CHG_INSTANTIATE(float)
CHG_INSTANTIATE(double)

#undef CHG_INSTANTIATE

}  // namespace chg
