#include "chg/fit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

#include "chg/io.hpp"
#include "chg/rng.hpp"
#include "chg/train.hpp"

namespace chg {

void FitConfig::validate() const {
  if (!(s_max > 0.0)) throw ConfigError("fit config: 's_max' must be positive");
  if (!std::isfinite(s0)) throw ConfigError("fit config: 's0' must be finite");
  if (!(lr > 0.0)) throw ConfigError("fit config: 'lr' must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("fit config: 'beta1' must be in [0,1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("fit config: 'beta2' must be in [0,1)");
  if (!(eps > 0.0)) throw ConfigError("fit config: 'eps' must be positive");
  if (steps == 0) throw ConfigError("fit config: 'steps' must be positive");
  if (batch_size == 0) throw ConfigError("fit config: 'batch_size' must be positive");
  if (!std::isfinite(lambda_plus) || !std::isfinite(lambda_minus))
    throw ConfigError("fit config: lambda values must be finite");
  if (!(alpha >= 0.0)) throw ConfigError("fit config: 'alpha' must be non-negative");
  if (!(tau > 0.0)) throw ConfigError("fit config: 'tau' must be positive");
}

std::string FitConfig::to_text() const {
  std::map<std::string, std::string> kv{
      {"lambda_plus", format_double(lambda_plus)},
      {"lambda_minus", format_double(lambda_minus)},
      {"s_max", format_double(s_max)},
      {"s0", format_double(s0)},
      {"lr", format_double(lr)},
      {"beta1", format_double(beta1)},
      {"beta2", format_double(beta2)},
      {"eps", format_double(eps)},
      {"warmup_steps", std::to_string(warmup_steps)},
      {"steps", std::to_string(steps)},
      {"batch_size", std::to_string(batch_size)},
      {"seed", std::to_string(seed)},
      {"alpha", format_double(alpha)},
      {"tau", format_double(tau)},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::string FitConfig::fingerprint() const { return sha256_hex(to_text()).substr(0, 16); }

// ---- loss -----------------------------------------------------------------------

template <typename T>
Tensor<T> chg_loss(Tape<T>& tape, const Weights<T>& w, const LossBatch& batch, const Tensor<T>& logits,
                   double lambda, double s_max) {
  const auto& c = w.config;
  if (logits.rank() != 2 || logits.dim(0) != c.n_layers || logits.dim(1) != c.n_heads)
    throw DimensionError("chg_loss: gate logits " + shape_string(logits.shape()) + " for a " +
                         std::to_string(c.n_layers) + "x" + std::to_string(c.n_heads) + " model");
  const auto clipped = clamp(tape, logits, static_cast<T>(-s_max), static_cast<T>(s_max));
  const GateValues<T> gv{sigmoid(tape, clipped), false};
  const auto out = forward_packed<T>(tape, w, batch.seqs, &gv);
  const auto nll = cross_entropy(tape, out, batch.targets, batch.mask);
  return add(tape, nll, scale(tape, sum(tape, clipped), static_cast<T>(-lambda)));
}

template <typename T>
double chg_loss_grad(const Weights<T>& w, const LossBatch& batch, std::span<const double> logits, double lambda,
                     double s_max, std::vector<double>* grad) {
  const auto& c = w.config;
  auto s = Tensor<T>::parameter({c.n_layers, c.n_heads}, std::vector<T>(logits.begin(), logits.end()));
  Tape<T> tape;
  const auto loss = chg_loss(tape, w, batch, s, lambda, s_max);
  const double value = static_cast<double>(loss.item());
  if (grad) {
    tape.backward(loss);
    grad->assign(s.grad().begin(), s.grad().end());
  }
  return value;
}

// ---- optimization -------------------------------------------------------------------

namespace {

template <typename T>
void require_frozen(const Weights<T>& w) {
  for (const auto& t : w.parameters())
    if (t.requires_grad()) throw ConfigError("fit: model weights must be frozen while fitting gates");
}

std::vector<std::size_t> draw_indices(Rng& rng, std::size_t pool, std::size_t n) {
  if (pool == 0) throw InvalidBatchError("fit: empty data set");
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_index(pool));
  return idx;
}

std::string offending_gates(std::span<const double> logits, std::span<const double> grad, std::size_t heads) {
  std::ostringstream os;
  bool any = false;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const bool bad = !std::isfinite(logits[i]) || (i < grad.size() && !std::isfinite(grad[i]));
    if (!bad) continue;
    os << " (" << i / heads << "," << i % heads << ")";
    any = true;
  }
  if (!any) {
    os << " none individually non-finite; logits:";
    for (std::size_t i = 0; i < logits.size(); ++i)
      os << " (" << i / heads << "," << i % heads << ")=" << format_sig9(logits[i]);
  }
  return os.str();
}

double to_float_precision(double x) { return static_cast<double>(static_cast<float>(x)); }

struct StepValues {
  double nll = 0.0;
  double forget = 0.0;
};

// Shared Adam loop on gate logits. `build` records the loss on the tape and
// returns it; logits are clamped after every update and rounded to float
// precision whatever T is, so nine significant digits in the CSV reproduce them.
template <typename T, typename Build>
std::vector<double> optimize_logits(const Weights<T>& w, std::vector<double> logits, std::size_t steps,
                                    const FitConfig& config, const std::string& phase,
                                    std::vector<TracePoint>* trace, Build&& build) {
  const auto& c = w.config;
  const std::size_t n = logits.size();
  AdamState<double> adam;
  const std::size_t sizes[] = {n};
  adam.reset(sizes);
  const AdamHyper hyper{config.lr, config.beta1, config.beta2, config.eps};
  std::vector<double> grad(n);
  for (std::size_t step = 1; step <= steps; ++step) {
    auto s = Tensor<T>::parameter({c.n_layers, c.n_heads}, std::vector<T>(logits.begin(), logits.end()));
    Tape<T> tape;
    StepValues sv;
    const auto loss = build(tape, s, sv);
    const double value = static_cast<double>(loss.item());
    tape.backward(loss);
    for (std::size_t i = 0; i < n; ++i) grad[i] = static_cast<double>(s.grad()[i]);
    if (!std::isfinite(value))
      throw NumericError("fit (" + phase + "): non-finite loss at step " + std::to_string(step) +
                         "; offending gates:" + offending_gates(logits, grad, c.n_heads));
    try {
      const std::span<double> p(logits);
      const std::span<const double> g(grad);
      adam_step<double>(std::span<const std::span<double>>(&p, 1), std::span<const std::span<const double>>(&g, 1),
                        adam, hyper);
    } catch (const NumericError&) {
      throw NumericError("fit (" + phase + "): non-finite gradient at step " + std::to_string(step) +
                         "; offending gates:" + offending_gates(logits, grad, c.n_heads));
    }
    for (auto& x : logits) x = to_float_precision(std::clamp(x, -config.s_max, config.s_max));
    if (trace) trace->push_back({phase, step, value, sv.nll, sv.forget});
  }
  return logits;
}

std::string regularized_phase(double lambda) {
  if (lambda > 0.0) return "Gplus";
  if (lambda < 0.0) return "Gminus";
  return "regularized";
}

}  // namespace

template <typename T>
GateMatrix fit_warmup(const Weights<T>& w, const TaskBatch& data, const FitConfig& config,
                      std::vector<TracePoint>* trace) {
  config.validate();
  require_frozen(w);
  const auto& c = w.config;
  Rng rng(derive_seed(config.seed, "warmup"));
  std::vector<double> init(c.n_layers * c.n_heads, std::clamp(config.s0, -config.s_max, config.s_max));
  for (auto& x : init) x = to_float_precision(x);
  auto logits = optimize_logits<T>(w, std::move(init), config.warmup_steps, config, "G0", trace,
                                   [&](Tape<T>& tape, const Tensor<T>& s, StepValues& sv) {
                                     const auto lb = pack_for_loss(data, draw_indices(rng, data.size(), config.batch_size));
                                     auto loss = chg_loss(tape, w, lb, s, 0.0, config.s_max);
                                     sv.nll = static_cast<double>(loss.item());
                                     return loss;
                                   });
  return GateMatrix::soft(c.n_layers, c.n_heads, std::move(logits), config.s_max);
}

template <typename T>
GateMatrix fit_regularized(const Weights<T>& w, const TaskBatch& data, const GateMatrix& g0, double lambda,
                           const FitConfig& config, std::vector<TracePoint>* trace) {
  config.validate();
  require_frozen(w);
  const auto& c = w.config;
  if (g0.mode() != GateMode::soft || g0.layers() != c.n_layers || g0.heads() != c.n_heads)
    throw DimensionError("fit_regularized: initial gates must be soft " + std::to_string(c.n_layers) + "x" +
                         std::to_string(c.n_heads));
  Rng rng(derive_seed(config.seed, "regularized"));
  auto logits = optimize_logits<T>(w, g0.logits(), config.steps, config, regularized_phase(lambda), trace,
                                   [&](Tape<T>& tape, const Tensor<T>& s, StepValues& sv) {
                                     const auto lb = pack_for_loss(data, draw_indices(rng, data.size(), config.batch_size));
                                     const auto clipped = clamp(tape, s, static_cast<T>(-config.s_max),
                                                                static_cast<T>(config.s_max));
                                     const GateValues<T> gv{sigmoid(tape, clipped), false};
                                     const auto out = forward_packed<T>(tape, w, lb.seqs, &gv);
                                     const auto nll = cross_entropy(tape, out, lb.targets, lb.mask);
                                     sv.nll = static_cast<double>(nll.item());
                                     return add(tape, nll, scale(tape, sum(tape, clipped), static_cast<T>(-lambda)));
                                   });
  return GateMatrix::soft(c.n_layers, c.n_heads, std::move(logits), config.s_max);
}

template <typename T>
ChgResult fit_chg(const Weights<T>& w, const TaskBatch& data, const FitConfig& config) {
  ChgResult r;
  r.fingerprint = config.fingerprint();
  r.g0 = fit_warmup(w, data, config, &r.trace);
  r.gplus = fit_regularized(w, data, r.g0, config.lambda_plus, config, &r.trace);
  r.gminus = fit_regularized(w, data, r.g0, config.lambda_minus, config, &r.trace);
  return r;
}

template <typename T>
GateMatrix fit_contrastive(const Weights<T>& w, const TaskBatch& retain, const TaskBatch& forget, double lambda,
                           const FitConfig& config, std::vector<TracePoint>* trace) {
  config.validate();
  require_frozen(w);
  if (retain.empty() || forget.empty()) throw InvalidBatchError("fit_contrastive: retain and forget sets must be nonempty");
  if (!(lambda < 0.0)) throw ConfigError("fit_contrastive: lambda must be negative");
  const auto& c = w.config;
  // Same stream for both sides: equal-sized sets draw matching indices.
  Rng rng_r(derive_seed(config.seed, "contrastive"));
  Rng rng_f(derive_seed(config.seed, "contrastive"));
  std::vector<double> init(c.n_layers * c.n_heads, std::clamp(config.s0, -config.s_max, config.s_max));
  for (auto& x : init) x = to_float_precision(x);
  auto logits = optimize_logits<T>(
      w, std::move(init), config.steps, config, "contrastive", trace,
      [&](Tape<T>& tape, const Tensor<T>& s, StepValues& sv) {
        const auto lr_ = pack_for_loss(retain, draw_indices(rng_r, retain.size(), config.batch_size));
        const auto lf = pack_for_loss(forget, draw_indices(rng_f, forget.size(), config.batch_size));
        LossBatch both = lr_;
        const auto split = both.targets.size();
        for (std::size_t seg = 0; seg < lf.seqs.n_segments(); ++seg) {
          const auto begin = lf.seqs.tokens.begin() + static_cast<std::ptrdiff_t>(lf.seqs.offsets[seg]);
          const auto end = lf.seqs.tokens.begin() + static_cast<std::ptrdiff_t>(lf.seqs.offsets[seg + 1]);
          both.seqs.append(std::vector<int>(begin, end));
        }
        both.targets.insert(both.targets.end(), lf.targets.begin(), lf.targets.end());
        std::vector<std::uint8_t> mask_r(both.targets.size(), 0), mask_f(both.targets.size(), 0);
        std::copy(lr_.mask.begin(), lr_.mask.end(), mask_r.begin());
        std::copy(lf.mask.begin(), lf.mask.end(), mask_f.begin() + static_cast<std::ptrdiff_t>(split));

        const auto clipped = clamp(tape, s, static_cast<T>(-config.s_max), static_cast<T>(config.s_max));
        const GateValues<T> gv{sigmoid(tape, clipped), false};
        const auto out = forward_packed<T>(tape, w, both.seqs, &gv);
        const auto nll_r = cross_entropy(tape, out, both.targets, mask_r);
        const auto nll_f = cross_entropy(tape, out, both.targets, mask_f);
        sv.nll = static_cast<double>(nll_r.item());
        sv.forget = static_cast<double>(nll_f.item());
        auto loss = sub(tape, nll_r, scale(tape, min_scalar(tape, nll_f, static_cast<T>(config.tau)),
                                           static_cast<T>(config.alpha)));
        return add(tape, loss, scale(tape, sum(tape, clipped), static_cast<T>(-lambda)));
      });
  return GateMatrix::soft(c.n_layers, c.n_heads, std::move(logits), config.s_max);
}

// ---- persistence ---------------------------------------------------------------------

namespace {

void append_rows(std::string& out, const GateMatrix& g, std::string_view phase) {
  for (std::size_t l = 0; l < g.layers(); ++l)
    for (std::size_t h = 0; h < g.heads(); ++h) {
      out += phase;
      out += ',' + std::to_string(l) + ',' + std::to_string(h) + ',' + format_sig9(g.logit(l, h)) + ',' +
             format_sig9(g.gate(l, h)) + '\n';
    }
}

std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_number(const std::string& s, std::size_t line_no) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw IntegrityError("gates CSV line " + std::to_string(line_no) + ": bad number '" + s + "'");
  return v;
}

std::size_t parse_index(const std::string& s, std::size_t line_no) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw IntegrityError("gates CSV line " + std::to_string(line_no) + ": bad index '" + s + "'");
  return v;
}

struct ParsedGates {
  std::string fingerprint;
  double s_max = 0.0;
  std::map<std::string, std::map<std::pair<std::size_t, std::size_t>, double>> phases;
};

ParsedGates parse_gate_rows(std::string_view text) {
  ParsedGates p;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      for (const auto& field : split(std::string_view(line).substr(2), ' ')) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) continue;
        const auto key = field.substr(0, eq), value = field.substr(eq + 1);
        if (key == "fingerprint") p.fingerprint = value;
        if (key == "s_max") p.s_max = parse_number(value, line_no);
      }
      continue;
    }
    if (!header) {
      if (line != "phase,layer,head,logit,gate")
        throw IntegrityError("gates CSV line " + std::to_string(line_no) + ": unexpected header '" + line + "'");
      header = true;
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() != 5)
      throw IntegrityError("gates CSV line " + std::to_string(line_no) + ": expected 5 fields, got " +
                           std::to_string(f.size()));
    const auto key = std::make_pair(parse_index(f[1], line_no), parse_index(f[2], line_no));
    if (!p.phases[f[0]].emplace(key, to_float_precision(parse_number(f[3], line_no))).second)
      throw IntegrityError("gates CSV line " + std::to_string(line_no) + ": duplicate entry");
  }
  if (!header) throw IntegrityError("gates CSV: missing header");
  if (!(p.s_max > 0.0)) throw IntegrityError("gates CSV: missing s_max in comment line");
  return p;
}

GateMatrix matrix_from(const ParsedGates& p, const std::string& phase) {
  const auto it = p.phases.find(phase);
  if (it == p.phases.end()) throw IntegrityError("gates CSV: phase '" + phase + "' missing");
  std::size_t layers = 0, heads = 0;
  for (const auto& [k, v] : it->second) {
    layers = std::max(layers, k.first + 1);
    heads = std::max(heads, k.second + 1);
  }
  if (it->second.size() != layers * heads) throw IntegrityError("gates CSV: phase '" + phase + "' is incomplete");
  std::vector<double> logits;
  for (const auto& [k, v] : it->second) logits.push_back(v);
  return GateMatrix::soft(layers, heads, std::move(logits), p.s_max);
}

std::string comment_line(std::string_view fingerprint, double s_max) {
  return "# fingerprint=" + std::string(fingerprint) + " s_max=" + format_sig9(s_max) + "\n";
}

}  // namespace

std::string gates_csv(const ChgResult& r) {
  std::string out = comment_line(r.fingerprint, r.g0.s_max());
  out += "phase,layer,head,logit,gate\n";
  append_rows(out, r.g0, "G0");
  append_rows(out, r.gplus, "Gplus");
  append_rows(out, r.gminus, "Gminus");
  return out;
}

ChgResult parse_gates_csv(std::string_view text) {
  const auto p = parse_gate_rows(text);
  ChgResult r;
  r.fingerprint = p.fingerprint;
  r.g0 = matrix_from(p, "G0");
  r.gplus = matrix_from(p, "Gplus");
  r.gminus = matrix_from(p, "Gminus");
  if (r.gplus.layers() != r.g0.layers() || r.gplus.heads() != r.g0.heads() || r.gminus.layers() != r.g0.layers() ||
      r.gminus.heads() != r.g0.heads())
    throw IntegrityError("gates CSV: phases disagree in shape");
  return r;
}

std::string gate_matrix_csv(const GateMatrix& g, std::string_view phase, std::string_view fingerprint) {
  std::string out = comment_line(fingerprint, g.s_max());
  out += "phase,layer,head,logit,gate\n";
  append_rows(out, g, phase);
  return out;
}

GateMatrix parse_gate_matrix_csv(std::string_view text, std::string_view phase) {
  return matrix_from(parse_gate_rows(text), std::string(phase));
}

std::string trace_csv(const std::vector<TracePoint>& trace) {
  std::string out = "phase,step,loss,nll,forget\n";
  for (const auto& t : trace)
    out += t.phase + ',' + std::to_string(t.step) + ',' + format_sig9(t.loss) + ',' + format_sig9(t.nll) + ',' +
           format_sig9(t.forget) + '\n';
  return out;
}

#define CHG_INSTANTIATE(T)                                                                                      \
  template Tensor<T> chg_loss(Tape<T>&, const Weights<T>&, const LossBatch&, const Tensor<T>&, double, double); \
  template double chg_loss_grad(const Weights<T>&, const LossBatch&, std::span<const double>, double, double,  \
                                std::vector<double>*);                                                          \
  template GateMatrix fit_warmup(const Weights<T>&, const TaskBatch&, const FitConfig&, std::vector<TracePoint>*); \
  template GateMatrix fit_regularized(const Weights<T>&, const TaskBatch&, const GateMatrix&, double,            \
                                      const FitConfig&, std::vector<TracePoint>*);                              \
  template ChgResult fit_chg(const Weights<T>&, const TaskBatch&, const FitConfig&);                            \
  template GateMatrix fit_contrastive(const Weights<T>&, const TaskBatch&, const TaskBatch&, double,            \
                                      const FitConfig&, std::vector<TracePoint>*);

CHG_INSTANTIATE(float)
CHG_INSTANTIATE(double)

#undef CHG_INSTANTIATE

}  // namespace chg
