#include "chg/analysis.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <tuple>

#include "chg/evaluate.hpp"
#include "chg/io.hpp"

namespace chg {

Metric parse_metric(std::string_view name) {
  if (name == "facilitation") return Metric::facilitation;
  if (name == "interference") return Metric::interference;
  if (name == "irrelevance") return Metric::irrelevance;
  throw ConfigError("unknown metric '" + std::string(name) + "' (expected facilitation, interference or irrelevance)");
}

std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::facilitation: return "facilitation";
    case Metric::interference: return "interference";
    case Metric::irrelevance: return "irrelevance";
  }
  return "?";
}

const std::vector<double>& HeadScores::get(Metric m) const {
  switch (m) {
    case Metric::facilitation: return facilitation;
    case Metric::interference: return interference;
    case Metric::irrelevance: return irrelevance;
  }
  throw ConfigError("unknown metric");
}

const std::vector<double>& AggregatedScores::get(Metric m) const {
  switch (m) {
    case Metric::facilitation: return facilitation;
    case Metric::interference: return interference;
    case Metric::irrelevance: return irrelevance;
  }
  throw ConfigError("unknown metric");
}

HeadScores taxonomy_scores(const GateMatrix& gplus, const GateMatrix& gminus, std::uint64_t seed) {
  if (gplus.layers() != gminus.layers() || gplus.heads() != gminus.heads())
    throw DimensionError("taxonomy_scores: G+ is " + std::to_string(gplus.layers()) + "x" +
                         std::to_string(gplus.heads()) + ", G- is " + std::to_string(gminus.layers()) + "x" +
                         std::to_string(gminus.heads()));
  HeadScores s;
  s.layers = gplus.layers();
  s.heads = gplus.heads();
  s.seed = seed;
  const auto gp = gplus.gates(), gm = gminus.gates();
  for (std::size_t i = 0; i < gp.size(); ++i) {
    s.facilitation.push_back(gm[i]);
    s.interference.push_back(1.0 - gp[i]);
    s.irrelevance.push_back(gp[i] * (1.0 - gm[i]));
  }
  return s;
}

std::vector<std::size_t> ranked_heads(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

template <typename T>
AblationCurve sequential_ablation(const Weights<T>& w, const TaskBatch& data, const GateMatrix& gplus,
                                  const HeadScores& scores, Metric metric, std::size_t k_max) {
  const auto n = gplus.size();
  if (scores.layers != gplus.layers() || scores.heads != gplus.heads())
    throw DimensionError("sequential_ablation: scores and G+ disagree in shape");
  if (k_max > n) throw ConfigError("sequential_ablation: k_max " + std::to_string(k_max) + " exceeds " + std::to_string(n) + " heads");
  AblationCurve curve;
  curve.metric = metric;
  curve.heads = gplus.heads();
  curve.seed = scores.seed;
  curve.order = ranked_heads(scores.get(metric));
  curve.delta.push_back(0.0);
  auto retain = gplus.gates(), ablate = gplus.gates();
  for (std::size_t k = 1; k <= k_max; ++k) {
    const auto head = curve.order[k - 1];
    retain[head] = 1.0;
    ablate[head] = 0.0;
    const auto gr = GateMatrix::hard(gplus.layers(), gplus.heads(), retain);
    const auto ga = GateMatrix::hard(gplus.layers(), gplus.heads(), ablate);
    curve.delta.push_back(mean_logprob_per_token(w, data, &ga) - mean_logprob_per_token(w, data, &gr));
  }
  return curve;
}

AggregateMode parse_aggregate_mode(std::string_view name) {
  if (name == "always") return AggregateMode::always;
  if (name == "any") return AggregateMode::any;
  if (name == "mean") return AggregateMode::mean;
  throw ConfigError("unknown aggregation mode '" + std::string(name) + "'");
}

std::string_view aggregate_mode_name(AggregateMode m) {
  switch (m) {
    case AggregateMode::always: return "always";
    case AggregateMode::any: return "any";
    case AggregateMode::mean: return "mean";
  }
  return "?";
}

AggregatedScores aggregate_seeds(const std::vector<HeadScores>& scores, AggregateMode mode) {
  if (scores.empty()) throw InvalidBatchError("aggregate_seeds: no seeds");
  AggregatedScores out;
  out.layers = scores[0].layers;
  out.heads = scores[0].heads;
  for (const auto& s : scores)
    if (s.layers != out.layers || s.heads != out.heads) throw DimensionError("aggregate_seeds: seeds disagree in shape");
  auto reduce = [&](Metric m) {
    std::vector<double> acc = scores[0].get(m);
    for (std::size_t r = 1; r < scores.size(); ++r) {
      const auto& v = scores[r].get(m);
      for (std::size_t i = 0; i < acc.size(); ++i) {
        switch (mode) {
          case AggregateMode::always: acc[i] = std::min(acc[i], v[i]); break;
          case AggregateMode::any: acc[i] = std::max(acc[i], v[i]); break;
          case AggregateMode::mean: acc[i] += v[i]; break;
        }
      }
    }
    if (mode == AggregateMode::mean) {
      // Rounding can push sum/n just outside [min, max] (ten copies of 0.1
      // average to one ulp below 0.1); the exact mean never leaves it.
      for (std::size_t i = 0; i < acc.size(); ++i) {
        double lo = scores[0].get(m)[i], hi = lo;
        for (const auto& s : scores) {
          lo = std::min(lo, s.get(m)[i]);
          hi = std::max(hi, s.get(m)[i]);
        }
        acc[i] = std::clamp(acc[i] / static_cast<double>(scores.size()), lo, hi);
      }
    }
    return acc;
  };
  out.facilitation = reduce(Metric::facilitation);
  out.interference = reduce(Metric::interference);
  out.irrelevance = reduce(Metric::irrelevance);
  return out;
}

double threshold_fraction(const std::vector<double>& values, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("threshold_fraction: tau must be in (0,1)");
  if (values.empty()) return 0.0;
  const auto hits = std::count_if(values.begin(), values.end(), [&](double v) { return v >= tau; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(values.size());
}

// ---- activation patching -------------------------------------------------------

namespace {

template <typename T>
double answer_probability(const Tensor<T>& logits, std::size_t row, int answer) {
  const auto v = logits.cols();
  const T* r = logits.data().data() + row * v;
  const T mx = *std::max_element(r, r + v);
  double z = 0.0;
  for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(r[j] - mx));
  return std::exp(static_cast<double>(r[answer] - mx)) / z;
}

}  // namespace

template <typename T>
IndirectEffects indirect_effect(const Weights<T>& w, const std::vector<PromptPair>& pairs, const GateMatrix* gates) {
  if (pairs.empty()) throw InvalidBatchError("indirect_effect: no prompt pairs");
  const auto& c = w.config;
  const auto n_heads = c.n_layers * c.n_heads;
  std::optional<GateValues<T>> gv;
  if (gates) gv = gate_values<T>(*gates);
  IndirectEffects out;
  out.layers = c.n_layers;
  out.heads = c.n_heads;
  out.n_pairs = pairs.size();
  std::vector<std::vector<double>> per_pair;
  per_pair.reserve(pairs.size());
  for (const auto& pair : pairs) {
    if (pair.clean.size() != pair.corrupt.size() || pair.clean.empty())
      throw InvalidBatchError("indirect_effect: clean and corrupt prompts must be nonempty and equally long");
    if (pair.answer < 0 || static_cast<std::size_t>(pair.answer) >= c.vocab_size)
      throw VocabularyError("indirect_effect: answer token " + std::to_string(pair.answer) + " outside vocabulary");
    const auto pos = pair.clean.size() - 1;

    PackedSequences clean;
    clean.append(pair.clean);
    BatchHooks capture;
    for (std::size_t i = 0; i < n_heads; ++i) capture.captures.push_back({0, {i / c.n_heads, i % c.n_heads, pos}});
    std::vector<std::vector<double>> captured;
    {
      Tape<T> tape;
      forward_packed<T>(tape, w, clean, gv ? &*gv : nullptr, &capture, &captured);
    }

    PackedSequences corrupt;
    BatchHooks patch;
    for (std::size_t s = 0; s <= n_heads; ++s) corrupt.append(pair.corrupt);
    for (std::size_t i = 0; i < n_heads; ++i) patch.patches.push_back({i + 1, {capture.captures[i].second, captured[i]}});
    Tape<T> tape;
    const auto logits = forward_packed<T>(tape, w, corrupt, gv ? &*gv : nullptr, &patch);
    const double base = answer_probability(logits, corrupt.offsets[1] - 1, pair.answer);
    auto& row = per_pair.emplace_back(n_heads);
    for (std::size_t i = 0; i < n_heads; ++i) row[i] = answer_probability(logits, corrupt.offsets[i + 2] - 1, pair.answer) - base;
  }
  // Sum in a canonical order of the pairs so the mean does not depend on how
  // the caller ordered them.
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(pairs[a].clean, pairs[a].corrupt, pairs[a].answer) <
           std::tie(pairs[b].clean, pairs[b].corrupt, pairs[b].answer);
  });
  std::vector<double> sums(n_heads, 0.0);
  for (auto p : order)
    for (std::size_t i = 0; i < n_heads; ++i) sums[i] += per_pair[p][i];
  for (auto& s : sums) s /= static_cast<double>(pairs.size());
  out.mean_recovery = std::move(sums);
  return out;
}

// ---- statistics ----------------------------------------------------------------

namespace {

// A constant group returns its value and zero variance exactly; summation
// would otherwise leave a rounding residue that a t statistic amplifies.
std::pair<double, double> mean_var(const std::vector<double>& x) {
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  if (*lo == *hi) return {*lo, 0.0};
  const double n = static_cast<double>(x.size());
  double m = 0.0;
  for (double v : x) m += v;
  m /= n;
  if (x.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return {m, ss / (n - 1.0)};
}

}  // namespace

WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw InvalidBatchError("welch_t_test: both groups must be nonempty");
  const auto [ma, va] = mean_var(a);
  const auto [mb, vb] = mean_var(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double sa = va / na, sb = vb / nb;
  const double se2 = sa + sb;
  WelchResult r;
  const double diff = ma - mb;
  if (se2 == 0.0) {
    if (diff > 0.0) {
      r.t = std::numeric_limits<double>::infinity();
      r.p_one_sided = 0.0;
    } else if (diff < 0.0) {
      r.t = -std::numeric_limits<double>::infinity();
      r.p_one_sided = 1.0;
    } else {
      r.t = 0.0;
      r.p_one_sided = 0.5;
    }
    r.df = na + nb - 2.0;
    return r;
  }
  r.t = diff / std::sqrt(se2);
  const double den = (a.size() > 1 ? sa * sa / (na - 1.0) : 0.0) + (b.size() > 1 ? sb * sb / (nb - 1.0) : 0.0);
  r.df = se2 * se2 / den;
  const boost::math::students_t dist(r.df);
  r.p_one_sided = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("pearson: need two equally long vectors of length >= 2");
  const auto [mx, vx] = mean_var(x);
  const auto [my, vy] = mean_var(y);
  double cov = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) cov += (x[i] - mx) * (y[i] - my);
  cov /= static_cast<double>(x.size() - 1);
  if (vx == 0.0 || vy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return cov / std::sqrt(vx * vy);
}

CmaReport cma_chg_agreement(const IndirectEffects& effects, const std::vector<HeadScores>& facilitation_runs) {
  if (facilitation_runs.size() < 2) throw ConfigError("cma_chg_agreement: need at least 2 fitted seeds");
  CmaReport r;
  r.n_heads = effects.mean_recovery.size();
  r.max_facilitation = aggregate_seeds(facilitation_runs, AggregateMode::any).facilitation;
  if (r.max_facilitation.size() != r.n_heads) throw DimensionError("cma_chg_agreement: effects and scores disagree in shape");
  const auto [m, v] = mean_var(effects.mean_recovery);
  r.cutoff = m + 3.0 * std::sqrt(v);
  std::vector<double> med, other;
  for (std::size_t i = 0; i < r.n_heads; ++i) {
    if (effects.mean_recovery[i] >= r.cutoff && v > 0.0) {
      r.mediators.push_back(i);
      med.push_back(r.max_facilitation[i]);
    } else {
      other.push_back(r.max_facilitation[i]);
    }
  }
  r.pearson_r = pearson(effects.mean_recovery, r.max_facilitation);
  if (med.empty() || other.empty()) {
    r.degenerate = true;
    r.warning = "no head reaches the mean + 3 sd mediator cutoff";
    r.welch = {0.0, 0.0, std::numeric_limits<double>::quiet_NaN()};
    r.mean_mediator = std::numeric_limits<double>::quiet_NaN();
    r.mean_other = mean_var(r.max_facilitation).first;
    return r;
  }
  if (med.size() == 1) r.warning = "single mediator head; its group contributes zero variance";
  r.mean_mediator = mean_var(med).first;
  r.mean_other = mean_var(other).first;
  r.welch = welch_t_test(med, other);
  return r;
}

// ---- artifacts -------------------------------------------------------------------

std::string head_scores_csv(const std::vector<HeadScores>& runs) {
  std::string out = "seed,layer,head,facilitation,interference,irrelevance\n";
  for (const auto& s : runs)
    for (std::size_t i = 0; i < s.facilitation.size(); ++i)
      out += std::to_string(s.seed) + ',' + std::to_string(i / s.heads) + ',' + std::to_string(i % s.heads) + ',' +
             format_sig9(s.facilitation[i]) + ',' + format_sig9(s.interference[i]) + ',' +
             format_sig9(s.irrelevance[i]) + '\n';
  return out;
}

std::string ablation_csv(const std::vector<AblationCurve>& curves) {
  std::string out = "seed,metric,k,layer,head,delta\n";
  for (const auto& c : curves)
    for (std::size_t k = 0; k < c.delta.size(); ++k) {
      out += std::to_string(c.seed) + ',' + std::string(metric_name(c.metric)) + ',' + std::to_string(k) + ',';
      out += k == 0 ? std::string(",") : std::to_string(c.order[k - 1] / c.heads) + ',' + std::to_string(c.order[k - 1] % c.heads);
      out += ',' + format_sig9(c.delta[k]) + '\n';
    }
  return out;
}

std::string aggregated_csv(const std::vector<std::pair<AggregateMode, AggregatedScores>>& aggs) {
  std::string out = "mode,layer,head,facilitation,interference,irrelevance\n";
  for (const auto& [mode, a] : aggs)
    for (std::size_t i = 0; i < a.facilitation.size(); ++i)
      out += std::string(aggregate_mode_name(mode)) + ',' + std::to_string(i / a.heads) + ',' +
             std::to_string(i % a.heads) + ',' + format_sig9(a.facilitation[i]) + ',' +
             format_sig9(a.interference[i]) + ',' + format_sig9(a.irrelevance[i]) + '\n';
  return out;
}

std::string threshold_csv(const std::vector<std::pair<AggregateMode, AggregatedScores>>& aggs, double tau) {
  std::string out = "mode,metric,tau,percent\n";
  for (const auto& [mode, a] : aggs)
    for (auto m : {Metric::facilitation, Metric::interference, Metric::irrelevance})
      out += std::string(aggregate_mode_name(mode)) + ',' + std::string(metric_name(m)) + ',' + format_sig9(tau) + ',' +
             format_sig9(threshold_fraction(a.get(m), tau)) + '\n';
  return out;
}

std::string effects_csv(const IndirectEffects& e) {
  std::string out = "# pairs=" + std::to_string(e.n_pairs) + "\nlayer,head,indirect_effect\n";
  for (std::size_t i = 0; i < e.mean_recovery.size(); ++i)
    out += std::to_string(i / e.heads) + ',' + std::to_string(i % e.heads) + ',' + format_sig9(e.mean_recovery[i]) + '\n';
  return out;
}

IndirectEffects parse_effects_csv(std::string_view text) {
  IndirectEffects e;
  std::istringstream is{std::string(text)};
  std::string line;
  std::vector<std::tuple<std::size_t, std::size_t, double>> rows;
  bool header = false;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.rfind("# pairs=", 0) == 0) {
      e.n_pairs = std::stoul(line.substr(8));
      continue;
    }
    if (!header) {
      if (line != "layer,head,indirect_effect") throw IntegrityError("effects CSV: unexpected header '" + line + "'");
      header = true;
      continue;
    }
    std::size_t l = 0, h = 0;
    double v = 0.0;
    const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw IntegrityError("effects CSV line " + std::to_string(line_no) + ": expected 3 fields");
    const char* b = line.data();
    auto ok = [](auto res, const char* end) { return res.ec == std::errc() && res.ptr == end; };
    if (!ok(std::from_chars(b, b + c1, l), b + c1) || !ok(std::from_chars(b + c1 + 1, b + c2, h), b + c2) ||
        !ok(std::from_chars(b + c2 + 1, b + line.size(), v), b + line.size()))
      throw IntegrityError("effects CSV line " + std::to_string(line_no) + ": bad field");
    rows.emplace_back(l, h, v);
    e.layers = std::max(e.layers, l + 1);
    e.heads = std::max(e.heads, h + 1);
  }
  if (!header || rows.size() != e.layers * e.heads) throw IntegrityError("effects CSV: incomplete matrix");
  e.mean_recovery.assign(rows.size(), 0.0);
  for (const auto& [l, h, v] : rows) e.mean_recovery[l * e.heads + h] = v;
  return e;
}

std::string cma_report_csv(const CmaReport& r) {
  std::ostringstream os;
  os << "key,value\n";
  os << "n_heads," << r.n_heads << '\n';
  os << "cutoff," << format_sig9(r.cutoff) << '\n';
  os << "n_mediators," << r.mediators.size() << '\n';
  os << "mediators,";
  for (std::size_t i = 0; i < r.mediators.size(); ++i) os << (i ? ";" : "") << r.mediators[i];
  os << '\n';
  os << "mean_max_facilitation_mediators," << format_sig9(r.mean_mediator) << '\n';
  os << "mean_max_facilitation_others," << format_sig9(r.mean_other) << '\n';
  os << "welch_t," << format_sig9(r.welch.t) << '\n';
  os << "welch_df," << format_sig9(r.welch.df) << '\n';
  os << "p_one_sided," << format_sig9(r.welch.p_one_sided) << '\n';
  os << "pearson_r," << format_sig9(r.pearson_r) << '\n';
  os << "degenerate," << (r.degenerate ? "true" : "false") << '\n';
  os << "warning," << r.warning << '\n';
  return os.str();
}

std::string heatmap_svg(const AggregatedScores& s, std::string_view title) {
  constexpr int cell = 32, left = 48, top = 40;
  const int width = left + cell * static_cast<int>(s.heads) + 16;
  const int height = top + cell * static_cast<int>(s.layers) + 16;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"16\" font-family=\"monospace\" font-size=\"12\">" << title << "</text>\n";
  for (std::size_t h = 0; h < s.heads; ++h)
    os << "<text x=\"" << left + cell * static_cast<int>(h) + 4 << "\" y=\"" << top - 6
       << "\" font-family=\"monospace\" font-size=\"10\">H" << h << "</text>\n";
  auto channel = [](double v) { return static_cast<int>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); };
  for (std::size_t l = 0; l < s.layers; ++l) {
    os << "<text x=\"4\" y=\"" << top + cell * static_cast<int>(l) + cell / 2 + 4
       << "\" font-family=\"monospace\" font-size=\"10\">L" << l << "</text>\n";
    for (std::size_t h = 0; h < s.heads; ++h) {
      const auto i = l * s.heads + h;
      os << "<rect x=\"" << left + cell * static_cast<int>(h) << "\" y=\"" << top + cell * static_cast<int>(l)
         << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb(" << channel(s.interference[i]) << ','
         << channel(s.facilitation[i]) << ",0)\" stroke=\"#888\" stroke-width=\"0.5\"/>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

#define CHG_INSTANTIATE(T)                                                                                     \
  template AblationCurve sequential_ablation(const Weights<T>&, const TaskBatch&, const GateMatrix&,         \
                                             const HeadScores&, Metric, std::size_t);                        \
  template IndirectEffects indirect_effect(const Weights<T>&, const std::vector<PromptPair>&, const GateMatrix*);

CHG_INSTANTIATE(float)
CHG_INSTANTIATE(double)

#undef CHG_INSTANTIATE

}  // namespace chg
