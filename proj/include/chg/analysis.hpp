#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "chg/model.hpp"
#include "chg/tasks.hpp"

namespace chg {

enum class Metric { facilitation, interference, irrelevance };

// Throws ConfigError for anything but the three metric names.
Metric parse_metric(std::string_view name);
std::string_view metric_name(Metric m);

// Row-major L x H matrices in [0, 1].
struct HeadScores {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<double> facilitation;  // G-
  std::vector<double> interference;  // 1 - G+
  std::vector<double> irrelevance;   // G+ (1 - G-)
  std::uint64_t seed = 0;

  const std::vector<double>& get(Metric m) const;
};

HeadScores taxonomy_scores(const GateMatrix& gplus, const GateMatrix& gminus, std::uint64_t seed = 0);

struct AblationCurve {
  Metric metric = Metric::facilitation;
  std::size_t heads = 0;           // H, to split flat indices
  std::uint64_t seed = 0;
  std::vector<std::size_t> order;  // flat head indices l*H + h, descending score
  std::vector<double> delta;       // k = 0..k_max, nats/token; delta[0] = 0
};

// Heads sorted by descending score; ties broken by flat index.
std::vector<std::size_t> ranked_heads(const std::vector<double>& scores);

// For k = 1..k_max the top-k heads are set to hard 1 (retain) and hard 0
// (ablate) on top of G+, cumulatively; delta[k] is the mean per-token target
// log-prob under ablate minus that under retain.
template <typename T>
AblationCurve sequential_ablation(const Weights<T>& w, const TaskBatch& data, const GateMatrix& gplus,
                                  const HeadScores& scores, Metric metric, std::size_t k_max);

enum class AggregateMode { always, any, mean };
AggregateMode parse_aggregate_mode(std::string_view name);
std::string_view aggregate_mode_name(AggregateMode m);

struct AggregatedScores {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<double> facilitation;
  std::vector<double> interference;
  std::vector<double> irrelevance;

  const std::vector<double>& get(Metric m) const;
};

// Elementwise min (always), max (any) or mean over seeds.
AggregatedScores aggregate_seeds(const std::vector<HeadScores>& scores, AggregateMode mode);

// Percentage of entries >= tau, tau in (0, 1).
double threshold_fraction(const std::vector<double>& values, double tau = 0.5);

struct IndirectEffects {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<double> mean_recovery;  // E[P_patched(answer) - P_corrupt(answer)]
  std::size_t n_pairs = 0;
};

// Patches each head's clean post-gate output into the corrupt run at the
// final prompt position. `gates` null means all gates 1.
template <typename T>
IndirectEffects indirect_effect(const Weights<T>& w, const std::vector<PromptPair>& pairs,
                                const GateMatrix* gates = nullptr);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_one_sided = 0.5;  // H1: mean(a) > mean(b)
};

// Welch's unequal-variance t-test. A group of one contributes zero variance.
WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b);

double pearson(const std::vector<double>& x, const std::vector<double>& y);

struct CmaReport {
  std::size_t n_heads = 0;
  double cutoff = 0.0;  // mean + 3 sd of the effects
  std::vector<std::size_t> mediators;
  std::vector<double> max_facilitation;
  double mean_mediator = 0.0;
  double mean_other = 0.0;
  WelchResult welch;
  double pearson_r = 0.0;
  bool degenerate = false;
  std::string warning;
};

CmaReport cma_chg_agreement(const IndirectEffects& effects, const std::vector<HeadScores>& facilitation_runs);

// ---- artifacts ----------------------------------------------------------------------

std::string head_scores_csv(const std::vector<HeadScores>& runs);
std::string ablation_csv(const std::vector<AblationCurve>& curves);
std::string aggregated_csv(const std::vector<std::pair<AggregateMode, AggregatedScores>>& aggs);
std::string threshold_csv(const std::vector<std::pair<AggregateMode, AggregatedScores>>& aggs, double tau);
std::string effects_csv(const IndirectEffects& effects);
IndirectEffects parse_effects_csv(std::string_view text);
std::string cma_report_csv(const CmaReport& report);

// Layer rows by head columns; red channel = interference, green = facilitation.
std::string heatmap_svg(const AggregatedScores& scores, std::string_view title);

}  // namespace chg
