// Acceptance harness: one PASS/FAIL line per criterion. Tolerances and
// runtime budgets below are fixed; a criterion that misses them stays FAIL.
//
//   chg_acceptance prepare --config train.cfg --model DIR
//   chg_acceptance check --model DIR --criterion N [--work DIR]
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <limits>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "chg/analysis.hpp"
#include "chg/commands.hpp"
#include "chg/config.hpp"
#include "chg/errors.hpp"
#include "chg/evaluate.hpp"
#include "chg/fit.hpp"
#include "chg/io.hpp"
#include "chg/manifest.hpp"
#include "chg/rng.hpp"
#include "chg/train.hpp"

using namespace chg;
namespace fs = std::filesystem;

namespace {

// ---- pinned bounds ---------------------------------------------------------------

constexpr double kC1Budget = 60.0;
constexpr std::size_t kC1Inputs = 100;

constexpr double kC2Budget = 120.0;
constexpr double kC2Step = 1e-3;
constexpr double kC2RelErr = 1e-6;
constexpr int kC2Draws = 3;  // 3 x 8 = 24 logits

constexpr double kC3Budget = 300.0;
constexpr double kC3StepTol = 1e-6;  // logits are stored at float precision
constexpr double kC3GatePlus = 0.95, kC3GateMinus = 0.05, kC3Irrelevance = 0.9;

constexpr double kC4Budget = 900.0;
constexpr std::size_t kC4Seeds = 10;
constexpr double kC4FacilitationEnd = -0.5, kC4IrrelevanceBand = 0.05, kC4InterferenceFloor = -0.05;

constexpr std::size_t kC5Seeds = 10;
constexpr double kC5Tau = 0.5;

constexpr double kC6Budget = 1200.0;
constexpr std::size_t kC6Seeds = 5;
constexpr std::size_t kC6Pairs = 64;
constexpr double kC6Alpha = 0.05;

constexpr double kC7Budget = 1200.0;
constexpr double kPretrainMin = 0.95;  // held-out induction and kv-icl, <= 20k steps
constexpr std::size_t kPretrainEval = 512;

constexpr double kC7ForgetMax = 0.10, kC7RetainRatio = 0.70;
constexpr std::size_t kC7Eval = 256;

// ---- plumbing --------------------------------------------------------------------

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Model {
  ModelCheckpoint trained;
  ModelCheckpoint planted;
  std::size_t planted_layer = 0;
  std::size_t planted_head = 0;
};

Model load_model(const fs::path& dir) {
  const auto m = RunManifest::load(dir);
  verify_against_manifest(dir / "checkpoint.bin");
  verify_against_manifest(dir / "checkpoint_planted.bin");
  Model model;
  model.trained = load_checkpoint(dir / "checkpoint.bin");
  model.planted = load_checkpoint(dir / "checkpoint_planted.bin");
  model.planted_layer = std::stoul(m.config.at("planted_layer"));
  model.planted_head = std::stoul(m.config.at("planted_head"));
  return model;
}

void budget(Verdict& v, double elapsed, double limit) {
  v.detail += "; " + fmt(elapsed, 3) + " s (budget " + fmt(limit, 3) + " s)";
  if (elapsed >= limit) v.pass = false;
}

// ---- criteria --------------------------------------------------------------------

Verdict gate_identity(const Model& m) {
  const auto t0 = Clock::now();
  const auto& w = m.trained;
  const auto& c = w.config;
  const auto ones = GateMatrix::ones(c.n_layers, c.n_heads);
  Rng rng(derive_seed(1, "acceptance-identity"));
  std::size_t equal = 0;
  for (std::size_t i = 0; i < kC1Inputs; ++i) {
    std::vector<int> tokens(1 + rng.uniform_index(c.max_seq_len));
    for (auto& t : tokens) t = static_cast<int>(rng.uniform_index(c.vocab_size));
    const auto a = forward_ungated(w, tokens);
    const auto b = forward(w, tokens, ones);
    const auto da = a.data(), db = b.data();
    equal += da.size() == db.size() && std::memcmp(da.data(), db.data(), da.size_bytes()) == 0 ? 1 : 0;
  }
  Verdict v{equal == kC1Inputs, std::to_string(equal) + "/" + std::to_string(kC1Inputs) + " inputs bitwise equal"};
  budget(v, seconds_since(t0), kC1Budget);
  return v;
}

Verdict gradient_check() {
  const auto t0 = Clock::now();
  // A 2x4 model trained briefly, so gates have non-trivial NLL gradients.
  TrainConfig tc;
  tc.model.n_layers = 2;
  tc.model.n_heads = 4;
  tc.model.d_model = 32;
  tc.model.d_ff = 128;
  tc.steps = 300;
  tc.batch_size = 16;
  tc.eval_every = 0;
  tc.log_every = 0;
  const auto w32 = train(tc, init_weights(tc.model, derive_seed(2, "init"))).checkpoint;
  const auto w = weights_cast<double>(w32);
  const auto lb = pack_for_loss(make_task("induction", derive_seed(2, "data"), 16));
  Rng rng(derive_seed(2, "logits"));
  double worst = 0.0;
  std::size_t checked = 0;
  const double lambdas[kC2Draws] = {3e-3, 0.0, -3e-3};
  for (int draw = 0; draw < kC2Draws; ++draw) {
    std::vector<double> s(8);
    for (auto& x : s) x = rng.uniform(-4, 4);
    std::vector<double> grad;
    chg_loss_grad<double>(w, lb, s, lambdas[draw], 8.0, &grad);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto up = s, down = s;
      up[i] += kC2Step;
      down[i] -= kC2Step;
      const double fd = (chg_loss_grad<double>(w, lb, up, lambdas[draw], 8.0, nullptr) -
                         chg_loss_grad<double>(w, lb, down, lambdas[draw], 8.0, nullptr)) /
                        (2 * kC2Step);
      num += (grad[i] - fd) * (grad[i] - fd);
      den += fd * fd;
      ++checked;
    }
    worst = std::max(worst, std::sqrt(num / den));
  }
  Verdict v{worst < kC2RelErr && checked >= 20,
            std::to_string(checked) + " logits, worst rel-err " + fmt(worst, 3) + " (< " + fmt(kC2RelErr) + ")"};
  budget(v, seconds_since(t0), kC2Budget);
  return v;
}

Verdict regularizer_analytics(const Model& m) {
  const auto t0 = Clock::now();
  const auto& w = m.planted;
  const auto L = m.planted_layer, H = m.planted_head;
  const auto data = make_task("induction", derive_seed(3, "data"), 256);
  FitConfig cfg;
  cfg.seed = 3;
  const auto g0 = fit_warmup(w, data, cfg);

  // The NLL gradient of the planted gate is exactly zero at G0.
  std::vector<double> grad;
  chg_loss_grad<float>(w, pack_for_loss(data), g0.logits(), 0.0, cfg.s_max, &grad);
  const double nll_grad = grad[L * w.config.n_heads + H];

  // Per-step change of the planted logit over the first three steps.
  const double expect = cfg.lr * std::abs(cfg.lambda_plus) / (std::abs(cfg.lambda_plus) + cfg.eps);
  double worst_step = 0.0;
  for (double lambda : {cfg.lambda_plus, cfg.lambda_minus}) {
    double prev = g0.logit(L, H);
    for (std::size_t k = 1; k <= 3; ++k) {
      auto c = cfg;
      c.steps = k;
      const double now = fit_regularized(w, data, g0, lambda, c).logit(L, H);
      const double want = lambda > 0 ? expect : -expect;
      worst_step = std::max(worst_step, std::abs((now - prev) - want));
      prev = now;
    }
  }

  const auto gplus = fit_regularized(w, data, g0, cfg.lambda_plus, cfg);
  const auto gminus = fit_regularized(w, data, g0, cfg.lambda_minus, cfg);
  const auto scores = taxonomy_scores(gplus, gminus);
  const double gp = gplus.gate(L, H), gm = gminus.gate(L, H);
  const double irr = scores.irrelevance[L * w.config.n_heads + H];
  Verdict v;
  v.pass = nll_grad == 0.0 && worst_step <= kC3StepTol && gp >= kC3GatePlus && gm <= kC3GateMinus &&
           irr >= kC3Irrelevance;
  v.detail = "head (" + std::to_string(L) + "," + std::to_string(H) + "): NLL grad " + fmt(nll_grad) +
             ", per-step |dlogit - lr*sign(lambda)| max " + fmt(worst_step, 3) + ", G+ " + fmt(gp) + ", G- " +
             fmt(gm, 3) + ", irrelevance " + fmt(irr);
  budget(v, seconds_since(t0), kC3Budget);
  return v;
}

// Fits and per-seed scores for one task, shared by several criteria.
struct SeedFits {
  std::vector<std::uint64_t> seeds;
  std::vector<ChgResult> results;
  std::vector<HeadScores> scores;
};

SeedFits fit_seeds(const ModelCheckpoint& w, const std::string& task, std::size_t n_seeds, const FitConfig& base,
                   std::size_t n_examples) {
  SeedFits f;
  for (std::size_t i = 0; i < n_seeds; ++i) {
    const std::uint64_t seed = 1 + i;
    auto cfg = base;
    cfg.seed = seed;
    const auto data = make_task(task, derive_seed(seed, "data"), n_examples);
    f.seeds.push_back(seed);
    f.results.push_back(fit_chg(w, data, cfg));
    f.scores.push_back(taxonomy_scores(f.results.back().gplus, f.results.back().gminus, seed));
  }
  return f;
}

Verdict ablation_ordering(const Model& m, SeedFits& induction_fits) {
  const auto t0 = Clock::now();
  const auto& w = m.planted;
  const auto n = w.config.n_gates();
  induction_fits = fit_seeds(w, "induction", kC4Seeds, FitConfig{}, 256);
  std::map<Metric, std::vector<double>> mean;
  for (auto metric : {Metric::facilitation, Metric::irrelevance, Metric::interference}) mean[metric].assign(n + 1, 0.0);
  std::vector<double> interference_mean(n, 0.0);
  for (std::size_t i = 0; i < kC4Seeds; ++i) {
    const auto seed = induction_fits.seeds[i];
    const auto data = make_task("induction", derive_seed(seed, "eval"), 128);
    for (auto metric : {Metric::facilitation, Metric::irrelevance, Metric::interference}) {
      const auto curve =
          sequential_ablation(w, data, induction_fits.results[i].gplus, induction_fits.scores[i], metric, n);
      for (std::size_t k = 0; k <= n; ++k) mean[metric][k] += curve.delta[k] / static_cast<double>(kC4Seeds);
    }
    for (std::size_t h = 0; h < n; ++h)
      interference_mean[h] += induction_fits.scores[i].interference[h] / static_cast<double>(kC4Seeds);
  }
  const double fac_end = mean[Metric::facilitation][n];
  const std::size_t quartile = (n + 3) / 4;
  double irr_max = 0.0;
  for (std::size_t k = 1; k <= quartile; ++k) irr_max = std::max(irr_max, std::abs(mean[Metric::irrelevance][k]));
  // The interfering set: heads whose seed-mean interference reaches 0.5.
  std::size_t n_interfering = 0;
  for (double x : interference_mean) n_interfering += x >= 0.5 ? 1 : 0;
  const std::size_t prefix = std::max<std::size_t>(1, n_interfering);
  double int_min = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k <= prefix; ++k) int_min = std::min(int_min, mean[Metric::interference][k]);

  Verdict v;
  v.pass = fac_end <= kC4FacilitationEnd && irr_max <= kC4IrrelevanceBand && int_min >= kC4InterferenceFloor;
  v.detail = "facilitation end " + fmt(fac_end) + " (<= " + fmt(kC4FacilitationEnd) + "), irrelevance top-" +
             std::to_string(quartile) + " max |delta| " + fmt(irr_max, 3) + " (<= " + fmt(kC4IrrelevanceBand) +
             "), interference min over " + std::to_string(prefix) + "-head prefix " + fmt(int_min, 3) + " (>= " +
             fmt(kC4InterferenceFloor) + ", " + std::to_string(n_interfering) + " interfering heads)";
  budget(v, seconds_since(t0), kC4Budget);
  return v;
}

Verdict table2_inequality(const Model& m, const SeedFits& induction_fits) {
  const auto t0 = Clock::now();
  // The other tasks use shorter fits: the inequality is structural and
  // only needs genuine multi-seed score matrices.
  FitConfig quick;
  quick.warmup_steps = 100;
  quick.steps = 200;
  quick.batch_size = 16;
  std::vector<std::pair<std::string, std::vector<HeadScores>>> tasks{{"induction", induction_fits.scores}};
  for (const char* task : {"aba", "abb", "kv-icl", "kv-instr"})
    tasks.emplace_back(task, fit_seeds(m.planted, task, kC5Seeds, quick, 128).scores);
  std::size_t checks = 0, violations = 0;
  std::string table;
  for (const auto& [task, scores] : tasks) {
    const auto lo = aggregate_seeds(scores, AggregateMode::always);
    const auto mid = aggregate_seeds(scores, AggregateMode::mean);
    const auto hi = aggregate_seeds(scores, AggregateMode::any);
    for (auto metric : {Metric::facilitation, Metric::interference, Metric::irrelevance}) {
      const double always = threshold_fraction(lo.get(metric), kC5Tau);
      const double any = threshold_fraction(hi.get(metric), kC5Tau);
      ++checks;
      violations += any >= always ? 0 : 1;
      for (std::size_t i = 0; i < lo.get(metric).size(); ++i) {
        ++checks;
        violations += lo.get(metric)[i] <= mid.get(metric)[i] && mid.get(metric)[i] <= hi.get(metric)[i] ? 0 : 1;
      }
      table += " " + task + "/" + std::string(metric_name(metric)).substr(0, 3) + " " + fmt(always, 3) + "<=" +
               fmt(any, 3);
    }
  }
  Verdict v{violations == 0, std::to_string(checks) + " inequalities, " + std::to_string(violations) +
                                 " violated; always%<=any%:" + table};
  v.detail += "; " + fmt(seconds_since(t0), 3) + " s";
  return v;
}

Verdict cma_agreement(const Model& m) {
  const auto t0 = Clock::now();
  const auto& w = m.trained;
  std::vector<HeadScores> runs;
  for (std::size_t i = 0; i < kC6Seeds; ++i) {
    FitConfig cfg;
    cfg.seed = 1 + i;
    const auto data = make_task("kv-icl", derive_seed(cfg.seed, "data"), 256);
    const auto g0 = fit_warmup(w, data, cfg);
    const auto gminus = fit_regularized(w, data, g0, cfg.lambda_minus, cfg);
    runs.push_back(taxonomy_scores(GateMatrix::ones(w.config.n_layers, w.config.n_heads), gminus, cfg.seed));
  }
  const auto batch = make_task("kv-icl", derive_seed(1, "cma"), kC6Pairs);
  const auto pairs = corrupt_shuffle(batch, derive_seed(1, "shuffle"));
  const auto effects = indirect_effect(w, pairs);
  const auto r = cma_chg_agreement(effects, runs);
  Verdict v;
  v.pass = !r.degenerate && r.welch.t > 0.0 && r.welch.p_one_sided < kC6Alpha;
  v.detail = std::to_string(r.mediators.size()) + " mediators (cutoff " + fmt(r.cutoff, 3) + "), mean max-facilitation " +
             fmt(r.mean_mediator, 3) + " vs " + fmt(r.mean_other, 3) + ", t " + fmt(r.welch.t, 3) + ", df " +
             fmt(r.welch.df, 3) + ", p " + fmt(r.welch.p_one_sided, 3) + " (< " + fmt(kC6Alpha) + ")" +
             (r.warning.empty() ? "" : ", " + r.warning);
  budget(v, seconds_since(t0), kC6Budget);
  return v;
}

Verdict contrastive_pattern(const Model& m) {
  const auto t0 = Clock::now();
  const auto& w = m.trained;
  const auto icl_eval = make_task("kv-icl:5", derive_seed(7, "eval"), kC7Eval);
  const auto instr_eval = make_task("kv-instr:5", derive_seed(7, "eval"), kC7Eval);
  const double base_icl = greedy_accuracy(w, icl_eval, nullptr);
  const double base_instr = greedy_accuracy(w, instr_eval, nullptr);
  FitConfig cfg;
  cfg.seed = 7;
  bool pass = true;
  std::string detail = "baseline icl " + fmt(base_icl, 3) + ", instr " + fmt(base_instr, 3);
  for (bool keep_instruction : {true, false}) {
    const auto retain = make_task(keep_instruction ? "kv-instr:0,1,2,3,4" : "kv-icl:0,1,2,3,4",
                                  derive_seed(7, "retain"), 256);
    const auto forget = make_task(keep_instruction ? "kv-icl:0,1,2,3,4" : "kv-instr:0,1,2,3,4",
                                  derive_seed(7, "forget"), 256);
    const auto g = fit_contrastive(w, retain, forget, cfg.lambda_minus, cfg);
    const double icl = greedy_accuracy(w, icl_eval, &g);
    const double instr = greedy_accuracy(w, instr_eval, &g);
    const double forgotten = keep_instruction ? icl : instr;
    const double kept = keep_instruction ? instr : icl;
    const double kept_base = keep_instruction ? base_instr : base_icl;
    const bool ok = forgotten <= kC7ForgetMax && kept_base > 0.0 && kept >= kC7RetainRatio * kept_base;
    pass = pass && ok;
    detail += std::string("; retain ") + (keep_instruction ? "instr" : "icl") + ": forgotten " + fmt(forgotten, 3) +
              " (<= " + fmt(kC7ForgetMax) + "), retained " + fmt(kept, 3) + " = " +
              fmt(kept_base > 0.0 ? kept / kept_base : 0.0, 3) + " of baseline (>= " + fmt(kC7RetainRatio) + ")";
  }
  Verdict v{pass, detail};
  budget(v, seconds_since(t0), kC7Budget);
  return v;
}

// Runs every CLI verb twice on identical inputs and compares the CSV bytes.
Verdict determinism(const fs::path& model_dir, const fs::path& work, const std::string& chg_bin) {
  const auto t0 = Clock::now();
  fs::remove_all(work);
  fs::create_directories(work);
  atomic_write(work / "train.cfg",
               "seed = 5\nsteps = 30\nn_layers = 2\nn_heads = 4\nd_model = 32\nd_ff = 128\nbatch_size = 8\n"
               "eval_every = 15\neval_examples = 16\nplanted_layer = 0\nplanted_head = 1\n");
  atomic_write(work / "fit.cfg",
               "warmup_steps = 20\nsteps = 40\nbatch_size = 8\nn_examples = 32\neval_examples = 16\ncma_pairs = 8\n");
  const auto ckpt = (model_dir / "checkpoint_planted.bin").string();
  const auto cfg = (work / "fit.cfg").string();
  std::size_t failures = 0, compared = 0;
  std::vector<std::string> diffs;
  auto run = [&](const std::string& args) {
    const auto cmd = chg_bin + " " + args + " > /dev/null 2>> " + (work / "stderr.txt").string();
    if (std::system(cmd.c_str()) != 0) {
      ++failures;
      diffs.push_back("command failed: " + args);
    }
  };
  for (const char* rep : {"a", "b"}) {
    const auto d = (work / rep).string();
    run("train --config " + (work / "train.cfg").string() + " --out " + d + "/train");
    run("fit --checkpoint " + ckpt + " --task induction --seeds 2 --config " + cfg + " --out " + d + "/fit");
    run("fit --checkpoint " + ckpt + " --task kv-icl --seeds 2 --precision fp64 --config " + cfg + " --out " + d +
        "/fit_kv");
    run("ablate --fits " + d + "/fit --config " + cfg + " --out " + d + "/ablate");
    run("cma --fits " + d + "/fit_kv --config " + cfg + " --out " + d + "/cma");
    run("contrast --checkpoint " + ckpt + " --retain kv-instr:0,1,2,3,4 --forget kv-icl:0,1,2,3,4 --eval kv-icl:5 "
        "--eval kv-instr:5 --config " + cfg + " --out " + d + "/contrast");
    run("report --fits " + d + "/fit --fits " + d + "/fit_kv --out " + d + "/report");
  }
  for (const auto& e : fs::recursive_directory_iterator(work / "a")) {
    if (e.path().extension() != ".csv") continue;
    const auto rel = fs::relative(e.path(), work / "a");
    ++compared;
    const auto other = work / "b" / rel;
    if (!fs::exists(other) || read_file(e.path()) != read_file(other)) {
      ++failures;
      diffs.push_back(rel.string());
    }
  }
  Verdict v{failures == 0 && compared >= 20,
            std::to_string(compared) + " CSV files from 6 verbs compared, " + std::to_string(failures) + " differ"};
  for (const auto& d : diffs) v.detail += "; " + d;
  v.detail += "; " + fmt(seconds_since(t0), 3) + " s";
  return v;
}

// Not one of the numbered criteria: the pretrainer's own post-condition.
Verdict pretraining(const fs::path& model_dir) {
  const auto m = RunManifest::load(model_dir);
  const auto steps = std::stoul(m.config.at("steps"));
  const auto ckpt = load_checkpoint(model_dir / "checkpoint.bin");
  Verdict v{steps <= 20000, "steps " + std::to_string(steps) + " (<= 20000)"};
  for (const auto& row : evaluate_heldout(ckpt, derive_seed(1, "acceptance-heldout"), kPretrainEval, steps)) {
    const bool gated = row.task == "eval:induction" || row.task == "eval:kv-icl";
    v.detail += ", " + row.task.substr(5) + " " + fmt(row.accuracy, 3) + (gated ? " (>= " + fmt(kPretrainMin) + ")" : "");
    if (gated && row.accuracy < kPretrainMin) v.pass = false;
  }
  return v;
}

const char* kTitles[] = {"",
                         "gate identity",
                         "gradient correctness",
                         "regularizer analytics",
                         "sequential ablation ordering",
                         "always/any structural inequality",
                         "CMA agreement direction",
                         "contrastive forgetting pattern",
                         "determinism"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance harness"};
  app.require_subcommand(1);
  fs::path config, model;
  auto* prepare = app.add_subcommand("prepare", "train the acceptance model unless a verified copy exists");
  prepare->add_option("--config", config)->required();
  prepare->add_option("--model", model)->required();
  std::vector<int> criteria;
  fs::path work = fs::temp_directory_path() / "chg_acceptance";
  std::string chg_bin;
  auto* check = app.add_subcommand("check", "evaluate criteria against a prepared model");
  check->add_option("--model", model)->required();
  check->add_option("--criterion", criteria, "1-8; repeatable; default all");
  check->add_option("--work", work);
  check->add_option("--chg", chg_bin, "path to the chg binary (criterion 8)");
  bool pretrain_only = false;
  check->add_flag("--pretrain", pretrain_only, "check the pretraining accuracy bound instead");
  CLI11_PARSE(app, argc, argv);

  try {
    if (*prepare) {
      // Reuse the model when its manifest records this exact config.
      if (fs::exists(RunManifest::path_in(model))) {
        const auto m = RunManifest::load(model);
        if (!m.inputs.empty() && m.inputs.front().sha256 == sha256_file(config)) {
          verify_against_manifest(model / "checkpoint.bin");
          verify_against_manifest(model / "checkpoint_planted.bin");
          std::cout << "acceptance model up to date in " << model << '\n';
          return 0;
        }
      }
      cmd_train({config, model}, std::cout);
      const auto ckpt = load_checkpoint(model / "checkpoint.bin");
      for (const auto& row : evaluate_heldout(ckpt, 12345, 512, 0))
        std::cout << "held-out " << row.task << " accuracy " << format_sig9(row.accuracy) << '\n';
      return 0;
    }

    if (pretrain_only) {
      const auto v = pretraining(model);
      std::cout << (v.pass ? "PASS" : "FAIL") << " [pretrain] held-out accuracy: " << v.detail << std::endl;
      return v.pass ? 0 : 1;
    }
    if (criteria.empty()) criteria = {1, 2, 3, 4, 5, 6, 7, 8};
    const auto m = load_model(model);
    SeedFits induction_fits;
    bool all = true;
    for (int c : criteria) {
      Verdict v;
      switch (c) {
        case 1: v = gate_identity(m); break;
        case 2: v = gradient_check(); break;
        case 3: v = regularizer_analytics(m); break;
        case 4: v = ablation_ordering(m, induction_fits); break;
        case 5:
          if (induction_fits.seeds.empty()) induction_fits = fit_seeds(m.planted, "induction", kC5Seeds, FitConfig{}, 256);
          v = table2_inequality(m, induction_fits);
          break;
        case 6: v = cma_agreement(m); break;
        case 7: v = contrastive_pattern(m); break;
        case 8:
          if (chg_bin.empty()) throw ConfigError("criterion 8 needs --chg");
          v = determinism(model, work, chg_bin);
          break;
        default: throw ConfigError("unknown criterion " + std::to_string(c));
      }
      std::cout << (v.pass ? "PASS" : "FAIL") << " [" << c << "] " << kTitles[c] << ": " << v.detail << std::endl;
      all = all && v.pass;
    }
    return all ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}
