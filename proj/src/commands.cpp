#include "chg/commands.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <map>
#include <ostream>
#include <set>
#include <thread>

#include "chg/analysis.hpp"
#include "chg/config.hpp"
#include "chg/evaluate.hpp"
#include "chg/fit.hpp"
#include "chg/io.hpp"
#include "chg/manifest.hpp"
#include "chg/rng.hpp"
#include "chg/tasks.hpp"
#include "chg/train.hpp"

namespace chg {

namespace {

std::string abs_path(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

// Collects written files for the manifest.
struct Outputs {
  fs::path dir;
  std::vector<FileHash> files;

  explicit Outputs(fs::path d) : dir(std::move(d)) { fs::create_directories(dir); }

  void write(const std::string& name, std::string_view content) {
    atomic_write(dir / name, content);
    files.push_back({name, sha256_hex(content)});
  }
};

FileHash input_hash(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifactError(p.string());
  return {abs_path(p), sha256_file(p)};
}

template <typename Fn>
auto with_precision(const std::string& precision, const ModelCheckpoint& ckpt, Fn&& fn) {
  if (precision == "fp64") {
    const auto w = weights_cast<double>(ckpt);
    return fn(w);
  }
  if (precision != "fp32") throw ConfigError("precision must be fp32 or fp64, got '" + precision + "'");
  return fn(ckpt);
}

// Runs fn(i) for i in [0, n) on worker_count(n) threads. The exception of the
// lowest failing index is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const auto workers = worker_count(n);
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t)
      pool.emplace_back([&] {
        for (auto i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<std::uint64_t> seed_list(std::uint64_t base, std::size_t n) {
  if (n == 0) throw ConfigError("--seeds must be at least 1");
  std::vector<std::uint64_t> seeds(n);
  for (std::size_t i = 0; i < n; ++i) seeds[i] = base + i;
  return seeds;
}

std::map<std::string, std::string> job_entries(const FitJob& job) {
  std::map<std::string, std::string> m;
  const auto text = job.fit.to_text();
  const auto kv = KeyValueConfig::parse(text, "<fit>").entries();
  m.insert(kv.begin(), kv.end());
  m["n_examples"] = std::to_string(job.n_examples);
  m["eval_examples"] = std::to_string(job.eval_examples);
  m["k_max"] = std::to_string(job.k_max);
  m["cma_pairs"] = std::to_string(job.cma_pairs);
  m["precision"] = job.precision;
  return m;
}

std::string entries_text(const std::map<std::string, std::string>& m) {
  std::string s;
  for (const auto& [k, v] : m) s += k + "=" + v + "\n";
  return s;
}

FitJob load_fit_job(const std::optional<fs::path>& config) {
  return config ? fit_job_from(KeyValueConfig::load(*config)) : fit_job_from(KeyValueConfig::parse("", "<defaults>"));
}

// The fit job recorded in a fit manifest, with `override_path` entries on top.
FitJob job_from_manifest(const RunManifest& m, const std::optional<fs::path>& override_path) {
  auto entries = m.config;
  entries.erase("task");
  if (override_path)
    for (const auto& [k, v] : KeyValueConfig::load(*override_path).entries()) entries[k] = v;
  return fit_job_from(KeyValueConfig::parse(entries_text(entries), override_path ? override_path->string() : "<manifest>"));
}

struct LoadedFits {
  RunManifest manifest;
  std::string task;
  fs::path checkpoint;
  std::vector<std::uint64_t> seeds;
  std::vector<ChgResult> results;
  std::vector<FileHash> inputs;
};

std::string gates_name(std::uint64_t seed) { return "gates_seed" + std::to_string(seed) + ".csv"; }

LoadedFits load_fits(const fs::path& dir) {
  LoadedFits f;
  f.manifest = RunManifest::load(dir);
  if (f.manifest.command != "fit")
    throw IntegrityError(RunManifest::path_in(dir).string() + ": expected a fit manifest, found '" + f.manifest.command + "'");
  const auto it = f.manifest.config.find("task");
  if (it == f.manifest.config.end() || f.manifest.inputs.empty())
    throw IntegrityError(RunManifest::path_in(dir).string() + ": missing task or checkpoint entry");
  f.task = it->second;
  f.checkpoint = f.manifest.inputs.front().path;
  f.seeds = f.manifest.seeds;
  f.inputs.push_back(input_hash(RunManifest::path_in(dir)));
  for (auto s : f.seeds) {
    const auto path = dir / gates_name(s);
    verify_against_manifest(path);
    f.results.push_back(parse_gates_csv(read_file(path)));
    f.inputs.push_back(input_hash(path));
  }
  return f;
}

// Loads the checkpoint and checks it against an expected hash.
ModelCheckpoint load_checkpoint_expecting(const fs::path& path, const std::string& sha) {
  const auto bytes = read_file(path);
  const auto actual = sha256_hex(bytes);
  if (actual != sha)
    throw IntegrityError(path.string() + ": sha256 " + actual + " differs from the recorded " + sha);
  return deserialize_checkpoint(bytes);
}

std::string sanitize(std::string_view task) {
  std::string s(task);
  for (auto& c : s)
    if (c == ':' || c == ',' || c == '/' || c == ' ') c = '_';
  return s;
}

}  // namespace

std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CHG_THREADS")) {
    const std::string_view s(env);
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || v == 0)
      throw ConfigError("CHG_THREADS must be a positive integer, got '" + std::string(s) + "'");
    n = v;
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const MissingArtifactError*>(&e)) return 4;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const GenerationError*>(&e) ||
      dynamic_cast<const CorruptionError*>(&e))
    return 2;
  return 3;
}

// ---- train ------------------------------------------------------------------------------

void cmd_train(const TrainArgs& args, std::ostream& log) {
  const auto kv = KeyValueConfig::load(args.config);
  const auto job = train_job_from(kv);
  const auto init = init_weights(job.train.model, derive_seed(job.train.seed, "init"));
  const auto result = train(job.train, init, [&](const MetricRow& r) {
    log << "step " << r.step << ' ' << r.task << " loss=" << format_sig9(r.loss) << " acc=" << format_sig9(r.accuracy)
        << std::endl;  // long runs: keep progress visible
  });
  Outputs out(args.out);
  out.write("checkpoint.bin", serialize_checkpoint(result.checkpoint));
  if (job.plant) {
    auto planted = result.checkpoint.deep_copy();
    plant_irrelevant_head(planted, job.planted_layer, job.planted_head);
    out.write("checkpoint_planted.bin", serialize_checkpoint(planted));
  }
  out.write("metrics.csv", metrics_csv(result.log));
  out.write("symbols.tsv", vocab::symbol_table_text());
  RunManifest m;
  m.command = "train";
  m.config = kv.entries();
  m.seeds = {job.train.seed};
  m.inputs = {input_hash(args.config)};
  m.outputs = out.files;
  m.write(args.out);
}

// ---- fit --------------------------------------------------------------------------------

void cmd_fit(const FitArgs& args, std::ostream& log) {
  auto job = load_fit_job(args.config);
  if (args.lambda_plus) job.fit.lambda_plus = *args.lambda_plus;
  if (args.lambda_minus) job.fit.lambda_minus = *args.lambda_minus;
  if (args.precision) job.precision = *args.precision;
  if (job.precision != "fp32" && job.precision != "fp64")
    throw ConfigError("--precision must be fp32 or fp64, got '" + job.precision + "'");
  job.fit.validate();
  if (!(job.fit.lambda_plus > 0.0)) log << "warning: lambda-plus is not positive\n";
  if (!(job.fit.lambda_minus < 0.0)) log << "warning: lambda-minus is not negative\n";
  make_task(args.task, 0, 1);  // rejects unknown task specs before any work

  verify_against_manifest(args.checkpoint);
  const auto ckpt = load_checkpoint(args.checkpoint);
  const auto seeds = seed_list(job.fit.seed, args.seeds);
  std::vector<ChgResult> results(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    auto cfg = job.fit;
    cfg.seed = seeds[i];
    const auto data = make_task(args.task, derive_seed(seeds[i], "data"), job.n_examples);
    results[i] = with_precision(job.precision, ckpt, [&](const auto& w) { return fit_chg(w, data, cfg); });
  });

  Outputs out(args.out);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    out.write(gates_name(seeds[i]), gates_csv(results[i]));
    out.write("trace_seed" + std::to_string(seeds[i]) + ".csv", trace_csv(results[i].trace));
    log << "seed " << seeds[i] << ": fitted " << args.task << '\n';
  }
  RunManifest m;
  m.command = "fit";
  m.config = job_entries(job);
  m.config["task"] = args.task;
  m.seeds = seeds;
  m.inputs = {input_hash(args.checkpoint)};
  if (args.config) m.inputs.push_back(input_hash(*args.config));
  m.outputs = out.files;
  m.write(args.out);
}

// ---- ablate -----------------------------------------------------------------------------

void cmd_ablate(const AblateArgs& args, std::ostream& log) {
  const auto fits = load_fits(args.fits);
  const auto job = job_from_manifest(fits.manifest, args.config);
  std::vector<Metric> metrics;
  if (args.metric == "all")
    metrics = {Metric::facilitation, Metric::irrelevance, Metric::interference};
  else
    metrics = {parse_metric(args.metric)};
  const auto ckpt = load_checkpoint_expecting(fits.checkpoint, fits.manifest.inputs.front().sha256);
  const auto n_heads = ckpt.config.n_layers * ckpt.config.n_heads;
  const auto k_max = job.k_max == 0 ? n_heads : job.k_max;

  std::vector<std::vector<AblationCurve>> per_seed(fits.seeds.size());
  parallel_for(fits.seeds.size(), [&](std::size_t i) {
    const auto s = fits.seeds[i];
    const auto data = make_task(fits.task, derive_seed(s, "eval"), job.eval_examples);
    const auto scores = taxonomy_scores(fits.results[i].gplus, fits.results[i].gminus, s);
    for (auto metric : metrics)
      per_seed[i].push_back(with_precision(job.precision, ckpt, [&](const auto& w) {
        return sequential_ablation(w, data, fits.results[i].gplus, scores, metric, k_max);
      }));
  });

  std::vector<AblationCurve> curves;
  for (const auto& v : per_seed) curves.insert(curves.end(), v.begin(), v.end());
  std::string mean = "metric,k,mean_delta\n";
  for (std::size_t mi = 0; mi < metrics.size(); ++mi)
    for (std::size_t k = 0; k <= k_max; ++k) {
      double acc = 0.0;
      for (const auto& v : per_seed) acc += v[mi].delta[k];
      mean += std::string(metric_name(metrics[mi])) + ',' + std::to_string(k) + ',' +
              format_sig9(acc / static_cast<double>(per_seed.size())) + '\n';
    }

  Outputs out(args.out);
  out.write("ablation.csv", ablation_csv(curves));
  out.write("ablation_mean.csv", mean);
  log << "ablated " << metrics.size() << " metric(s) over " << fits.seeds.size() << " seed(s)\n";
  RunManifest m;
  m.command = "ablate";
  m.config = job_entries(job);
  m.config["task"] = fits.task;
  m.config["metric"] = args.metric;
  m.seeds = fits.seeds;
  m.inputs = fits.inputs;
  m.inputs.push_back(fits.manifest.inputs.front());
  if (args.config) m.inputs.push_back(input_hash(*args.config));
  m.outputs = out.files;
  m.write(args.out);
}

// ---- cma --------------------------------------------------------------------------------

void cmd_cma(const CmaArgs& args, std::ostream& log) {
  const auto fits = load_fits(args.fits);
  const auto job = job_from_manifest(fits.manifest, args.config);
  const auto task = args.task.value_or(fits.task);
  const auto ckpt = load_checkpoint_expecting(fits.checkpoint, fits.manifest.inputs.front().sha256);
  const auto base = fits.seeds.front();
  const auto batch = make_task(task, derive_seed(base, "cma"), job.cma_pairs);
  const auto pairs = corrupt_shuffle(batch, derive_seed(base, "shuffle"));
  const auto effects =
      with_precision(job.precision, ckpt, [&](const auto& w) { return indirect_effect(w, pairs, nullptr); });
  std::vector<HeadScores> scores;
  for (std::size_t i = 0; i < fits.seeds.size(); ++i)
    scores.push_back(taxonomy_scores(fits.results[i].gplus, fits.results[i].gminus, fits.seeds[i]));
  const auto report = cma_chg_agreement(effects, scores);
  if (!report.warning.empty()) log << "warning: " << report.warning << '\n';
  log << "mediators=" << report.mediators.size() << " t=" << format_sig9(report.welch.t)
      << " p=" << format_sig9(report.welch.p_one_sided) << '\n';

  Outputs out(args.out);
  out.write("effects.csv", effects_csv(effects));
  out.write("cma_report.csv", cma_report_csv(report));
  RunManifest m;
  m.command = "cma";
  m.config = job_entries(job);
  m.config["task"] = task;
  m.seeds = fits.seeds;
  m.inputs = fits.inputs;
  m.inputs.push_back(fits.manifest.inputs.front());
  if (args.config) m.inputs.push_back(input_hash(*args.config));
  m.outputs = out.files;
  m.write(args.out);
}

// ---- contrast ---------------------------------------------------------------------------

void cmd_contrast(const ContrastArgs& args, std::ostream& log) {
  auto job = load_fit_job(args.config);
  if (args.lambda_minus) job.fit.lambda_minus = *args.lambda_minus;
  if (args.precision) job.precision = *args.precision;
  job.fit.validate();
  if (!(job.fit.lambda_minus < 0.0)) throw ConfigError("contrast: lambda-minus must be negative");
  if (args.retain == args.forget) log << "warning: retain and forget task lists are identical\n";
  auto eval = args.eval;
  if (eval.empty()) eval = {args.retain, args.forget};
  for (const auto& t : {args.retain, args.forget}) make_task(t, 0, 1);
  for (const auto& t : eval) make_task(t, 0, 1);

  verify_against_manifest(args.checkpoint);
  const auto ckpt = load_checkpoint(args.checkpoint);
  const auto seeds = seed_list(job.fit.seed, args.seeds);
  std::vector<GateMatrix> gates(seeds.size());
  std::vector<std::vector<TracePoint>> traces(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    auto cfg = job.fit;
    cfg.seed = seeds[i];
    const auto retain = make_task(args.retain, derive_seed(seeds[i], "retain"), job.n_examples);
    const auto forget = make_task(args.forget, derive_seed(seeds[i], "forget"), job.n_examples);
    gates[i] = with_precision(job.precision, ckpt, [&](const auto& w) {
      return fit_contrastive(w, retain, forget, cfg.lambda_minus, cfg, &traces[i]);
    });
  });

  std::string acc = "seed,task,baseline_accuracy,gated_accuracy,ratio\n";
  for (const auto& t : eval) {
    const auto batch = make_task(t, derive_seed(seeds.front(), "eval"), job.eval_examples);
    const double baseline =
        with_precision(job.precision, ckpt, [&](const auto& w) { return greedy_accuracy(w, batch, nullptr); });
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const double gated =
          with_precision(job.precision, ckpt, [&](const auto& w) { return greedy_accuracy(w, batch, &gates[i]); });
      acc += std::to_string(seeds[i]) + ',' + t + ',' + format_sig9(baseline) + ',' + format_sig9(gated) + ',' +
             format_sig9(baseline > 0.0 ? gated / baseline : std::numeric_limits<double>::quiet_NaN()) + '\n';
      log << "seed " << seeds[i] << ' ' << t << ": baseline " << format_sig9(baseline) << ", gated "
          << format_sig9(gated) << '\n';
    }
  }

  Outputs out(args.out);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    out.write("contrast_gates_seed" + std::to_string(seeds[i]) + ".csv",
              gate_matrix_csv(gates[i], "contrastive", [&] {
                auto cfg = job.fit;
                cfg.seed = seeds[i];
                return cfg.fingerprint();
              }()));
    out.write("contrast_trace_seed" + std::to_string(seeds[i]) + ".csv", trace_csv(traces[i]));
  }
  out.write("accuracy.csv", acc);
  RunManifest m;
  m.command = "contrast";
  m.config = job_entries(job);
  m.config["retain"] = args.retain;
  m.config["forget"] = args.forget;
  std::string eval_list;
  for (const auto& t : eval) eval_list += (eval_list.empty() ? "" : ";") + t;
  m.config["eval"] = eval_list;
  m.seeds = seeds;
  m.inputs = {input_hash(args.checkpoint)};
  if (args.config) m.inputs.push_back(input_hash(*args.config));
  m.outputs = out.files;
  m.write(args.out);
}

// ---- report -----------------------------------------------------------------------------

void cmd_report(const ReportArgs& args, std::ostream& log) {
  if (args.fits.empty()) throw ConfigError("report: at least one --fits directory is required");
  if (!(args.tau > 0.0 && args.tau < 1.0)) throw ConfigError("report: --tau must be in (0,1)");
  std::vector<LoadedFits> all;
  std::set<std::string> names;
  for (const auto& dir : args.fits) {
    all.push_back(load_fits(dir));
    if (!names.insert(sanitize(all.back().task)).second)
      throw ConfigError("report: two fit directories share the task '" + all.back().task + "'");
  }
  Outputs out(args.out);
  RunManifest m;
  m.command = "report";
  m.config["tau"] = format_sig9(args.tau);
  for (const auto& f : all) {
    const auto name = sanitize(f.task);
    std::vector<HeadScores> scores;
    for (std::size_t i = 0; i < f.seeds.size(); ++i)
      scores.push_back(taxonomy_scores(f.results[i].gplus, f.results[i].gminus, f.seeds[i]));
    std::vector<std::pair<AggregateMode, AggregatedScores>> aggs;
    for (auto mode : {AggregateMode::always, AggregateMode::any, AggregateMode::mean})
      aggs.emplace_back(mode, aggregate_seeds(scores, mode));
    out.write("scores_" + name + ".csv", head_scores_csv(scores));
    out.write("aggregated_" + name + ".csv", aggregated_csv(aggs));
    out.write("thresholds_" + name + ".csv", threshold_csv(aggs, args.tau));
    for (const auto& [mode, a] : aggs)
      out.write("heatmap_" + name + "_" + std::string(aggregate_mode_name(mode)) + ".svg",
                heatmap_svg(a, f.task + " (" + std::string(aggregate_mode_name(mode)) + ", " +
                                   std::to_string(f.seeds.size()) + " seeds)"));
    m.config["task." + name] = f.task;
    m.seeds.insert(m.seeds.end(), f.seeds.begin(), f.seeds.end());
    m.inputs.insert(m.inputs.end(), f.inputs.begin(), f.inputs.end());
    log << "report: " << f.task << " over " << f.seeds.size() << " seed(s)\n";
  }
  m.outputs = out.files;
  m.write(args.out);
}

}  // namespace chg
