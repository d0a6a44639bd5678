// chg: command-line driver for training, gate fitting and head analysis.
#include <iostream>

#include "CLI11.hpp"
#include "chg/commands.hpp"
#include "chg/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Causal head gating on a toy transformer"};
  app.require_subcommand(1);

  chg::TrainArgs train;
  auto* c_train = app.add_subcommand("train", "pretrain the toy transformer on the synthetic mixture");
  c_train->add_option("--config", train.config, "key=value training config")->required();
  c_train->add_option("--out", train.out, "output directory")->required();

  chg::FitArgs fit;
  std::string fit_precision;
  auto* c_fit = app.add_subcommand("fit", "fit G0, G+ and G- gate matrices per seed");
  c_fit->add_option("--checkpoint", fit.checkpoint, "checkpoint.bin written by train")->required();
  c_fit->add_option("--task", fit.task, "induction | aba | abb | kv-icl[:ids] | kv-instr[:ids]")->required();
  c_fit->add_option("--seeds", fit.seeds, "number of seeds, counted up from the config seed")->capture_default_str();
  c_fit->add_option("--out", fit.out, "output directory")->required();
  c_fit->add_option("--config", fit.config, "key=value fit config");
  c_fit->add_option("--lambda-plus", fit.lambda_plus, "density pressure (> 0)");
  c_fit->add_option("--lambda-minus", fit.lambda_minus, "sparsity pressure (< 0)");
  c_fit->add_option("--precision", fit.precision, "fp32 | fp64");

  chg::AblateArgs ablate;
  auto* c_ablate = app.add_subcommand("ablate", "sequential ablation curves from fitted gates");
  c_ablate->add_option("--fits", ablate.fits, "fit output directory")->required();
  c_ablate->add_option("--metric", ablate.metric, "facilitation | interference | irrelevance | all")
      ->capture_default_str();
  c_ablate->add_option("--out", ablate.out, "output directory")->required();
  c_ablate->add_option("--config", ablate.config, "overrides for eval_examples, k_max, precision");

  chg::CmaArgs cma;
  auto* c_cma = app.add_subcommand("cma", "activation patching and agreement with facilitation scores");
  c_cma->add_option("--fits", cma.fits, "fit output directory (two or more seeds)")->required();
  c_cma->add_option("--task", cma.task, "kv-icl task spec; defaults to the fitted task");
  c_cma->add_option("--out", cma.out, "output directory")->required();
  c_cma->add_option("--config", cma.config, "overrides for cma_pairs, precision");

  chg::ContrastArgs contrast;
  auto* c_contrast = app.add_subcommand("contrast", "contrastive retain/forget gate fit");
  c_contrast->add_option("--checkpoint", contrast.checkpoint, "checkpoint.bin written by train")->required();
  c_contrast->add_option("--retain", contrast.retain, "task spec to retain")->required();
  c_contrast->add_option("--forget", contrast.forget, "task spec to forget")->required();
  c_contrast->add_option("--eval", contrast.eval, "task spec to score (repeatable)");
  c_contrast->add_option("--seeds", contrast.seeds, "number of seeds")->capture_default_str();
  c_contrast->add_option("--out", contrast.out, "output directory")->required();
  c_contrast->add_option("--config", contrast.config, "key=value fit config");
  c_contrast->add_option("--lambda-minus", contrast.lambda_minus, "sparsity pressure (< 0)");
  c_contrast->add_option("--precision", contrast.precision, "fp32 | fp64");

  chg::ReportArgs report;
  auto* c_report = app.add_subcommand("report", "aggregate seeds into score tables and heatmaps");
  c_report->add_option("--fits", report.fits, "fit output directories")->required();
  c_report->add_option("--out", report.out, "output directory")->required();
  c_report->add_option("--tau", report.tau, "threshold for the percentage tables")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*c_train) chg::cmd_train(train, std::cerr);
    if (*c_fit) chg::cmd_fit(fit, std::cerr);
    if (*c_ablate) chg::cmd_ablate(ablate, std::cerr);
    if (*c_cma) chg::cmd_cma(cma, std::cerr);
    if (*c_contrast) chg::cmd_contrast(contrast, std::cerr);
    if (*c_report) chg::cmd_report(report, std::cerr);
  } catch (const chg::MissingArtifactError& e) {
    std::cerr << "error: missing artifact: " << e.path() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return chg::exit_code_for(e);
  }
  return 0;
}
