#pragma once

#include <cstddef>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace chg {

namespace fs = std::filesystem;

struct TrainArgs {
  fs::path config;
  fs::path out;
};

struct FitArgs {
  fs::path checkpoint;
  std::string task;
  std::size_t seeds = 10;
  fs::path out;
  std::optional<fs::path> config;
  std::optional<double> lambda_plus;
  std::optional<double> lambda_minus;
  std::optional<std::string> precision;
};

struct AblateArgs {
  fs::path fits;
  std::string metric = "all";
  fs::path out;
  std::optional<fs::path> config;
};

struct CmaArgs {
  fs::path fits;
  std::optional<std::string> task;
  fs::path out;
  std::optional<fs::path> config;
};

struct ContrastArgs {
  fs::path checkpoint;
  std::string retain;
  std::string forget;
  std::vector<std::string> eval;
  std::size_t seeds = 1;
  fs::path out;
  std::optional<fs::path> config;
  std::optional<double> lambda_minus;
  std::optional<std::string> precision;
};

struct ReportArgs {
  std::vector<fs::path> fits;
  fs::path out;
  double tau = 0.5;
};

// Each command writes its artifacts plus manifest.json into `out` and logs
// progress and warnings to `log`.
void cmd_train(const TrainArgs& args, std::ostream& log);
void cmd_fit(const FitArgs& args, std::ostream& log);
void cmd_ablate(const AblateArgs& args, std::ostream& log);
void cmd_cma(const CmaArgs& args, std::ostream& log);
void cmd_contrast(const ContrastArgs& args, std::ostream& log);
void cmd_report(const ReportArgs& args, std::ostream& log);

// 2 config, 3 integrity, 4 missing artifact.
int exit_code_for(const std::exception& e);

// Number of worker threads for per-seed work: CHG_THREADS if set, else the
// hardware concurrency, never more than `jobs`.
std::size_t worker_count(std::size_t jobs);

}  // namespace chg
