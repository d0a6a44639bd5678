#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chg/fit.hpp"
#include "chg/train.hpp"

namespace chg {

// Flat "key = value" text. Blank lines and '#' comments are ignored; every
// diagnostic names the source and line.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, std::string source = "<config>");
  // MissingArtifactError if the file does not exist.
  static KeyValueConfig load(const std::filesystem::path& path);

  // ConfigError for the first key not in `allowed`.
  void check_keys(std::span<const std::string_view> allowed) const;
  // ConfigError naming the first absent key.
  void require(std::span<const std::string_view> keys) const;

  bool has(std::string_view key) const;
  std::string get_string(std::string_view key, std::string fallback) const;
  double get_double(std::string_view key, double fallback) const;
  std::size_t get_size(std::string_view key, std::size_t fallback) const;
  std::uint64_t get_u64(std::string_view key, std::uint64_t fallback) const;
  // Sorted snapshot for manifests.
  std::map<std::string, std::string> entries() const;
  const std::string& source() const { return source_; }

 private:
  struct Entry {
    std::string value;
    std::size_t line = 0;
  };
  std::string where(std::string_view key) const;
  std::string source_;
  std::map<std::string, Entry, std::less<>> entries_;
};

// Train command: required "seed" and "steps"; planted_layer/planted_head
// (both or neither) name the head zeroed in the derived checkpoint.
struct TrainJob {
  TrainConfig train;
  bool plant = false;
  std::size_t planted_layer = 0;
  std::size_t planted_head = 0;
};

TrainJob train_job_from(const KeyValueConfig& kv);

// Fit-side commands. Every key optional; unknown keys rejected.
struct FitJob {
  FitConfig fit;
  std::size_t n_examples = 256;       // fitting pool per seed
  std::size_t eval_examples = 128;    // ablation / accuracy batches
  std::size_t k_max = 0;              // 0 = all heads
  std::size_t cma_pairs = 64;
  std::string precision = "fp32";
};

FitJob fit_job_from(const KeyValueConfig& kv);

}  // namespace chg
