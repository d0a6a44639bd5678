#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace chg {

inline constexpr std::string_view kToolVersion = "chg 1.0.0";

struct FileHash {
  std::string path;  // inputs: as given; outputs: relative to the manifest's directory
  std::string sha256;
  bool operator==(const FileHash&) const = default;
};

// One per output directory. Serialized with sorted keys and no timestamps, so
// identical runs write identical bytes.
struct RunManifest {
  std::string command;
  std::string tool_version{kToolVersion};
  std::map<std::string, std::string> config;
  std::vector<std::uint64_t> seeds;
  std::vector<FileHash> inputs;
  std::vector<FileHash> outputs;

  std::string to_json() const;
  // IntegrityError on malformed text.
  static RunManifest from_json(std::string_view text);

  static std::filesystem::path path_in(const std::filesystem::path& dir) { return dir / "manifest.json"; }
  // MissingArtifactError if absent.
  static RunManifest load(const std::filesystem::path& dir);
  void write(const std::filesystem::path& dir) const;

  // Hash of a recorded output; IntegrityError if not listed.
  const std::string& output_hash(std::string_view name) const;
};

// Recomputes the file's hash and compares with the manifest in its directory.
// MissingArtifactError if file or manifest is absent, IntegrityError on mismatch.
void verify_against_manifest(const std::filesystem::path& file);

}  // namespace chg
