#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "chg/model.hpp"

namespace chg {

// Whole-file read; throws MissingArtifactError when the path does not exist.
std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames it over `path`.
void atomic_write(const std::filesystem::path& path, std::string_view content);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// Checkpoint layout (all integers little-endian):
//   "CHGCKPT1"
//   u64 config byte length, then "key=value\n" lines
//   u32 tensor count
//   per tensor: u32 name length, name, u32 rank, u64 dims[rank], fp32 data
std::string serialize_checkpoint(const ModelCheckpoint& ckpt);
ModelCheckpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

// Shortest round-trippable decimal rendering of a double.
std::string format_double(double v);
// %.9g, for CSV columns specified at 9 significant digits.
std::string format_sig9(double v);

}  // namespace chg
