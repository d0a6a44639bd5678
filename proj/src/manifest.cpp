#include "chg/manifest.hpp"

#include "chg/errors.hpp"
#include "chg/io.hpp"
#include "json.hpp"

namespace chg {

using nlohmann::json;

namespace {

json hashes_json(const std::vector<FileHash>& v) {
  json a = json::array();
  for (const auto& f : v) a.push_back({{"path", f.path}, {"sha256", f.sha256}});
  return a;
}

std::vector<FileHash> hashes_from(const json& a) {
  std::vector<FileHash> out;
  for (const auto& e : a) out.push_back({e.at("path").get<std::string>(), e.at("sha256").get<std::string>()});
  return out;
}

}  // namespace

std::string RunManifest::to_json() const {
  json j;
  j["command"] = command;
  j["tool_version"] = tool_version;
  j["config"] = config;
  j["seeds"] = seeds;
  j["inputs"] = hashes_json(inputs);
  j["outputs"] = hashes_json(outputs);
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(std::string_view text) {
  try {
    const auto j = json::parse(text);
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config = j.at("config").get<std::map<std::string, std::string>>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.inputs = hashes_from(j.at("inputs"));
    m.outputs = hashes_from(j.at("outputs"));
    return m;
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("manifest: ") + e.what());
  }
}

RunManifest RunManifest::load(const std::filesystem::path& dir) {
  const auto p = path_in(dir);
  try {
    return from_json(read_file(p));
  } catch (const IntegrityError& e) {
    throw IntegrityError(p.string() + ": " + e.what());
  }
}

void RunManifest::write(const std::filesystem::path& dir) const { atomic_write(path_in(dir), to_json()); }

const std::string& RunManifest::output_hash(std::string_view name) const {
  for (const auto& f : outputs)
    if (f.path == name) return f.sha256;
  throw IntegrityError("manifest does not list output '" + std::string(name) + "'");
}

void verify_against_manifest(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw MissingArtifactError(file.string());
  const auto dir = file.parent_path().empty() ? std::filesystem::path(".") : file.parent_path();
  const auto m = RunManifest::load(dir);
  const auto expected = m.output_hash(file.filename().string());
  const auto actual = sha256_file(file);
  if (actual != expected)
    throw IntegrityError(file.string() + ": sha256 " + actual + " does not match manifest " + expected);
}

}  // namespace chg
