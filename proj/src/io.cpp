#include "chg/io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace chg {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError(path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void atomic_write(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_sig9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---- checkpoint ---------------------------------------------------------------

namespace {

constexpr std::string_view kMagic = "CHGCKPT1";

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw IntegrityError(std::string("checkpoint truncated reading ") + what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <typename U>
  U get_le(const char* what) {
    auto s = take(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ModelCheckpoint& ckpt) {
  std::string out(kMagic);
  std::string config_text;
  for (const auto& [k, v] : to_key_values(ckpt.config)) config_text += k + "=" + v + "\n";
  put_le<std::uint64_t>(out, config_text.size());
  out += config_text;
  const auto named = ckpt.named();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
    for (float f : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

ModelCheckpoint deserialize_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(kMagic.size(), "magic") != kMagic) throw IntegrityError("checkpoint: bad magic, expected CHGCKPT1");
  const auto cfg_len = r.get_le<std::uint64_t>("config length");
  if (cfg_len > bytes.size()) throw IntegrityError("checkpoint: config length exceeds file size");
  const auto cfg_text = r.take(static_cast<std::size_t>(cfg_len), "config");
  std::map<std::string, std::string> kv;
  std::size_t start = 0;
  while (start < cfg_text.size()) {
    auto end = cfg_text.find('\n', start);
    if (end == std::string_view::npos) throw IntegrityError("checkpoint: unterminated config line");
    auto line = cfg_text.substr(start, end - start);
    auto eq = line.find('=');
    if (eq == std::string_view::npos) throw IntegrityError("checkpoint: config line without '='");
    kv.emplace(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
    start = end + 1;
  }
  ModelConfig config;
  try {
    config = model_config_from_key_values(kv);
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("checkpoint: ") + e.what());
  }

  // Shapes come from a freshly initialized skeleton; the file must match it.
  ModelCheckpoint ckpt = init_weights(config, 0);
  auto expected = ckpt.named();
  const auto count = r.get_le<std::uint32_t>("tensor count");
  if (count != expected.size())
    throw IntegrityError("checkpoint: " + std::to_string(count) + " tensors, expected " +
                         std::to_string(expected.size()));
  for (auto& [name, t] : expected) {
    const auto name_len = r.get_le<std::uint32_t>("name length");
    const auto got_name = r.take(name_len, "name");
    if (got_name != name)
      throw IntegrityError("checkpoint: tensor '" + std::string(got_name) + "' where '" + name + "' expected");
    const auto rank = r.get_le<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get_le<std::uint64_t>("dim"));
    if (shape != t.shape())
      throw IntegrityError("checkpoint: tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                           shape_string(t.shape()));
    auto dst = t.mutable_data();
    for (auto& f : dst) f = std::bit_cast<float>(r.get_le<std::uint32_t>("tensor data"));
  }
  if (!r.done()) throw IntegrityError("checkpoint: trailing bytes after last tensor");
  return ckpt;
}

void save_checkpoint(const fs::path& path, const ModelCheckpoint& ckpt) {
  atomic_write(path, serialize_checkpoint(ckpt));
}

ModelCheckpoint load_checkpoint(const fs::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace chg
