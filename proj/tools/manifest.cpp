#include "manifest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <memory>
#include <sstream>

#include "volformer/binary_io.hpp"
#include "volformer/error.hpp"

namespace vfcli {

using volformer::DataError;

std::string sha256_hex(const std::string& bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw volformer::Error("sha256: OpenSSL digest failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

std::string sha256_dir(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files) listing += f.filename().string() + " " + sha256_file(f) + "\n";
  return sha256_hex(listing);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& path, const std::string& body) {
  volformer::binary::write_file_atomic(path.string(), std::vector<std::uint8_t>(body.begin(), body.end()));
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw DataError(what + " not found: " + path.string());
}

void require_dir(const fs::path& path, const std::string& what) {
  if (!fs::is_directory(path)) throw DataError(what + " not found: " + path.string());
}

Manifest::Manifest(std::string command) : command_(std::move(command)) {}

void Manifest::input_file(const fs::path& path) {
  inputs_.push_back({{"path", path.string()}, {"sha256", sha256_file(path)}});
}

void Manifest::input_dir(const fs::path& path) {
  inputs_.push_back({{"path", path.string()}, {"sha256_listing", sha256_dir(path)}});
}

void Manifest::upstream(const fs::path& manifest_path) {
  upstream_.push_back({{"path", manifest_path.string()}, {"sha256", sha256_file(manifest_path)}});
}

nlohmann::ordered_json Manifest::header() const {
  nlohmann::ordered_json j;
  j["command"] = command_;
  j["version"] = std::string("volformer ") + kVersion;
  j["compiler"] = __VERSION__;
  j["arguments"] = args_;
  j["configs"] = configs_;
  j["config_hash"] = sha256_hex(args_.dump() + configs_.dump());
  j["inputs"] = inputs_;
  if (!upstream_.empty()) j["upstream"] = upstream_;
  return j;
}

void Manifest::write(const fs::path& dir, const std::string& name) const {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != name) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (auto& f : files) f = fs::relative(f, dir);
  write_listing(dir / name, files);
}

void Manifest::write_listing(const fs::path& path, const std::vector<fs::path>& outputs) const {
  auto j = header();
  auto& listed = j["outputs"];
  listed = nlohmann::ordered_json::array();
  const auto base = path.parent_path();
  for (const auto& f : outputs) listed.push_back({{"path", f.string()}, {"sha256", sha256_file(base / f)}});
  if (!results_.empty()) j["results"] = results_;
  write_text(path, j.dump(2) + "\n");
}

StagedDir::StagedDir(fs::path final_path) : final_(final_path.lexically_normal()) {
  if (!final_.has_filename()) final_ = final_.parent_path();  // "out/" names "out"
  stage_ = final_;
  stage_ += ".partial";
  fs::remove_all(stage_);
  fs::create_directories(stage_);
}

StagedDir::~StagedDir() {
  if (!committed_) {
    std::error_code ignored;
    fs::remove_all(stage_, ignored);
  }
}

void StagedDir::commit() {
  fs::remove_all(final_);
  if (final_.has_parent_path()) fs::create_directories(final_.parent_path());
  fs::rename(stage_, final_);
  committed_ = true;
}

}  // namespace vfcli
