#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace vfcli {

namespace fs = std::filesystem;

inline constexpr const char* kVersion = "0.1.0";

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const fs::path& path);
// Digest of the sorted (name, file digest) listing of the regular files in `dir`.
std::string sha256_dir(const fs::path& dir);

// Reads a whole file; throws DataError naming the path when it is missing.
std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& body);
void require_file(const fs::path& path, const std::string& what);
void require_dir(const fs::path& path, const std::string& what);

// Provenance record written beside every command's outputs. Holds no
// wall-clock values, so identical inputs give identical bytes.
class Manifest {
 public:
  explicit Manifest(std::string command);

  void argument(const std::string& key, const nlohmann::ordered_json& value) { args_[key] = value; }
  void config(const std::string& name, const std::string& text) { configs_[name] = text; }
  void input_file(const fs::path& path);
  void input_dir(const fs::path& path);
  // Another manifest this run consumed (e.g. evaluate reading train runs).
  void upstream(const fs::path& manifest_path);
  void result(const std::string& key, const nlohmann::ordered_json& value) { results_[key] = value; }

  // Hashes every regular file under `dir` except the manifest itself and
  // writes dir/<name>.
  void write(const fs::path& dir, const std::string& name = "manifest.json") const;
  // Writes `path`, listing only `outputs` (paths relative to the manifest's
  // directory).
  void write_listing(const fs::path& path, const std::vector<fs::path>& outputs) const;

 private:
  nlohmann::ordered_json header() const;

  std::string command_;
  nlohmann::ordered_json args_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json configs_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json inputs_ = nlohmann::ordered_json::array();
  nlohmann::ordered_json upstream_ = nlohmann::ordered_json::array();
  nlohmann::ordered_json results_ = nlohmann::ordered_json::object();
};

// Output directory built under "<dir>.partial" and renamed into place on
// commit, so readers never see a half-written directory.
class StagedDir {
 public:
  explicit StagedDir(fs::path final_path);
  ~StagedDir();
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;

  const fs::path& path() const { return stage_; }
  void commit();

 private:
  fs::path final_;
  fs::path stage_;
  bool committed_ = false;
};

}  // namespace vfcli
