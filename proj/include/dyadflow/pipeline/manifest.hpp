#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace dyadflow::pipeline {

// SHA-1 over "blob <size>\0<bytes>", the object id git would assign.
std::string git_blob_hash(const std::string& bytes);
std::string git_blob_hash_file(const std::filesystem::path& path);

// Run record written next to the outputs. Output files carry its file name
// (containers under "meta/manifest", JSON reports under "manifest").
class Manifest {
 public:
  Manifest(std::string command, nlohmann::json config, std::uint64_t seed);

  const std::string& file_name() const { return file_name_; }
  const nlohmann::json& config() const { return config_; }

  void add_input(const std::string& label, const std::string& bytes);
  void add_input_file(const std::filesystem::path& path);
  void add_output(const std::filesystem::path& path);
  // Extra top-level fields (results summary, argv, ...).
  void set(const std::string& key, nlohmann::json value);

  // Combined hash over every input, in insertion order.
  std::string inputs_hash() const;
  nlohmann::json to_json() const;
  // Stamps the wall time and writes <dir>/<file_name()>.
  std::filesystem::path write(const std::filesystem::path& dir);

 private:
  std::string command_;
  std::string file_name_;
  nlohmann::json config_;
  std::uint64_t seed_;
  std::vector<std::pair<std::string, std::string>> inputs_;   // label, hash
  std::vector<std::pair<std::string, std::string>> outputs_;  // path, hash
  nlohmann::json extra_ = nlohmann::json::object();
  std::chrono::steady_clock::time_point start_;
  double wall_seconds_ = 0.0;
};

std::string read_file(const std::filesystem::path& path);
// Writes via a temporary file and rename, so readers never see partial output.
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace dyadflow::pipeline
