#include "dyadflow/pipeline/manifest.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "dyadflow/errors.hpp"

namespace dyadflow::pipeline {

using nlohmann::json;

std::string git_blob_hash(const std::string& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || !EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) ||
      !EVP_DigestUpdate(ctx.get(), header.data(), header.size()) ||
      !EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) || !EVP_DigestFinal_ex(ctx.get(), digest, &len))
    throw ContractError("sha1 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    const unsigned char b = digest[i];
    out += hex[b >> 4];
    out += hex[b & 15];
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ContractError("cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ContractError("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::string git_blob_hash_file(const std::filesystem::path& path) { return git_blob_hash(read_file(path)); }

Manifest::Manifest(std::string command, json config, std::uint64_t seed)
    : command_(std::move(command)),
      file_name_(command_ + ".manifest.json"),
      config_(std::move(config)),
      seed_(seed),
      start_(std::chrono::steady_clock::now()) {
  add_input("config", config_.dump());
}

void Manifest::add_input(const std::string& label, const std::string& bytes) {
  inputs_.emplace_back(label, git_blob_hash(bytes));
}

void Manifest::add_input_file(const std::filesystem::path& path) {
  inputs_.emplace_back(path.filename().string(), git_blob_hash_file(path));
}

void Manifest::add_output(const std::filesystem::path& path) {
  outputs_.emplace_back(path.filename().string(), git_blob_hash_file(path));
}

void Manifest::set(const std::string& key, json value) { extra_[key] = std::move(value); }

std::string Manifest::inputs_hash() const {
  std::string listing;
  for (const auto& [label, hash] : inputs_) listing += hash + " " + label + "\n";
  return git_blob_hash(listing);
}

json Manifest::to_json() const {
  json j;
  j["command"] = command_;
  j["seed"] = seed_;
  j["config"] = config_;
  json ins = json::array();
  for (const auto& [label, hash] : inputs_) ins.push_back({{"name", label}, {"hash", hash}});
  j["inputs"] = ins;
  j["inputs_hash"] = inputs_hash();
  json outs = json::array();
  for (const auto& [path, hash] : outputs_) outs.push_back({{"path", path}, {"hash", hash}});
  j["outputs"] = outs;
  j["wall_time_seconds"] = wall_seconds_;
  for (const auto& [k, v] : extra_.items()) j[k] = v;
  return j;
}

std::filesystem::path Manifest::write(const std::filesystem::path& dir) {
  wall_seconds_ = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  const auto path = dir / file_name_;
  write_file(path, to_json().dump(2) + "\n");
  return path;
}

}  // namespace dyadflow::pipeline
