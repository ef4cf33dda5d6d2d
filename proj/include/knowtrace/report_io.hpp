// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/common.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace knowtrace::io {

/// Deterministic float formatting for CSV cells ("%.10g").
std::string fmt(double v);

/// Minimal CSV writer; the caller owns column discipline.
class CsvWriter {
 public:
  explicit CsvWriter(const std::filesystem::path& path);
  void row(const std::vector<std::string>& cells);
  void close();

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

/// Run manifest: command, effective config, input hashes, output hashes,
/// seed, tool version, wall-clock.
struct Manifest {
  std::string command;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> inputs;   // path -> content hash
  std::map<std::string, std::string> outputs;  // file name -> content hash
  uint64_t seed = 0;
  long wall_ms = 0;

  nlohmann::ordered_json to_json() const;
};

/// Output directory written atomically: files accumulate in `<final>.tmp`,
/// commit() hashes them, writes manifest.json, and renames the directory into
/// place. Nothing is left behind on failure.
class AtomicOutDir {
 public:
  explicit AtomicOutDir(const std::filesystem::path& final_dir);
  ~AtomicOutDir();
  AtomicOutDir(const AtomicOutDir&) = delete;
  AtomicOutDir& operator=(const AtomicOutDir&) = delete;

  const std::filesystem::path& path() const { return tmp_; }
  std::filesystem::path file(const std::string& name) const { return tmp_ / name; }
  void commit(Manifest manifest);

 private:
  std::filesystem::path final_;
  std::filesystem::path tmp_;
  bool committed_ = false;
};

/// Load and validate a manifest; verifies the listed output hashes.
Manifest read_manifest(const std::filesystem::path& dir);

/// Hash of an input file for manifest bookkeeping; throws IoError if absent.
std::string input_hash(const std::filesystem::path& path);

std::string tool_version();

}  // namespace knowtrace::io
