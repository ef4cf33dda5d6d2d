// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/report_io.hpp"

#include "knowtrace/hash.hpp"

#include <cstdio>
#include <fstream>

namespace knowtrace::io {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

CsvWriter::CsvWriter(const fs::path& path) : out_(path), path_(path) {
  if (!out_) throw IoError("cannot write " + path.string());
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) out_ << ',';
    out_ << cells[i];
  }
  out_ << '\n';
}

void CsvWriter::close() {
  out_.close();
  if (!out_) throw IoError("failed writing " + path_.string());
}

json Manifest::to_json() const {
  json j;
  j["command"] = command;
  j["tool_version"] = tool_version();
  j["seed"] = seed;
  j["config"] = json(config);
  j["inputs"] = json(inputs);
  j["outputs"] = json(outputs);
  j["wall_ms"] = wall_ms;
  return j;
}

AtomicOutDir::AtomicOutDir(const fs::path& final_dir) : final_(final_dir) {
  if (fs::exists(final_)) throw IoError("output directory already exists: " + final_.string());
  tmp_ = final_;
  tmp_ += ".tmp";
  std::error_code ec;
  fs::remove_all(tmp_, ec);
  fs::create_directories(tmp_);
}

AtomicOutDir::~AtomicOutDir() {
  if (!committed_) {
    std::error_code ec;
    fs::remove_all(tmp_, ec);
  }
}

void AtomicOutDir::commit(Manifest manifest) {
  for (const auto& entry : fs::directory_iterator(tmp_)) {
    if (!entry.is_regular_file()) continue;
    manifest.outputs[entry.path().filename().string()] =
        file_hash_hex(entry.path().string());
  }
  std::ofstream man(tmp_ / "manifest.json");
  if (!man) throw IoError("cannot write manifest in " + tmp_.string());
  man << manifest.to_json().dump(2) << "\n";
  man.close();
  if (!man) throw IoError("failed writing manifest in " + tmp_.string());
  fs::rename(tmp_, final_);
  committed_ = true;
}

Manifest read_manifest(const fs::path& dir) {
  const fs::path man_path = dir / "manifest.json";
  std::ifstream in(man_path);
  if (!in) throw IoError("missing manifest: " + man_path.string());
  json j = json::parse(in);
  Manifest m;
  m.command = j.at("command").get<std::string>();
  m.seed = j.at("seed").get<uint64_t>();
  m.wall_ms = j.at("wall_ms").get<long>();
  for (const auto& [k, v] : j.at("config").items()) m.config[k] = v.get<std::string>();
  for (const auto& [k, v] : j.at("inputs").items()) m.inputs[k] = v.get<std::string>();
  for (const auto& [k, v] : j.at("outputs").items()) m.outputs[k] = v.get<std::string>();
  for (const auto& [name, hash] : m.outputs) {
    const fs::path p = dir / name;
    if (!fs::exists(p)) throw IoError("manifest lists missing output: " + p.string());
    if (file_hash_hex(p.string()) != hash)
      throw IoError("output file corrupt (hash mismatch): " + p.string());
  }
  return m;
}

std::string input_hash(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing input: " + path.string());
  return file_hash_hex(path.string());
}

std::string tool_version() { return "knowtrace 0.1.0"; }

}  // namespace knowtrace::io
