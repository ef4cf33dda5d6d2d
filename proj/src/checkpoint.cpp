// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/checkpoint.hpp"

#include "knowtrace/hash.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

namespace knowtrace::model {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

json config_to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"d_mlp", c.d_mlp},       {"max_seq_len", c.max_seq_len},
              {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

}  // namespace

std::string params_hash(const Params& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  params.for_each_tensor([&](const std::string&, const MatF& m) {
    h = fnv1a64(m.data(), sizeof(float) * static_cast<size_t>(m.size()), h);
  });
  return hash_hex(h);
}

void save_checkpoint(const Params& params, const std::string& dir, uint64_t train_seed,
                     const std::string& note) {
  fs::create_directories(dir);
  const fs::path bin_path = fs::path(dir) / "params.bin";
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot write " + bin_path.string());

  json tensors = json::array();
  params.for_each_tensor([&](const std::string& name, const MatF& m) {
    bin.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(m.size())));
    tensors.push_back(json{{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  bin.close();
  if (!bin) throw IoError("failed writing " + bin_path.string());

  json manifest;
  manifest["format_version"] = 1;
  manifest["config"] = config_to_json(params.config);
  manifest["tensors"] = tensors;
  manifest["train_seed"] = train_seed;
  manifest["params_hash"] = params_hash(params);
  if (!note.empty()) manifest["note"] = note;
  std::ofstream man(fs::path(dir) / "checkpoint.json");
  man << manifest.dump(2) << "\n";
  if (!man) throw IoError("failed writing checkpoint.json in " + dir);
}

Params load_checkpoint(const std::string& dir) {
  const fs::path man_path = fs::path(dir) / "checkpoint.json";
  std::ifstream man(man_path);
  if (!man) throw IoError("missing checkpoint manifest: " + man_path.string());
  json manifest = json::parse(man);
  if (manifest.at("format_version").get<int>() != 1)
    throw IoError("unsupported checkpoint format version in " + man_path.string());

  Params params = init_params<float>(config_from_json(manifest.at("config")));
  const fs::path bin_path = fs::path(dir) / "params.bin";
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("missing checkpoint tensors: " + bin_path.string());

  size_t idx = 0;
  const auto& tensors = manifest.at("tensors");
  params.for_each_tensor([&](const std::string& name, MatF& m) {
    if (idx >= tensors.size()) throw IoError("checkpoint manifest lists too few tensors");
    const auto& t = tensors[idx++];
    if (t.at("name").get<std::string>() != name ||
        t.at("rows").get<Eigen::Index>() != m.rows() ||
        t.at("cols").get<Eigen::Index>() != m.cols())
      throw IoError("checkpoint tensor mismatch at '" + name + "' in " + dir);
    bin.read(reinterpret_cast<char*>(m.data()),
             static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(m.size())));
    if (bin.gcount() != static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(m.size())))
      throw IoError("checkpoint tensor data truncated at '" + name + "' in " + dir);
  });
  if (idx != tensors.size()) throw IoError("checkpoint manifest lists extra tensors");

  const std::string expect = manifest.at("params_hash").get<std::string>();
  if (params_hash(params) != expect) throw IoError("checkpoint hash mismatch in " + dir);
  return params;
}

}  // namespace knowtrace::model
