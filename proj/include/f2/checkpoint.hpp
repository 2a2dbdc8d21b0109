#pragma once

// Checkpoint directory format: manifest.json (tensor names, shapes, dtype,
// byte offsets, config hash, seed, plus free-form extra metadata) and one
// raw little-endian float32 binary per tensor. Round-trips bit-exactly.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "f2/tensor.hpp"

namespace f2 {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");
static_assert(sizeof(float) == 4);

struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::uint64_t seed = 0;
  std::string config_hash;
  nlohmann::json extra;  // model config, vocab, anything the producer needs back
};

namespace detail {

inline std::string tensor_file_name(const std::string& name) { return name + ".bin"; }

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["tool_version"] = kToolVersion;
  manifest["dtype"] = "float32";
  manifest["seed"] = ckpt.seed;
  manifest["config_hash"] = ckpt.config_hash;
  manifest["extra"] = ckpt.extra.is_null() ? nlohmann::json::object() : ckpt.extra;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    const std::string file = detail::tensor_file_name(name);
    const std::size_t bytes = t.numel() * sizeof(float);
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("checkpoint: cannot write " + (dir / file).string());
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(bytes));
    if (!out) throw ValidationError("checkpoint: short write to " + (dir / file).string());
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["file"] = file;
    entry["byte_offset"] = 0;
    entry["byte_length"] = bytes;
    tensors.push_back(entry);
  }
  manifest["tensors"] = tensors;
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw ValidationError("checkpoint: cannot write manifest in " + dir.string());
  mf << manifest.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw ValidationError("checkpoint: missing manifest.json in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.at("dtype").get<std::string>() != "float32")
    throw ValidationError("checkpoint: unsupported dtype " + manifest["dtype"].dump());
  Checkpoint ckpt;
  ckpt.seed = manifest.at("seed").get<std::uint64_t>();
  ckpt.config_hash = manifest.value("config_hash", "");
  ckpt.extra = manifest.value("extra", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const std::size_t offset = entry.at("byte_offset").get<std::size_t>();
    const std::size_t bytes = entry.at("byte_length").get<std::size_t>();
    if (bytes != shape_numel(shape) * sizeof(float))
      throw ValidationError("checkpoint: byte length mismatch for tensor " + name);
    std::ifstream in(dir / entry.at("file").get<std::string>(), std::ios::binary);
    if (!in) throw ValidationError("checkpoint: missing tensor file for " + name);
    in.seekg(static_cast<std::streamoff>(offset));
    std::vector<float> data(shape_numel(shape));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
    if (in.gcount() != static_cast<std::streamsize>(bytes))
      throw ValidationError("checkpoint: short read for tensor " + name);
    ckpt.tensors.emplace(name, Tensor::from_data(shape, std::move(data)));
  }
  return ckpt;
}

}  // namespace f2
