#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nrvit/model.hpp"

namespace nrvit {

// Checkpoint byte layout (little-endian throughout):
//   bytes 0..7   magic "NRVCKPT1"
//   bytes 8..15  uint64 header length H
//   bytes 16..16+H-1  UTF-8 JSON header:
//     { "version": 1,
//       "meta": { ... },
//       "arrays": [ {"name": ..., "dtype": "f32"|"f64",
//                    "shape": [...], "offset": ..., "nbytes": ...}, ... ] }
//   data section starts at the first 64-byte boundary after the header;
//   array offsets are relative to that data section, contents are raw
//   row-major scalars.
inline constexpr char kCheckpointMagic[8] = {'N', 'R', 'V', 'C',
                                             'K', 'P', 'T', '1'};

template <typename T>
const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else if constexpr (std::is_same_v<T, double>) return "f64";
  else static_assert(sizeof(T) == 0, "unsupported checkpoint scalar");
}

template <typename T>
void write_checkpoint(const std::string& path,
                      const std::vector<ParamView<T>>& params,
                      const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json header;
  header["version"] = 1;
  header["meta"] = meta;
  auto& arrays = header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(p.size) * sizeof(T);
    arrays.push_back({{"name", p.name},
                      {"dtype", dtype_name<T>()},
                      {"shape", p.shape},
                      {"offset", offset},
                      {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string header_str = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_checkpoint: cannot open " + path);
  f.write(kCheckpointMagic, 8);
  const std::uint64_t hlen = header_str.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(header_str.data(), static_cast<std::streamsize>(hlen));
  const std::uint64_t data_start = ((16 + hlen + 63) / 64) * 64;
  for (std::uint64_t i = 16 + hlen; i < data_start; ++i) f.put('\0');
  for (const auto& p : params)
    f.write(reinterpret_cast<const char*>(p.data),
            static_cast<std::streamsize>(p.size * sizeof(T)));
  if (!f) throw std::runtime_error("write_checkpoint: write failed: " + path);
}

struct LoadedArray {
  std::string dtype;
  std::vector<long> shape;
  std::vector<unsigned char> bytes;
};

struct LoadedCheckpoint {
  nlohmann::json meta;
  std::map<std::string, LoadedArray> arrays;
};

inline LoadedCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("read_checkpoint: bad magic in " + path);
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  std::string header_str(hlen, '\0');
  f.read(header_str.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw std::runtime_error("read_checkpoint: truncated header");
  const nlohmann::json header = nlohmann::json::parse(header_str);
  const std::uint64_t data_start = ((16 + hlen + 63) / 64) * 64;

  LoadedCheckpoint out;
  out.meta = header.value("meta", nlohmann::json::object());
  for (const auto& a : header.at("arrays")) {
    LoadedArray arr;
    arr.dtype = a.at("dtype").get<std::string>();
    arr.shape = a.at("shape").get<std::vector<long>>();
    const std::uint64_t offset = a.at("offset").get<std::uint64_t>();
    const std::uint64_t nbytes = a.at("nbytes").get<std::uint64_t>();
    arr.bytes.resize(nbytes);
    f.seekg(static_cast<std::streamoff>(data_start + offset));
    f.read(reinterpret_cast<char*>(arr.bytes.data()),
           static_cast<std::streamsize>(nbytes));
    if (!f) throw std::runtime_error("read_checkpoint: truncated data for " +
                                     a.at("name").get<std::string>());
    out.arrays.emplace(a.at("name").get<std::string>(), std::move(arr));
  }
  return out;
}

// Copies checkpoint contents into an existing parameter set, validating
// name, dtype and element count.
template <typename T>
void load_into(const LoadedCheckpoint& ckpt,
               const std::vector<ParamView<T>>& params) {
  for (const auto& p : params) {
    const auto it = ckpt.arrays.find(p.name);
    if (it == ckpt.arrays.end())
      throw std::runtime_error("checkpoint is missing array '" + p.name + "'");
    const LoadedArray& a = it->second;
    if (a.dtype != dtype_name<T>())
      throw std::runtime_error("checkpoint array '" + p.name + "' has dtype " +
                               a.dtype + ", expected " + dtype_name<T>());
    if (a.bytes.size() != static_cast<std::size_t>(p.size) * sizeof(T))
      throw std::runtime_error(
          "checkpoint array '" + p.name + "' holds " +
          std::to_string(a.bytes.size() / sizeof(T)) +
          " scalars but the configured model expects " +
          std::to_string(p.size));
    std::memcpy(p.data, a.bytes.data(), a.bytes.size());
  }
}

template <typename T>
void save_model(const std::string& path, ModelState<T>& model,
                nlohmann::json extra_meta = nlohmann::json::object()) {
  extra_meta["stage"] = model.trained_through_stage;
  write_checkpoint(path, collect_params(model), extra_meta);
}

template <typename T>
nlohmann::json load_model(const std::string& path, ModelState<T>& model) {
  const LoadedCheckpoint ckpt = read_checkpoint(path);
  load_into(ckpt, collect_params(model));
  model.trained_through_stage = ckpt.meta.value("stage", 0);
  return ckpt.meta;
}

}  // namespace nrvit
