#include "wsseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace wsseg {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

void save_checkpoint(const std::string& path, const std::string& meta_json,
                     const std::vector<CheckpointEntry>& entries) {
  nlohmann::json header = nlohmann::json::parse(meta_json);
  header["format_version"] = 1;
  nlohmann::json params = nlohmann::json::array();
  long long offset = 0;
  for (const auto& e : entries) {
    nlohmann::json p;
    p["name"] = e.name;
    p["shape"] = e.shape;
    p["offset"] = offset;
    p["count"] = static_cast<long long>(e.data.size());
    params.push_back(p);
    offset += static_cast<long long>(e.data.size()) * 8;
  }
  header["params"] = params;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  f << header.dump() << "\n";
  for (const auto& e : entries)
    f.write(reinterpret_cast<const char*>(e.data.data()), static_cast<std::streamsize>(e.data.size() * 8));
  if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

std::string load_checkpoint(const std::string& path, std::vector<CheckpointEntry>& entries) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("checkpoint: missing header: " + path);
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.value("format_version", 0) != 1)
    throw std::runtime_error("checkpoint: unsupported format_version in " + path);

  std::streampos data_start = f.tellg();
  entries.clear();
  for (const auto& p : header.at("params")) {
    CheckpointEntry e;
    e.name = p.at("name").get<std::string>();
    e.shape = p.at("shape").get<std::vector<int>>();
    long long count = p.at("count").get<long long>();
    long long offset = p.at("offset").get<long long>();
    if (count != Tensor::numel_of(e.shape)) throw std::runtime_error("checkpoint: count/shape mismatch for " + e.name);
    e.data.resize(static_cast<size_t>(count));
    f.seekg(data_start + static_cast<std::streamoff>(offset));
    f.read(reinterpret_cast<char*>(e.data.data()), count * 8);
    if (!f) throw std::runtime_error("checkpoint: truncated payload for " + e.name + " in " + path);
    entries.push_back(std::move(e));
  }
  header.erase("params");
  return header.dump();
}

}  // namespace wsseg
