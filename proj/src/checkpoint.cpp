#include "aircoop/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace aircoop {

namespace {

constexpr char kMagic[8] = {'A', 'C', 'K', 'P', '0', '0', '0', '1'};

void put_u64le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_f64le(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64le(os, bits);
}

double get_f64le(std::istream& is) {
  std::uint64_t bits = get_u64le(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  nlohmann::json manifest;
  manifest["entries"] = nlohmann::json::array();
  for (const auto& e : entries) {
    if (shape_numel(e.shape) != e.data.size())
      throw std::invalid_argument("checkpoint entry '" + e.name + "': shape/data mismatch");
    manifest["entries"].push_back(
        {{"name", e.name}, {"shape", e.shape}, {"dtype", "f64"}, {"frozen", e.frozen}});
  }
  std::string mstr = manifest.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 8);
  put_u64le(os, mstr.size());
  os.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
  for (const auto& e : entries)
    for (double d : e.data) put_f64le(os, d);
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  std::uint64_t mlen = get_u64le(is);
  std::string mstr(mlen, '\0');
  is.read(mstr.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw std::runtime_error("truncated checkpoint manifest: " + path);
  nlohmann::json manifest = nlohmann::json::parse(mstr);
  std::vector<CheckpointEntry> entries;
  for (const auto& j : manifest.at("entries")) {
    CheckpointEntry e;
    e.name = j.at("name").get<std::string>();
    e.shape = j.at("shape").get<Shape>();
    e.frozen = j.at("frozen").get<bool>();
    if (j.at("dtype").get<std::string>() != "f64")
      throw std::runtime_error("checkpoint entry '" + e.name + "': unsupported dtype");
    e.data.resize(shape_numel(e.shape));
    for (auto& d : e.data) d = get_f64le(is);
    if (!is) throw std::runtime_error("truncated checkpoint data at '" + e.name + "'");
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace aircoop
