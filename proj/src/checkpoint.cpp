#include "nxn/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "nxn/errors.hpp"

namespace nxn {

namespace {

constexpr char kMagic[4] = {'N', 'X', 'N', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> checkpoint_bytes(Model& model, const json& config) {
  const auto tensors = model.state();
  json dir = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    const std::uint64_t len = t.data.size() * sizeof(double);
    dir.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "f64"}, {"offset", offset},
                   {"length", len}});
    offset += len;
  }
  const json manifest = {{"architecture", model.architecture()},
                         {"config", config},
                         {"tensors", dir}};
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : tensors)
    for (double d : t.data) {
      std::uint64_t bits;
      std::memcpy(&bits, &d, sizeof(bits));
      put_u64(out, bits);
    }
  put_u32(out, crc32_of(out.data(), out.size()));
  return out;
}

void checkpoint_save(Model& model, const std::string& path, const json& config) {
  const auto bytes = checkpoint_bytes(model, config);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing '" + path + "'");
}

LoadedCheckpoint checkpoint_parse(const std::vector<std::uint8_t>& bytes) {
  constexpr std::size_t kHeader = 4 + 4 + 8;
  if (bytes.size() < kHeader + 4) throw CheckpointError("checkpoint truncated: file too short");
  const std::size_t body = bytes.size() - 4;
  if (crc32_of(bytes.data(), body) != get_u32(bytes.data() + body))
    throw CheckpointError("checkpoint CRC mismatch (corrupt or truncated file)");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointError("checkpoint: bad magic");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version mismatch: file has " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  const std::uint64_t mlen = get_u64(bytes.data() + 8);
  if (mlen > body - kHeader) throw CheckpointError("checkpoint truncated: manifest overruns file");

  LoadedCheckpoint out;
  try {
    out.manifest = json::parse(bytes.begin() + kHeader,
                               bytes.begin() + static_cast<std::ptrdiff_t>(kHeader + mlen));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint manifest: ") + e.what());
  }
  const std::size_t payload = kHeader + mlen;
  const std::size_t payload_len = body - payload;

  std::map<std::string, json> dir;
  try {
    for (const auto& t : out.manifest.at("tensors")) {
      if (t.at("dtype").get<std::string>() != "f64")
        throw CheckpointError("checkpoint: unsupported dtype for " + t.at("name").get<std::string>());
      dir[t.at("name").get<std::string>()] = t;
    }
    out.model = build_from_architecture(out.manifest.at("architecture"));
    out.config = out.manifest.value("config", json::object());
    auto state = out.model->state();
    if (state.size() != dir.size())
      throw CheckpointError("checkpoint: tensor count does not match the architecture");
    for (auto& t : state) {
      auto it = dir.find(t.name);
      if (it == dir.end()) throw CheckpointError("checkpoint: missing tensor " + t.name);
      const json& e = it->second;
      if (e.at("shape").get<std::vector<std::size_t>>() != t.shape)
        throw CheckpointError("checkpoint: shape mismatch for " + t.name);
      const auto off = e.at("offset").get<std::uint64_t>();
      const auto len = e.at("length").get<std::uint64_t>();
      if (len != t.data.size() * sizeof(double) || off > payload_len || len > payload_len - off)
        throw CheckpointError("checkpoint: bad extent for " + t.name);
      const std::uint8_t* p = bytes.data() + payload + off;
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        const std::uint64_t bits = get_u64(p + 8 * i);
        std::memcpy(&t.data[i], &bits, sizeof(double));
      }
    }
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint architecture: ") + e.what());
  }
  return out;
}

LoadedCheckpoint checkpoint_load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return checkpoint_parse(bytes);
}

}  // namespace nxn
