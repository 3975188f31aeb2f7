#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "nxn/net.hpp"

namespace nxn {

// Layout: "NXN1", u32 version, u64 manifest length, manifest JSON, payload of
// little-endian f64 tensors, CRC32 of everything before it. All integers are
// little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> checkpoint_bytes(Model& model, const json& config = json::object());
void checkpoint_save(Model& model, const std::string& path, const json& config = json::object());

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  json config;
  json manifest;
};

// Verifies size, magic, CRC and version before building anything.
LoadedCheckpoint checkpoint_parse(const std::vector<std::uint8_t>& bytes);
LoadedCheckpoint checkpoint_load(const std::string& path);

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n);

}  // namespace nxn
