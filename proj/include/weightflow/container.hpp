#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace wf {

// On-disk artifact format ("NMWT"): fixed header, little-endian f64 payload,
// trailing CRC32 over header + payload. Arch/times/provenance live in a JSON
// sidecar at <file>.meta.json.
enum class ContainerKind : std::uint8_t {
  weights = 0,
  traj = 1,
  vae = 2,
  cfm = 3,
  mmfm = 4,
  jko = 5,
};

struct Container {
  ContainerKind kind = ContainerKind::weights;
  std::size_t dim = 0;
  std::size_t count = 0;
  std::vector<double> payload;  // count * dim values
  nlohmann::json meta;          // sidecar contents ({} when absent)
};

std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0);

void write_container(const std::string& path, ContainerKind kind, std::size_t dim,
                     const std::vector<double>& payload, const nlohmann::json& meta);

// Validates magic, version, CRC, and count*dim against the payload length;
// any violation or I/O failure throws data_error.
Container read_container(const std::string& path);

const char* kind_name(ContainerKind k);
ContainerKind kind_from_name(const std::string& name);

}  // namespace wf
