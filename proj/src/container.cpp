#include "weightflow/container.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "weightflow/errors.hpp"

namespace wf {

namespace {

constexpr char kMagic[4] = {'N', 'M', 'W', 'T'};
constexpr std::uint32_t kVersion = 1;

std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> t{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
    t[i] = c;
  }
  return t;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& s, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::string& s, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
  return v;
}

static_assert(std::endian::native == std::endian::little,
              "container payload writes assume a little-endian host");

}  // namespace

std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed) {
  static const auto table = make_crc_table();
  std::uint32_t c = seed ^ 0xffffffffu;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xff] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

const char* kind_name(ContainerKind k) {
  switch (k) {
    case ContainerKind::weights: return "weights";
    case ContainerKind::traj: return "traj";
    case ContainerKind::vae: return "vae";
    case ContainerKind::cfm: return "cfm";
    case ContainerKind::mmfm: return "mmfm";
    case ContainerKind::jko: return "jko";
  }
  throw data_error("container: unknown kind tag");
}

ContainerKind kind_from_name(const std::string& name) {
  for (auto k : {ContainerKind::weights, ContainerKind::traj, ContainerKind::vae,
                 ContainerKind::cfm, ContainerKind::mmfm, ContainerKind::jko})
    if (name == kind_name(k)) return k;
  throw data_error("container: unknown kind name '" + name + "'");
}

void write_container(const std::string& path, ContainerKind kind, std::size_t dim,
                     const std::vector<double>& payload, const nlohmann::json& meta) {
  if (dim == 0) throw data_error("write_container: dim must be positive");
  if (payload.size() % dim != 0)
    throw data_error("write_container: payload size is not a multiple of dim");
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  buf.push_back(static_cast<char>(kind));
  put_u32(buf, static_cast<std::uint32_t>(dim));
  put_u64(buf, payload.size() / dim);
  std::size_t body_off = buf.size();
  buf.resize(body_off + payload.size() * sizeof(double));
  std::memcpy(buf.data() + body_off, payload.data(), payload.size() * sizeof(double));
  put_u32(buf, crc32(buf.data(), buf.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw data_error("write_container: cannot open " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw data_error("write_container: short write to " + path);

  std::ofstream side(path + ".meta.json", std::ios::trunc);
  if (!side) throw data_error("write_container: cannot open sidecar for " + path);
  side << meta.dump(2) << "\n";
}

Container read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("read_container: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  constexpr std::size_t header = 4 + 4 + 1 + 4 + 8;
  if (buf.size() < header + 4) throw data_error("read_container: truncated file " + path);
  if (std::memcmp(buf.data(), kMagic, 4) != 0)
    throw data_error("read_container: bad magic in " + path);
  if (get_u32(buf, 4) != kVersion)
    throw data_error("read_container: unsupported version in " + path);
  std::uint8_t kind_tag = static_cast<std::uint8_t>(buf[8]);
  if (kind_tag > static_cast<std::uint8_t>(ContainerKind::jko))
    throw data_error("read_container: unknown kind tag in " + path);
  std::uint32_t stored_crc = get_u32(buf, buf.size() - 4);
  if (crc32(buf.data(), buf.size() - 4) != stored_crc)
    throw data_error("read_container: CRC mismatch in " + path);

  Container c;
  c.kind = static_cast<ContainerKind>(kind_tag);
  c.dim = get_u32(buf, 9);
  c.count = get_u64(buf, 13);
  std::size_t body = buf.size() - header - 4;
  if (c.count * c.dim * sizeof(double) != body)
    throw data_error("read_container: payload length mismatch in " + path);
  c.payload.resize(c.count * c.dim);
  std::memcpy(c.payload.data(), buf.data() + header, body);

  std::ifstream side(path + ".meta.json");
  if (side) {
    try {
      side >> c.meta;
    } catch (const nlohmann::json::exception& e) {
      throw data_error("read_container: bad sidecar for " + path + ": " + e.what());
    }
  } else {
    c.meta = nlohmann::json::object();
  }
  return c;
}

}  // namespace wf
