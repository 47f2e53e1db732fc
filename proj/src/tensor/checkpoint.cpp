#include "volformer/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <limits>

#include "volformer/binary_io.hpp"
#include "volformer/error.hpp"

namespace volformer {

namespace binary {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + path);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace binary

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  binary::Writer w;
  w.raw("VFWT", 4);
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) throw UsageError("checkpoint name too long: " + e.name);
    if (e.shape.size() > std::numeric_limits<std::uint8_t>::max()) throw UsageError("too many dims in " + e.name);
    if (numel(e.shape) != e.values.size()) throw ShapeError("checkpoint entry " + e.name + " has inconsistent payload");
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.raw(e.name.data(), e.name.size());
    w.u8(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.values) w.f32(v);
  }
  return w.bytes();
}

std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& context) {
  binary::Reader r(bytes.data(), bytes.size(), context);
  const std::uint8_t* magic = r.take(4, "magic");
  if (std::string(reinterpret_cast<const char*>(magic), 4) != "VFWT") r.fail("bad magic (expected VFWT)");
  const auto version = r.u16("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  const auto count = r.u32("tensor count");
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.u16("name length");
    const auto* name = r.take(len, "name");
    e.name.assign(reinterpret_cast<const char*>(name), len);
    const auto ndim = r.u8("ndim");
    std::uint64_t n = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const auto extent = r.u32("dims");
      n *= extent;
      if (n > r.remaining()) r.fail("dimension overflow in " + e.name);
      e.shape.push_back(extent);
    }
    if (r.remaining() < n * 4) r.fail("truncated payload for " + e.name);
    e.values.resize(static_cast<std::size_t>(n));
    for (auto& v : e.values) v = r.f32("payload");
    entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return entries;
}

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  binary::write_file_atomic(path, encode_checkpoint(entries));
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  return decode_checkpoint(binary::read_file(path), path);
}

}  // namespace volformer
