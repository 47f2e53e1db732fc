#include "volformer/data/volume.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "volformer/binary_io.hpp"
#include "volformer/error.hpp"

namespace volformer::data {

const char* dtype_name(DType d) { return d == DType::u8 ? "u8" : "f32"; }

std::array<int, 3> view_layout(View v) {
  switch (v) {
    case View::sag:
      return {SI, AP, LR};
    case View::cor:
      return {SI, LR, AP};
    case View::ax:
      return {AP, LR, SI};
  }
  return {SI, AP, LR};
}

void Volume::check() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] == 0) throw UsageError("volume " + id + ": zero extent on axis " + std::to_string(a));
    if (!(spacing[a] > 0) || !std::isfinite(spacing[a])) throw UsageError("volume " + id + ": spacing must be positive");
  }
  if (voxels.size() != size()) throw UsageError("volume " + id + ": voxel count does not match dims");
  if (dtype == DType::u8) {
    for (float x : voxels)
      if (!(x >= 0 && x <= 255) || x != std::round(x)) throw UsageError("volume " + id + ": u8 voxel out of range");
  }
}

namespace {

std::size_t element_bytes(DType d) { return d == DType::u8 ? 1 : 4; }

VolumeHeader decode_header(binary::Reader& r) {
  const auto* magic = r.take(4, "magic");
  if (std::string(reinterpret_cast<const char*>(magic), 4) != "VVOL") {
    r.fail("bad magic (expected VVOL)");
  }
  const auto version = r.u16("version");
  if (version != kVolumeVersion) r.fail("unsupported version " + std::to_string(version));
  VolumeHeader h;
  const auto code = r.u8("dtype");
  if (code > 1) r.fail("unknown dtype code " + std::to_string(code));
  h.dtype = static_cast<DType>(code);
  std::uint64_t count = 1;
  for (auto& d : h.dims) {
    d = r.u32("dims");
    if (d == 0) r.fail("zero dimension");
    count *= d;
    // 2^40 voxels is far beyond any knee scan; larger products are corrupt.
    if (count > (std::uint64_t{1} << 40)) r.fail("dim overflow");
  }
  for (auto& s : h.spacing) {
    s = r.f32("spacing");
    if (!(s > 0) || !std::isfinite(s)) r.fail("non-positive spacing");
  }
  return h;
}

}  // namespace

std::vector<std::uint8_t> encode_volume(const Volume& v) {
  v.check();
  binary::Writer w;
  w.raw("VVOL", 4);
  w.u16(kVolumeVersion);
  w.u8(static_cast<std::uint8_t>(v.dtype));
  for (auto d : v.dims) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw UsageError("volume extent exceeds u32");
    w.u32(static_cast<std::uint32_t>(d));
  }
  for (auto s : v.spacing) w.f32(s);
  if (v.dtype == DType::u8) {
    for (float x : v.voxels) w.u8(static_cast<std::uint8_t>(x));
  } else {
    for (float x : v.voxels) w.f32(x);
  }
  return w.bytes();
}

Volume decode_volume(const std::vector<std::uint8_t>& bytes, const std::string& context) {
  binary::Reader r(bytes.data(), bytes.size(), context);
  const auto h = decode_header(r);
  Volume v;
  v.dims = h.dims;
  v.spacing = h.spacing;
  v.dtype = h.dtype;
  const std::size_t n = v.size();
  if (r.remaining() < n * element_bytes(h.dtype)) r.fail("truncated payload");
  const auto* p = r.take(n * element_bytes(h.dtype), "payload");
  v.voxels.resize(n);
  if (h.dtype == DType::u8) {
    for (std::size_t i = 0; i < n; ++i) v.voxels[i] = p[i];
  } else {
    binary::Reader payload(p, n * 4, context);
    for (std::size_t i = 0; i < n; ++i) v.voxels[i] = payload.f32("voxel");
  }
  if (r.remaining() != 0) r.fail("trailing bytes after payload");
  return v;
}

void save_volume(const Volume& v, const std::string& path) { binary::write_file_atomic(path, encode_volume(v)); }

Volume load_volume(const std::string& path, View layout) {
  auto v = decode_volume(binary::read_file(path), path);
  v.layout = layout;
  v.id = std::filesystem::path(path).stem().string();
  return v;
}

VolumeHeader read_volume_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::uint8_t buf[kVolumeHeaderBytes];
  in.read(reinterpret_cast<char*>(buf), kVolumeHeaderBytes);
  binary::Reader r(buf, static_cast<std::size_t>(in.gcount()), path);
  const auto h = decode_header(r);
  const auto expected = kVolumeHeaderBytes + h.dims[0] * h.dims[1] * h.dims[2] * element_bytes(h.dtype);
  const auto actual = std::filesystem::file_size(path);
  if (actual < expected) {
    throw ParseError(path + ": truncated payload at offset " + std::to_string(kVolumeHeaderBytes) + " (file has " +
                     std::to_string(actual) + " bytes, expected " + std::to_string(expected) + ")");
  }
  if (actual > expected) {
    throw ParseError(path + ": trailing bytes after payload at offset " + std::to_string(expected));
  }
  return h;
}

}  // namespace volformer::data
