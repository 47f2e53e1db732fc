#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "volformer/view.hpp"

namespace volformer::data {

enum class DType : std::uint8_t { u8 = 0, f32 = 1 };
const char* dtype_name(DType d);

// Axis order of a volume in anatomical terms. Every view's canonical layout
// has its slice axis last:
//   sag (SI, AP, LR)   cor (SI, LR, AP)   ax (AP, LR, SI)
// Acquired volumes are sagittal.
enum Anatomical : int { SI = 0, AP = 1, LR = 2 };
std::array<int, 3> view_layout(View v);

// Dense 3-D image, axis 0 slowest. u8 volumes hold integral values in
// [0, 255]; they are kept as floats in memory and as bytes on disk.
struct Volume {
  std::array<std::size_t, 3> dims{0, 0, 0};
  std::array<float, 3> spacing{1, 1, 1};  // mm per axis
  DType dtype = DType::f32;
  std::vector<float> voxels;
  View layout = View::sag;  // in-memory only; files carry no orientation
  std::string id;
  std::vector<std::string> history;  // processing steps applied since loading

  std::size_t size() const { return dims[0] * dims[1] * dims[2]; }
  float at(std::size_t i, std::size_t j, std::size_t k) const { return voxels[(i * dims[1] + j) * dims[2] + k]; }
  float& at(std::size_t i, std::size_t j, std::size_t k) { return voxels[(i * dims[1] + j) * dims[2] + k]; }
  // Throws UsageError on a broken invariant.
  void check() const;
};

// VVOL file: "VVOL", version u16, dtype u8, dims u32 x 3, spacing f32 x 3,
// then the payload, all little-endian.
inline constexpr std::size_t kVolumeHeaderBytes = 31;
inline constexpr std::uint16_t kVolumeVersion = 1;

struct VolumeHeader {
  DType dtype = DType::f32;
  std::array<std::size_t, 3> dims{0, 0, 0};
  std::array<float, 3> spacing{1, 1, 1};
};

std::vector<std::uint8_t> encode_volume(const Volume& v);
Volume decode_volume(const std::vector<std::uint8_t>& bytes, const std::string& context);
void save_volume(const Volume& v, const std::string& path);
// The id becomes the file stem.
Volume load_volume(const std::string& path, View layout = View::sag);
// Reads only the header and checks the payload length against the file size.
VolumeHeader read_volume_header(const std::string& path);

}  // namespace volformer::data
