#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "doctest.h"
#include "volformer/binary_io.hpp"
#include "volformer/data/pipeline.hpp"
#include "volformer/data/synth.hpp"
#include "volformer/error.hpp"

using namespace volformer;
using namespace volformer::data;

namespace {

std::filesystem::path scratch_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("vf_data_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

Volume random_volume(std::array<std::size_t, 3> dims, DType dtype, std::uint64_t seed) {
  Volume v;
  v.dims = dims;
  v.spacing = {0.37f, 0.37f, 0.7f};
  v.dtype = dtype;
  v.voxels.resize(v.size());
  Rng rng(seed);
  for (auto& x : v.voxels) x = dtype == DType::u8 ? static_cast<float>(rng.below(256)) : static_cast<float>(rng.normal());
  return v;
}

// Smooth intensity field over physical position (mm, anatomical SI/AP/LR
// relative to the volume center).
double smooth_field(double si, double ap, double lr) {
  return 127.5 + 60 * std::sin(si / 19.0) * std::cos(ap / 23.0) + 40 * std::cos(lr / 15.0 + 0.3);
}

// Physical anatomical coordinate of voxel (i, j, k) of a volume.
std::array<double, 3> position(const Volume& v, std::size_t i, std::size_t j, std::size_t k) {
  const auto layout = view_layout(v.layout);
  const std::array<std::size_t, 3> idx{i, j, k};
  std::array<double, 3> p{};
  for (int a = 0; a < 3; ++a)
    p[layout[a]] = (static_cast<double>(idx[a]) - (static_cast<double>(v.dims[a]) - 1) / 2) * v.spacing[a];
  return p;
}

Volume field_volume(std::array<std::size_t, 3> dims, std::array<float, 3> spacing) {
  Volume v;
  v.dims = dims;
  v.spacing = spacing;
  v.dtype = DType::u8;
  v.voxels.resize(v.size());
  for (std::size_t i = 0; i < dims[0]; ++i)
    for (std::size_t j = 0; j < dims[1]; ++j)
      for (std::size_t k = 0; k < dims[2]; ++k) {
        auto p = position(v, i, j, k);
        v.at(i, j, k) = static_cast<float>(std::round(smooth_field(p[0], p[1], p[2])));
      }
  return v;
}

double mean_field_error(const Volume& v) {
  double err = 0;
  for (std::size_t i = 0; i < v.dims[0]; ++i)
    for (std::size_t j = 0; j < v.dims[1]; ++j)
      for (std::size_t k = 0; k < v.dims[2]; ++k) {
        auto p = position(v, i, j, k);
        err += std::abs(v.at(i, j, k) - smooth_field(p[0], p[1], p[2]));
      }
  return err / static_cast<double>(v.size());
}

SliceStack smooth_stack(std::size_t k, std::size_t h, std::size_t w) {
  SliceStack s;
  s.k = k;
  s.height = h;
  s.width = w;
  s.data.resize(k * h * w);
  for (std::size_t z = 0; z < k; ++z)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        s.data[(z * h + y) * w + x] = static_cast<float>(smooth_field(static_cast<double>(y) * 1.5, static_cast<double>(x) * 1.5, z * 4.0));
  return s;
}

}  // namespace

TEST_CASE("volume files round-trip bit-identically") {
  auto dir = scratch_dir("io");
  for (DType d : {DType::u8, DType::f32}) {
    auto v = random_volume({16, 16, 16}, d, 1);
    const auto path = (dir / "v.vvol").string();
    save_volume(v, path);
    auto back = load_volume(path);
    CHECK(back.dims == v.dims);
    CHECK(back.spacing == v.spacing);
    CHECK(back.dtype == d);
    CHECK(back.id == "v");
    REQUIRE(back.voxels.size() == v.voxels.size());
    CHECK(std::memcmp(back.voxels.data(), v.voxels.data(), v.voxels.size() * sizeof(float)) == 0);
    CHECK(std::filesystem::file_size(path) == kVolumeHeaderBytes + v.size() * (d == DType::u8 ? 1 : 4));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("volume decoding errors name the byte offset") {
  auto bytes = encode_volume(random_volume({4, 4, 4}, DType::u8, 2));
  auto expect = [](std::vector<std::uint8_t> b, const std::string& fragment) {
    try {
      decode_volume(b, "x.vvol");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    }
  };
  expect({bytes.begin(), bytes.begin() + kVolumeHeaderBytes}, "truncated payload at offset 31");
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  expect(bad_magic, "bad magic");
  auto huge = bytes;
  for (int i = 7; i < 19; ++i) huge[i] = 0xFF;
  expect(huge, "dim overflow");
  expect({bytes.begin(), bytes.begin() + 10}, "truncated dims at offset 7");
  auto trailing = bytes;
  trailing.push_back(0);
  expect(trailing, "trailing bytes");
  auto bad_dtype = bytes;
  bad_dtype[6] = 7;
  expect(bad_dtype, "unknown dtype");

  Volume bad;
  bad.dims = {2, 2, 2};
  bad.voxels.assign(7, 0);
  CHECK_THROWS_AS(encode_volume(bad), UsageError);
}

TEST_CASE("header scan reads metadata of a knee-scale listing quickly") {
  auto dir = scratch_dir("scan");
  const std::size_t files = 4866;
  auto v = random_volume({8, 8, 4}, DType::u8, 3);
  const auto bytes = encode_volume(v);
  for (std::size_t i = 0; i < files; ++i) binary::write_file_atomic((dir / (std::to_string(i) + ".vvol")).string(), bytes);
  const auto start = std::chrono::steady_clock::now();
  std::size_t voxels = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    auto h = read_volume_header(e.path().string());
    voxels += h.dims[0] * h.dims[1] * h.dims[2];
  }
  const double per_file = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / files;
  CHECK(voxels == files * v.size());
  CHECK(per_file < 1e-3);

  binary::write_file_atomic((dir / "cut.vvol").string(), {bytes.begin(), bytes.end() - 5});
  CHECK_THROWS_WITH_AS(read_volume_header((dir / "cut.vvol").string()), doctest::Contains("truncated payload at offset 31"),
                       ParseError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("default preprocessing geometry") {
  auto v = random_volume({384, 384, 160}, DType::f32, 4);
  auto p = preprocess(v, {});
  CHECK(p.dims == std::array<std::size_t, 3>{160, 160, 64});
  CHECK(p.spacing[0] == doctest::Approx(0.74));
  CHECK(p.spacing[1] == doctest::Approx(0.74));
  CHECK(p.spacing[2] == doctest::Approx(1.4));
  CHECK(p.dtype == DType::u8);
  const auto [lo, hi] = std::minmax_element(p.voxels.begin(), p.voxels.end());
  CHECK(*lo == 0.0f);
  CHECK(*hi == 255.0f);
  CHECK_NOTHROW(p.check());
}

TEST_CASE("quantization") {
  std::vector<float> ramp(256);
  for (std::size_t i = 0; i < 256; ++i) ramp[i] = static_cast<float>(i / 255.0);
  auto q = quantize(ramp);
  for (std::size_t i = 0; i < 256; ++i) CHECK(q[i] == static_cast<float>(i));

  Volume flat;
  flat.dims = {4, 4, 4};
  flat.voxels.assign(64, 3.25f);
  auto p = preprocess(flat, {{4, 4, 4}, {2, 2, 2}});
  for (float x : p.voxels) CHECK(x == 0.0f);

  Volume line;
  line.dims = {256, 1, 1};
  line.voxels = ramp;
  auto pl = preprocess(line, {{256, 1, 1}, {1, 1, 1}});
  CHECK(pl.voxels == q);

  CHECK_THROWS_AS(preprocess(flat, {{5, 4, 4}, {1, 1, 1}}), ConfigError);
  CHECK_THROWS_AS(preprocess(flat, {{4, 4, 4}, {3, 1, 1}}), ConfigError);
}

TEST_CASE("reprojection") {
  auto sag = field_volume({160, 160, 64}, {0.74f, 0.74f, 1.4f});
  const double baseline = static_cast<double>(sag.size());

  SUBCASE("sagittal input with isotropic slices is returned unchanged") {
    auto same = reproject(sag, View::sag);
    CHECK(same.voxels == sag.voxels);
    CHECK(same.history.empty());
  }

  SUBCASE("coronal and axial views") {
    for (View view : {View::cor, View::ax}) {
      CAPTURE(view_name(view));
      auto r = reproject(sag, view);
      CHECK(r.layout == view);
      CHECK(std::abs(r.spacing[0] - r.spacing[1]) < 1e-6);
      CHECK(std::abs(static_cast<double>(r.size()) / baseline - 1) <= 0.02);
      CHECK(r.dims == std::array<std::size_t, 3>{116, 88, 160});
      CHECK(mean_field_error(r) < 2.0);
    }
  }

  SUBCASE("there and back again") {
    for (View view : {View::cor, View::ax}) {
      CAPTURE(view_name(view));
      auto back = reproject(reproject(sag, view), View::sag);
      CHECK(back.layout == View::sag);
      CHECK(std::abs(static_cast<double>(back.size()) / baseline - 1) <= 0.02);
      CHECK(mean_field_error(back) < 2.0);
    }
  }
}

TEST_CASE("slice extraction") {
  auto v = random_volume({6, 5, 8}, DType::u8, 6);
  v.id = "K1_R";
  auto all = extract_slices(v, View::sag, 8, 6, 5);
  for (std::size_t s = 0; s < 8; ++s)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 5; ++x) CHECK(all.at(s, y, x) == v.at(y, x, s));
  auto four = extract_slices(v, View::sag, 4, 6, 5);
  for (std::size_t s = 0; s < 4; ++s) CHECK(four.at(s, 2, 3) == v.at(2, 3, 2 * s + 1));
  CHECK(four.provenance == "K1_R | sag slices 4 of 8");

  auto resized = extract_slices(v, View::sag, 2, 12, 10);
  CHECK(resized.data.size() == 2 * 12 * 10);
  CHECK(resized.provenance.find("resize 12x10") != std::string::npos);

  CHECK_THROWS_AS(extract_slices(v, View::sag, 9, 6, 5), ConfigError);
  CHECK_THROWS_AS(extract_slices(v, View::sag, 0, 6, 5), ConfigError);
  CHECK_THROWS_AS(extract_slices(v, View::cor, 2, 6, 5), UsageError);
}

TEST_CASE("augmentation") {
  auto s = smooth_stack(3, 40, 36);
  Rng rng(7);

  SUBCASE("identity policy copies bits") {
    auto out = augment(s, rng, AugmentPolicy::identity());
    CHECK(out.data == s.data);
    CHECK(apply_gamma(s, 1.0).data.size() == s.data.size());
    auto g1 = apply_gamma(s, 1.0);
    for (std::size_t i = 0; i < s.data.size(); ++i) CHECK(std::abs(g1.data[i] - s.data[i]) < 1e-3);
  }

  SUBCASE("rotation round trip") {
    for (double deg : {3.0, 10.0}) {
      auto back = rotate(rotate(s, deg), -deg);
      double err = 0;
      for (std::size_t i = 0; i < s.data.size(); ++i) err += std::abs(back.data[i] - s.data[i]);
      CHECK(err / static_cast<double>(s.data.size()) < 2.0);
    }
  }

  SUBCASE("translation reads through mirror padding") {
    auto t = translate(s, 2, -3);
    CHECK(t.at(1, 5, 5) == s.at(1, 3, 8));
    CHECK(t.at(0, 0, 0) == s.at(0, 1, 3));  // row -2 mirrors to row 1
    CHECK(t.at(0, 10, 35) == s.at(0, 8, 33));  // column 38 mirrors to 33
  }

  SUBCASE("draws are a pure function of the seed and stay in range") {
    AugmentPolicy policy;
    Rng a(11), b(11);
    auto x = augment(s, a, policy), y = augment(s, b, policy);
    CHECK(x.data == y.data);
    CHECK(x.data != s.data);
    CHECK(x.height == s.height);
    for (float v : x.data) CHECK((v >= -1e-3f && v <= 255.001f));
  }

  SUBCASE("invalid policies") {
    AugmentPolicy p;
    p.gamma_min = 0;
    CHECK_THROWS_AS(augment(s, rng, p), ConfigError);
    p = {};
    p.max_shift_fraction = 0.6;
    CHECK_THROWS_AS(augment(s, rng, p), ConfigError);
  }
}

TEST_CASE("synthetic cohort") {
  SUBCASE("class proportions") {
    auto knees = synth_generate(1000, 17);
    std::array<double, 3> n{};
    for (auto& k : knees) n[k.planted_class] += 1;
    const std::array<double, 3> expect{0.730, 0.077, 0.193};
    for (int c = 0; c < 3; ++c) CHECK(std::abs(n[c] / static_cast<double>(knees.size()) - expect[c]) <= 0.02);
  }

  SUBCASE("deterministic in the seed") {
    auto a = synth_generate(30, 5), b = synth_generate(30, 5), c = synth_generate(30, 6);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].record.klg_by_month == b[i].record.klg_by_month);
      CHECK(a[i].phantom.noise_seed == b[i].phantom.noise_seed);
      differs = differs || a[i].phantom.noise_seed != c[i].phantom.noise_seed;
    }
    CHECK(differs);
    CHECK(render_phantom(a[3]).voxels == render_phantom(b[3]).voxels);
  }

  SUBCASE("trajectories agree with the label rules") {
    SynthConfig cfg;
    cfg.rate_missing_mri = 0.01;
    auto knees = synth_generate(3000, 23, cfg);
    std::vector<cohort::KneeRecord> rs;
    for (auto& k : knees) rs.push_back(k.record);
    auto ex = cohort::apply_exclusions(rs);
    std::map<std::size_t, std::string> reasons(ex.excluded.begin(), ex.excluded.end());
    std::size_t kept = 0;
    for (auto& k : ex.kept) {
      CHECK(knees[k.index].planted_exclusion.empty());
      CHECK(k.label.cls == knees[k.index].planted_class);
      ++kept;
    }
    std::map<std::string, std::size_t> by_reason;
    for (std::size_t i = 0; i < knees.size(); ++i) {
      if (knees[i].planted_exclusion.empty()) continue;
      CHECK(reasons[i] == knees[i].planted_exclusion);
      ++by_reason[reasons[i]];
    }
    CHECK(kept + ex.excluded.size() == knees.size());
    CHECK(by_reason.size() == 6);
  }

  SUBCASE("cartilage thins with the planted class") {
    SynthConfig cfg;
    cfg.noise_sd = 0;
    auto knees = synth_generate(40, 31, cfg);
    std::array<double, 3> sum{}, count{};
    for (auto& k : knees) {
      auto v = render_phantom(k, cfg);
      double cart = 0;
      for (float x : v.voxels) cart += x > 160;
      sum[k.planted_class] += cart;
      count[k.planted_class] += 1;
    }
    REQUIRE(count[0] > 0);
    REQUIRE(count[2] > 0);
    CHECK(sum[0] / count[0] > 1.5 * sum[2] / count[2]);
    CHECK(cartilage_thickness(0) > cartilage_thickness(1));
    CHECK(cartilage_thickness(1) > cartilage_thickness(2));
  }

  SUBCASE("toy preprocessing of a phantom") {
    auto k = synth_generate(1, 2)[0];
    auto raw = render_phantom(k);
    auto p = preprocess(raw, {{64, 64, 16}, {2, 2, 2}});
    CHECK(p.dims == std::array<std::size_t, 3>{32, 32, 8});
    auto stack = extract_slices(p, View::sag, 8, 32, 32);
    CHECK(stack.provenance.rfind(k.record.knee_id(), 0) == 0);
    auto cor = reproject(p, View::cor);
    CHECK(std::abs(static_cast<double>(cor.size()) / static_cast<double>(p.size()) - 1) <= 0.02);
  }
}
