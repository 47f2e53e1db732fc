#include "volformer/data/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "volformer/error.hpp"
#include "volformer/text.hpp"

namespace volformer::data {

namespace {

std::string dims_text(const std::array<std::size_t, 3>& d) { return text::format_dims({d[0], d[1], d[2]}); }

// Min-max stretch to [0, 255] without rounding; constant input maps to 0.
std::vector<float> stretch(const std::vector<float>& values) {
  std::vector<float> out(values.size(), 0.0f);
  if (values.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return out;
  const double scale = 255.0 / (hi - lo);
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<float>((values[i] - lo) * scale);
  return out;
}

float to_u8(double x) { return static_cast<float>(std::clamp(std::round(x), 0.0, 255.0)); }

// Mirror index into [0, n): ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
std::size_t reflect(long i, std::size_t n) {
  const long period = 2 * static_cast<long>(n);
  long m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<long>(n)) m = period - 1 - m;
  return static_cast<std::size_t>(m);
}

double bilinear_reflect(const float* img, std::size_t h, std::size_t w, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const double ty = y - fy, tx = x - fx;
  const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const std::size_t ya = reflect(y0, h), yb = reflect(y0 + 1, h);
  const std::size_t xa = reflect(x0, w), xb = reflect(x0 + 1, w);
  return (1 - ty) * ((1 - tx) * img[ya * w + xa] + tx * img[ya * w + xb]) +
         ty * ((1 - tx) * img[yb * w + xa] + tx * img[yb * w + xb]);
}

SliceStack same_frame(const SliceStack& s, const std::string& step) {
  SliceStack out = s;
  out.provenance += " | " + step;
  return out;
}

}  // namespace

std::vector<float> quantize(const std::vector<float>& values) {
  auto out = stretch(values);
  for (auto& x : out) x = to_u8(x);
  return out;
}

Volume preprocess(const Volume& v, const PreprocessConfig& cfg) {
  v.check();
  std::array<std::size_t, 3> off{}, out_dims{};
  for (int a = 0; a < 3; ++a) {
    if (cfg.crop[a] == 0 || cfg.crop[a] > v.dims[a]) {
      throw ConfigError("preprocess: crop " + dims_text(cfg.crop) + " does not fit volume " + dims_text(v.dims));
    }
    if (cfg.factors[a] == 0 || cfg.crop[a] % cfg.factors[a] != 0) {
      throw ConfigError("preprocess: factors " + dims_text(cfg.factors) + " must divide crop " + dims_text(cfg.crop));
    }
    off[a] = (v.dims[a] - cfg.crop[a]) / 2;
    out_dims[a] = cfg.crop[a] / cfg.factors[a];
  }

  std::vector<float> cropped(cfg.crop[0] * cfg.crop[1] * cfg.crop[2]);
  std::size_t n = 0;
  for (std::size_t i = 0; i < cfg.crop[0]; ++i)
    for (std::size_t j = 0; j < cfg.crop[1]; ++j)
      for (std::size_t k = 0; k < cfg.crop[2]; ++k) cropped[n++] = v.at(off[0] + i, off[1] + j, off[2] + k);
  cropped = quantize(cropped);

  const auto& f = cfg.factors;
  const double inv = 1.0 / static_cast<double>(f[0] * f[1] * f[2]);
  std::vector<float> pooled(out_dims[0] * out_dims[1] * out_dims[2]);
  n = 0;
  for (std::size_t i = 0; i < out_dims[0]; ++i)
    for (std::size_t j = 0; j < out_dims[1]; ++j)
      for (std::size_t k = 0; k < out_dims[2]; ++k) {
        double acc = 0;
        for (std::size_t a = 0; a < f[0]; ++a)
          for (std::size_t b = 0; b < f[1]; ++b)
            for (std::size_t c = 0; c < f[2]; ++c)
              acc += cropped[((i * f[0] + a) * cfg.crop[1] + j * f[1] + b) * cfg.crop[2] + k * f[2] + c];
        pooled[n++] = static_cast<float>(acc * inv);
      }

  Volume out;
  out.dims = out_dims;
  for (int a = 0; a < 3; ++a) out.spacing[a] = v.spacing[a] * static_cast<float>(f[a]);
  out.dtype = DType::u8;
  out.voxels = quantize(pooled);
  out.layout = v.layout;
  out.id = v.id;
  out.history = v.history;
  out.history.push_back("crop " + dims_text(cfg.crop) + ", quantize, downsample " + dims_text(cfg.factors));
  return out;
}

Volume reproject(const Volume& v, View view) {
  v.check();
  const auto src_layout = view_layout(v.layout);
  const auto dst_layout = view_layout(view);
  std::array<int, 3> src_axis{};
  for (int a = 0; a < 3; ++a)
    src_axis[a] = static_cast<int>(std::find(src_layout.begin(), src_layout.end(), dst_layout[a]) - src_layout.begin());

  std::array<double, 3> n{}, s{};
  for (int a = 0; a < 3; ++a) {
    n[a] = static_cast<double>(v.dims[src_axis[a]]);
    s[a] = v.spacing[src_axis[a]];
  }
  if (v.layout == view && std::abs(s[0] - s[1]) <= 1e-6 * std::max(s[0], s[1])) return v;

  // In-slice spacing is the geometric mean of the two source spacings, which
  // keeps the in-slice area; a common factor c then restores the voxel count.
  const double iso = std::sqrt(s[0] * s[1]);
  const double c = std::cbrt(static_cast<double>(v.size()) / ((n[0] * s[0] / iso) * (n[1] * s[1] / iso) * n[2]));
  const double in_slice = iso / c;
  std::array<std::size_t, 3> m{};
  m[0] = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(n[0] * s[0] / in_slice)));
  m[1] = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(n[1] * s[1] / in_slice)));
  m[2] = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(n[2] * c)));
  const std::array<double, 3> out_spacing{in_slice, in_slice, n[2] * s[2] / static_cast<double>(m[2])};

  // Per output index along each axis: the two source taps and the weight of
  // the upper one, with edge clamping.
  struct Tap {
    std::size_t lo, hi;
    double t;
  };
  std::array<std::vector<Tap>, 3> taps;
  for (int a = 0; a < 3; ++a) {
    taps[a].resize(m[a]);
    for (std::size_t i = 0; i < m[a]; ++i) {
      const double p = (static_cast<double>(i) - (static_cast<double>(m[a]) - 1) / 2) * out_spacing[a];
      const double q = std::clamp(p / s[a] + (n[a] - 1) / 2, 0.0, n[a] - 1);
      const auto lo = static_cast<std::size_t>(std::floor(q));
      const auto hi = std::min(lo + 1, static_cast<std::size_t>(n[a]) - 1);
      taps[a][i] = {lo, hi, q - static_cast<double>(lo)};
    }
  }
  std::array<std::size_t, 3> stride{v.dims[1] * v.dims[2], v.dims[2], 1};
  std::array<std::size_t, 3> st{stride[src_axis[0]], stride[src_axis[1]], stride[src_axis[2]]};

  Volume out;
  out.dims = m;
  for (int a = 0; a < 3; ++a) out.spacing[a] = static_cast<float>(out_spacing[a]);
  out.dtype = v.dtype;
  out.layout = view;
  out.id = v.id;
  out.history = v.history;
  out.history.push_back(std::string("reproject ") + std::string(view_name(view)));
  out.voxels.resize(out.size());
  std::size_t idx = 0;
  for (const auto& a : taps[0])
    for (const auto& b : taps[1])
      for (const auto& cc : taps[2]) {
        auto val = [&](std::size_t i, std::size_t j, std::size_t k) {
          return static_cast<double>(v.voxels[i * st[0] + j * st[1] + k * st[2]]);
        };
        const double c00 = (1 - cc.t) * val(a.lo, b.lo, cc.lo) + cc.t * val(a.lo, b.lo, cc.hi);
        const double c01 = (1 - cc.t) * val(a.lo, b.hi, cc.lo) + cc.t * val(a.lo, b.hi, cc.hi);
        const double c10 = (1 - cc.t) * val(a.hi, b.lo, cc.lo) + cc.t * val(a.hi, b.lo, cc.hi);
        const double c11 = (1 - cc.t) * val(a.hi, b.hi, cc.lo) + cc.t * val(a.hi, b.hi, cc.hi);
        const double r = (1 - a.t) * ((1 - b.t) * c00 + b.t * c01) + a.t * ((1 - b.t) * c10 + b.t * c11);
        out.voxels[idx++] = v.dtype == DType::u8 ? to_u8(r) : static_cast<float>(r);
      }
  return out;
}

SliceStack extract_slices(const Volume& v, View view, std::size_t k, std::size_t height, std::size_t width) {
  v.check();
  if (v.layout != view) {
    throw UsageError("extract_slices: volume " + v.id + " is in " + std::string(view_name(v.layout)) + " layout, not " +
                     std::string(view_name(view)));
  }
  const std::size_t depth = v.dims[2], h0 = v.dims[0], w0 = v.dims[1];
  if (k == 0 || k > depth) {
    throw ConfigError("extract_slices: cannot take " + std::to_string(k) + " slices from depth " + std::to_string(depth));
  }
  if (height == 0 || width == 0) throw ConfigError("extract_slices: slice shape must be positive");

  SliceStack out;
  out.view = view;
  out.k = k;
  out.height = height;
  out.width = width;
  out.data.resize(k * height * width);
  out.provenance = v.id;
  for (const auto& step : v.history) out.provenance += " | " + step;
  out.provenance += " | " + std::string(view_name(view)) + " slices " + std::to_string(k) + " of " + std::to_string(depth);
  const bool resize = height != h0 || width != w0;
  if (resize) out.provenance += " | resize " + text::format_dims({height, width});

  std::vector<float> plane(h0 * w0);
  for (std::size_t s = 0; s < k; ++s) {
    const std::size_t z = (2 * s + 1) * depth / (2 * k);
    for (std::size_t i = 0; i < h0; ++i)
      for (std::size_t j = 0; j < w0; ++j) plane[i * w0 + j] = v.at(i, j, z);
    float* dst = out.data.data() + s * height * width;
    if (!resize) {
      std::copy(plane.begin(), plane.end(), dst);
      continue;
    }
    const double sy = static_cast<double>(h0) / static_cast<double>(height);
    const double sx = static_cast<double>(w0) / static_cast<double>(width);
    for (std::size_t y = 0; y < height; ++y) {
      const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h0 - 1));
      for (std::size_t x = 0; x < width; ++x) {
        const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w0 - 1));
        dst[y * width + x] = static_cast<float>(bilinear_reflect(plane.data(), h0, w0, fy, fx));
      }
    }
  }
  return out;
}

void AugmentPolicy::validate() const {
  if (!(max_shift_fraction >= 0 && max_shift_fraction < 0.5)) throw ConfigError("augment: shift fraction must be in [0, 0.5)");
  if (!(max_rotation_deg >= 0 && max_rotation_deg <= 180)) throw ConfigError("augment: rotation must be in [0, 180] degrees");
  if (!(gamma_min > 0 && gamma_min <= gamma_max && std::isfinite(gamma_max))) {
    throw ConfigError("augment: gamma range must satisfy 0 < min <= max");
  }
}

SliceStack translate(const SliceStack& s, long dy, long dx) {
  auto out = same_frame(s, "translate " + std::to_string(dy) + "," + std::to_string(dx));
  for (std::size_t z = 0; z < s.k; ++z) {
    const float* src = s.data.data() + z * s.height * s.width;
    float* dst = out.data.data() + z * s.height * s.width;
    for (std::size_t y = 0; y < s.height; ++y) {
      const std::size_t sy = reflect(static_cast<long>(y) - dy, s.height);
      for (std::size_t x = 0; x < s.width; ++x) dst[y * s.width + x] = src[sy * s.width + reflect(static_cast<long>(x) - dx, s.width)];
    }
  }
  return out;
}

SliceStack rotate(const SliceStack& s, double degrees) {
  auto out = same_frame(s, "rotate " + text::format_double(degrees));
  const double th = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(th), sn = std::sin(th);
  const double cy = (static_cast<double>(s.height) - 1) / 2, cx = (static_cast<double>(s.width) - 1) / 2;
  for (std::size_t z = 0; z < s.k; ++z) {
    const float* src = s.data.data() + z * s.height * s.width;
    float* dst = out.data.data() + z * s.height * s.width;
    for (std::size_t y = 0; y < s.height; ++y) {
      const double dy = static_cast<double>(y) - cy;
      for (std::size_t x = 0; x < s.width; ++x) {
        const double dx = static_cast<double>(x) - cx;
        dst[y * s.width + x] =
            static_cast<float>(bilinear_reflect(src, s.height, s.width, cy + c * dy + sn * dx, cx - sn * dy + c * dx));
      }
    }
  }
  return out;
}

SliceStack apply_gamma(const SliceStack& s, double gamma) {
  auto out = same_frame(s, "gamma " + text::format_double(gamma));
  for (auto& x : out.data) x = static_cast<float>(255.0 * std::pow(std::clamp(x / 255.0, 0.0, 1.0), gamma));
  return out;
}

SliceStack augment(const SliceStack& s, Rng& rng, const AugmentPolicy& policy) {
  policy.validate();
  // All four draws happen regardless of the policy so the stream position
  // after augment does not depend on it.
  const auto max_dy = static_cast<long>(std::floor(policy.max_shift_fraction * static_cast<double>(s.height)));
  const auto max_dx = static_cast<long>(std::floor(policy.max_shift_fraction * static_cast<double>(s.width)));
  const long dy = static_cast<long>(rng.below(static_cast<std::uint64_t>(2 * max_dy + 1))) - max_dy;
  const long dx = static_cast<long>(rng.below(static_cast<std::uint64_t>(2 * max_dx + 1))) - max_dx;
  const double angle = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg);
  const double gamma = std::exp(rng.uniform(std::log(policy.gamma_min), std::log(policy.gamma_max)));

  SliceStack out = s;
  if (dy != 0 || dx != 0) out = translate(out, dy, dx);
  if (angle != 0) out = rotate(out, angle);
  if (gamma != 1) out = apply_gamma(out, gamma);
  return out;
}

}  // namespace volformer::data
