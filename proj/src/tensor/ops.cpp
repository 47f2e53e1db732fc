#include "volformer/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "volformer/error.hpp"

namespace volformer {

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

template <class T>
void require_data(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor");
  if (t.is_meta()) throw UsageError(std::string(op) + ": tensor " + to_string(t.shape()) + " has no storage");
}

// Number of trailing elements b broadcasts over, validating that b's shape is
// a suffix of a's.
std::size_t broadcast_inner(const Shape& a, const Shape& b, const char* op) {
  bool ok = b.size() <= a.size();
  for (std::size_t i = 0; ok && i < b.size(); ++i) ok = a[a.size() - b.size() + i] == b[i];
  if (!ok) throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b) + " onto " + to_string(a));
  return numel(b);
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " + to_string(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

void record_signs(const auto* x, std::size_t n) {
  BranchProbe* probe = active_branch_probe();
  if (!probe) return;
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < n; ++i) {
    word = (word << 1) | (x[i] > 0 ? 1u : 0u);
    if (i % 64 == 63) {
      probe->record(word);
      word = 0;
    }
  }
  probe->record(word);
}

// Spatial problem padded to three axes.
struct Grid3 {
  std::size_t in[3] = {1, 1, 1};
  std::size_t k[3] = {1, 1, 1};
  std::size_t s[3] = {1, 1, 1};
  std::size_t p[3] = {0, 0, 0};
  std::size_t out[3] = {1, 1, 1};
  std::size_t in_volume() const { return in[0] * in[1] * in[2]; }
  std::size_t out_volume() const { return out[0] * out[1] * out[2]; }
  std::size_t k_volume() const { return k[0] * k[1] * k[2]; }
};

std::size_t pick(const std::vector<std::size_t>& v, std::size_t i, std::size_t fallback, const char* what,
                 std::size_t rank) {
  if (v.empty()) return fallback;
  if (v.size() == 1) return v[0];
  if (v.size() != rank) {
    throw ConfigError(std::string(what) + " has " + std::to_string(v.size()) + " entries for " +
                      std::to_string(rank) + " spatial axes");
  }
  return v[i];
}

Grid3 make_grid(const Shape& x, const std::vector<std::size_t>& kernel, const std::vector<std::size_t>& stride,
                const std::vector<std::size_t>& padding) {
  const std::size_t rank = x.size() - 2;
  Grid3 g;
  const std::size_t off = 3 - rank;
  for (std::size_t i = 0; i < rank; ++i) {
    g.in[off + i] = x[2 + i];
    g.k[off + i] = kernel[i];
    g.s[off + i] = pick(stride, i, 1, "stride", rank);
    g.p[off + i] = pick(padding, i, 0, "padding", rank);
    g.out[off + i] = window_output_extent(g.in[off + i], g.k[off + i], g.s[off + i], g.p[off + i]);
  }
  return g;
}

template <class T>
void im2col(const T* x, std::size_t channels, const Grid3& g, T* col) {
  const std::size_t P = g.out_volume();
  const std::ptrdiff_t in0 = g.in[0], in1 = g.in[1], in2 = g.in[2];
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* xc = x + c * g.in_volume();
    for (std::size_t kd = 0; kd < g.k[0]; ++kd)
      for (std::size_t kh = 0; kh < g.k[1]; ++kh)
        for (std::size_t kw = 0; kw < g.k[2]; ++kw, ++row) {
          T* dst = col + row * P;
          for (std::size_t od = 0; od < g.out[0]; ++od) {
            const std::ptrdiff_t id = std::ptrdiff_t(od * g.s[0] + kd) - std::ptrdiff_t(g.p[0]);
            if (id < 0 || id >= in0) {
              std::fill_n(dst, g.out[1] * g.out[2], T(0));
              dst += g.out[1] * g.out[2];
              continue;
            }
            for (std::size_t oh = 0; oh < g.out[1]; ++oh) {
              const std::ptrdiff_t ih = std::ptrdiff_t(oh * g.s[1] + kh) - std::ptrdiff_t(g.p[1]);
              if (ih < 0 || ih >= in1) {
                std::fill_n(dst, g.out[2], T(0));
                dst += g.out[2];
                continue;
              }
              const T* src = xc + (id * in1 + ih) * in2;
              for (std::size_t ow = 0; ow < g.out[2]; ++ow) {
                const std::ptrdiff_t iw = std::ptrdiff_t(ow * g.s[2] + kw) - std::ptrdiff_t(g.p[2]);
                *dst++ = (iw < 0 || iw >= in2) ? T(0) : src[iw];
              }
            }
          }
        }
  }
}

template <class T>
void col2im_add(const T* col, std::size_t channels, const Grid3& g, T* x) {
  const std::size_t P = g.out_volume();
  const std::ptrdiff_t in0 = g.in[0], in1 = g.in[1], in2 = g.in[2];
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    T* xc = x + c * g.in_volume();
    for (std::size_t kd = 0; kd < g.k[0]; ++kd)
      for (std::size_t kh = 0; kh < g.k[1]; ++kh)
        for (std::size_t kw = 0; kw < g.k[2]; ++kw, ++row) {
          const T* src = col + row * P;
          for (std::size_t od = 0; od < g.out[0]; ++od) {
            const std::ptrdiff_t id = std::ptrdiff_t(od * g.s[0] + kd) - std::ptrdiff_t(g.p[0]);
            if (id < 0 || id >= in0) {
              src += g.out[1] * g.out[2];
              continue;
            }
            for (std::size_t oh = 0; oh < g.out[1]; ++oh) {
              const std::ptrdiff_t ih = std::ptrdiff_t(oh * g.s[1] + kh) - std::ptrdiff_t(g.p[1]);
              if (ih < 0 || ih >= in1) {
                src += g.out[2];
                continue;
              }
              T* dst = xc + (id * in1 + ih) * in2;
              for (std::size_t ow = 0; ow < g.out[2]; ++ow, ++src) {
                const std::ptrdiff_t iw = std::ptrdiff_t(ow * g.s[2] + kw) - std::ptrdiff_t(g.p[2]);
                if (iw >= 0 && iw < in2) dst[iw] += *src;
              }
            }
          }
        }
  }
}

}  // namespace

std::size_t window_output_extent(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ConfigError("stride must be positive");
  if (kernel == 0) throw ConfigError("kernel extent must be positive");
  if (input + 2 * padding < kernel) {
    throw ConfigError("window " + std::to_string(kernel) + " does not fit input extent " + std::to_string(input) +
                      " with padding " + std::to_string(padding) + " (non-positive output extent)");
  }
  return (input + 2 * padding - kernel) / stride + 1;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_data(a, "add");
  require_data(b, "add");
  const std::size_t inner = broadcast_inner(a.shape(), b.shape(), "add");
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i % inner];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "add", [inner](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    auto& ib = *self.inputs[1];
    if (ia.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) ia.grad[i] += self.grad[i];
    if (ib.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) ib.grad[i % inner] += self.grad[i];
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_data(a, "sub");
  require_data(b, "sub");
  const std::size_t inner = broadcast_inner(a.shape(), b.shape(), "sub");
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i % inner];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "sub", [inner](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    auto& ib = *self.inputs[1];
    if (ia.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) ia.grad[i] += self.grad[i];
    if (ib.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) ib.grad[i % inner] -= self.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_data(a, "mul");
  require_data(b, "mul");
  const std::size_t inner = broadcast_inner(a.shape(), b.shape(), "mul");
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i % inner];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [inner](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    auto& ib = *self.inputs[1];
    if (ia.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) ia.grad[i] += self.grad[i] * ib.data[i % inner];
    if (ib.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) ib.grad[i % inner] += self.grad[i] * ia.data[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  require_data(a, "scale");
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>(a.shape(), std::move(out), {a}, "scale", [factor](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) ia.grad[i] += factor * self.grad[i];
  });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_data(a, "matmul");
  require_data(b, "matmul");
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.size(0));
  const auto k = static_cast<Eigen::Index>(a.size(1));
  const auto n = static_cast<Eigen::Index>(b.size(1));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  MapR<T>(out.data(), m, n).noalias() = CMapR<T>(a.data().data(), m, k) * CMapR<T>(b.data().data(), k, n);
  return make_result<T>({a.size(0), b.size(1)}, std::move(out), {a, b}, "matmul", [m, k, n](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    auto& ib = *self.inputs[1];
    CMapR<T> g(self.grad.data(), m, n);
    if (ia.requires_grad)
      MapR<T>(ia.grad.data(), m, k).noalias() += g * CMapR<T>(ib.data.data(), k, n).transpose();
    if (ib.requires_grad)
      MapR<T>(ib.grad.data(), k, n).noalias() += CMapR<T>(ia.data.data(), m, k).transpose() * g;
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_data(a, "transpose");
  if (a.dim() != 2) throw ShapeError("transpose: expected 2-D tensor, got " + to_string(a.shape()));
  const std::size_t r = a.size(0), c = a.size(1);
  std::vector<T> out(r * c);
  const auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  return make_result<T>({c, r}, std::move(out), {a}, "transpose", [r, c](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ia.grad[i * c + j] += self.grad[j * r + i];
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require_data(a, "reshape");
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(out), {a}, "reshape", [](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) ia.grad[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  require_data(a, "narrow");
  const AxisSplit s = split_axis(a.shape(), axis, "narrow");
  if (length == 0 || start + length > s.extent) {
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis of extent " + std::to_string(s.extent));
  }
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<T> out(s.outer * length * s.inner);
  const auto ad = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(ad.begin() + (o * s.extent + start) * s.inner, length * s.inner,
                out.begin() + o * length * s.inner);
  }
  return make_result<T>(std::move(shape), std::move(out), {a}, "narrow", [s, start, length](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    for (std::size_t o = 0; o < s.outer; ++o) {
      const T* src = self.grad.data() + o * length * s.inner;
      T* dst = ia.grad.data() + (o * s.extent + start) * s.inner;
      for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
    }
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  for (const auto& p : parts) require_data(p, "concat");
  const Shape& ref = parts.front().shape();
  std::vector<std::size_t> extents;
  Shape shape = ref;
  shape.at(axis) = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
    if (!ok) throw ShapeError("concat: " + to_string(s) + " incompatible with " + to_string(ref) + " along axis " + std::to_string(axis));
    extents.push_back(s[axis]);
    shape[axis] += s[axis];
  }
  const AxisSplit total = split_axis(shape, axis, "concat");
  std::vector<T> out(numel(shape));
  for (std::size_t o = 0; o < total.outer; ++o) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const std::size_t block = extents[p] * total.inner;
      std::copy_n(parts[p].data().begin() + o * block, block, out.begin() + o * total.extent * total.inner + offset);
      offset += block;
    }
  }
  return make_result<T>(std::move(shape), std::move(out), parts, "concat", [total, extents](TensorNode<T>& self) {
    for (std::size_t o = 0; o < total.outer; ++o) {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < extents.size(); ++p) {
        const std::size_t block = extents[p] * total.inner;
        auto& ip = *self.inputs[p];
        if (ip.requires_grad) {
          const T* src = self.grad.data() + o * total.extent * total.inner + offset;
          T* dst = ip.grad.data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
        offset += block;
      }
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  require_data(a, "relu");
  const auto ad = a.data();
  record_signs(ad.data(), ad.size());
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] > T(0) ? ad[i] : T(0);
  return make_result<T>(a.shape(), std::move(out), {a}, "relu", [](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (ia.data[i] > T(0)) ia.grad[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  require_data(a, "gelu");
  const auto ad = a.data();
  std::vector<T> out(ad.size());
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = T(0.5) * ad[i] * (T(1) + std::erf(ad[i] * inv_sqrt2));
  return make_result<T>(a.shape(), std::move(out), {a}, "gelu", [inv_sqrt2](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T x = ia.data[i];
      const T d = T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * std::exp(T(-0.5) * x * x) * inv_sqrt_2pi;
      ia.grad[i] += self.grad[i] * d;
    }
  });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  require_data(a, "sigmoid");
  const auto ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const T x = ad[i];
    if (x >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-x));
    } else {
      const T e = std::exp(x);
      out[i] = e / (T(1) + e);
    }
  }
  return make_result<T>(a.shape(), std::move(out), {a}, "sigmoid", [](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.data[i];
      ia.grad[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  require_data(a, "tanh");
  const auto ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = std::tanh(ad[i]);
  return make_result<T>(a.shape(), std::move(out), {a}, "tanh", [](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.data[i];
      ia.grad[i] += self.grad[i] * (T(1) - y * y);
    }
  });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  require_data(x, "softmax");
  const AxisSplit s = split_axis(x.shape(), axis, "softmax");
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) m = std::max(m, xd[base + j * s.inner]);
      T total = 0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const T e = std::exp(xd[base + j * s.inner] - m);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= total;
    }
  return make_result<T>(x.shape(), std::move(out), {x}, "softmax", [s](TensorNode<T>& self) {
    auto& ix = *self.inputs[0];
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        T dot = 0;
        for (std::size_t j = 0; j < s.extent; ++j) dot += self.grad[base + j * s.inner] * self.data[base + j * s.inner];
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t k = base + j * s.inner;
          ix.grad[k] += self.data[k] * (self.grad[k] - dot);
        }
      }
  });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, std::size_t axis, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_data(x, "layer_norm");
  require_data(gamma, "layer_norm");
  require_data(beta, "layer_norm");
  if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
  const AxisSplit s = split_axis(x.shape(), axis, "layer_norm");
  if (gamma.numel() != s.extent || beta.numel() != s.extent) {
    throw ShapeError("layer_norm: affine parameters " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                     " do not match axis extent " + std::to_string(s.extent));
  }
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<T> out(xd.size());
  auto xhat = std::make_shared<std::vector<T>>(xd.size());
  auto inv = std::make_shared<std::vector<T>>(s.outer * s.inner);
  const T L = static_cast<T>(s.extent);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mu = 0;
      for (std::size_t j = 0; j < s.extent; ++j) mu += xd[base + j * s.inner];
      mu /= L;
      T var = 0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const T d = xd[base + j * s.inner] - mu;
        var += d * d;
      }
      var /= L;
      const T r = T(1) / std::sqrt(var + eps);
      (*inv)[o * s.inner + i] = r;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const std::size_t k = base + j * s.inner;
        (*xhat)[k] = (xd[k] - mu) * r;
        out[k] = gd[j] * (*xhat)[k] + bd[j];
      }
    }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
                        [s, xhat, inv, L](TensorNode<T>& self) {
                          auto& ix = *self.inputs[0];
                          auto& ig = *self.inputs[1];
                          auto& ib = *self.inputs[2];
                          for (std::size_t o = 0; o < s.outer; ++o)
                            for (std::size_t i = 0; i < s.inner; ++i) {
                              const std::size_t base = o * s.extent * s.inner + i;
                              T sum_d = 0, sum_dx = 0;
                              for (std::size_t j = 0; j < s.extent; ++j) {
                                const std::size_t k = base + j * s.inner;
                                const T g = self.grad[k];
                                if (ig.requires_grad) ig.grad[j] += g * (*xhat)[k];
                                if (ib.requires_grad) ib.grad[j] += g;
                                const T d = g * ig.data[j];
                                sum_d += d;
                                sum_dx += d * (*xhat)[k];
                              }
                              if (!ix.requires_grad) continue;
                              const T r = (*inv)[o * s.inner + i];
                              for (std::size_t j = 0; j < s.extent; ++j) {
                                const std::size_t k = base + j * s.inner;
                                const T d = self.grad[k] * ig.data[j];
                                ix.grad[k] += r / L * (L * d - sum_d - (*xhat)[k] * sum_dx);
                              }
                            }
                        });
}

template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training, T momentum, T eps) {
  require_data(x, "batch_norm");
  if (x.dim() < 2) throw ShapeError("batch_norm: expected [N x C x ...], got " + to_string(x.shape()));
  const std::size_t N = x.size(0), C = x.size(1);
  const std::size_t S = x.numel() / (N * C);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C) {
    throw ShapeError("batch_norm: parameters do not match channel count " + std::to_string(C));
  }
  const std::size_t M = N * S;
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<T> out(xd.size());
  auto xhat = std::make_shared<std::vector<T>>(xd.size());
  auto inv = std::make_shared<std::vector<T>>(C);
  auto rm = running_mean.mutable_data();
  auto rv = running_var.mutable_data();
  for (std::size_t c = 0; c < C; ++c) {
    T mu, var;
    if (training) {
      mu = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < S; ++s) mu += xd[(n * C + c) * S + s];
      mu /= T(M);
      var = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < S; ++s) {
          const T d = xd[(n * C + c) * S + s] - mu;
          var += d * d;
        }
      var /= T(M);
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mu;
      const T unbiased = M > 1 ? var * T(M) / T(M - 1) : var;
      rv[c] = (T(1) - momentum) * rv[c] + momentum * unbiased;
    } else {
      mu = rm[c];
      var = rv[c];
    }
    const T r = T(1) / std::sqrt(var + eps);
    (*inv)[c] = r;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t k = (n * C + c) * S + s;
        (*xhat)[k] = (xd[k] - mu) * r;
        out[k] = gd[c] * (*xhat)[k] + bd[c];
      }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta}, "batch_norm",
                        [N, C, S, M, training, xhat, inv](TensorNode<T>& self) {
                          auto& ix = *self.inputs[0];
                          auto& ig = *self.inputs[1];
                          auto& ib = *self.inputs[2];
                          for (std::size_t c = 0; c < C; ++c) {
                            T sum_d = 0, sum_dx = 0;
                            for (std::size_t n = 0; n < N; ++n)
                              for (std::size_t s = 0; s < S; ++s) {
                                const std::size_t k = (n * C + c) * S + s;
                                const T g = self.grad[k];
                                if (ig.requires_grad) ig.grad[c] += g * (*xhat)[k];
                                if (ib.requires_grad) ib.grad[c] += g;
                                const T d = g * ig.data[c];
                                sum_d += d;
                                sum_dx += d * (*xhat)[k];
                              }
                            if (!ix.requires_grad) continue;
                            const T r = (*inv)[c];
                            for (std::size_t n = 0; n < N; ++n)
                              for (std::size_t s = 0; s < S; ++s) {
                                const std::size_t k = (n * C + c) * S + s;
                                const T d = self.grad[k] * ig.data[c];
                                if (training) {
                                  ix.grad[k] += r / T(M) * (T(M) * d - sum_d - (*xhat)[k] * sum_dx);
                                } else {
                                  ix.grad[k] += r * d;
                                }
                              }
                          }
                        });
}

template <class T>
Tensor<T> conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, const ConvGeometry& geometry) {
  require_data(x, "conv");
  require_data(w, "conv");
  if (x.dim() < 3 || x.dim() > 5) {
    throw ShapeError("conv: expected [B x C x D1..DN] with N in {1,2,3}, got " + to_string(x.shape()));
  }
  if (w.dim() != x.dim() || w.size(1) != x.size(1)) {
    throw ShapeError("conv: weight " + to_string(w.shape()) + " incompatible with input " + to_string(x.shape()));
  }
  const std::size_t B = x.size(0), C = x.size(1), Co = w.size(0);
  if (bias.defined() && bias.numel() != Co) throw ShapeError("conv: bias does not match output channels");
  std::vector<std::size_t> kernel(w.shape().begin() + 2, w.shape().end());
  const Grid3 g = make_grid(x.shape(), kernel, geometry.stride, geometry.padding);
  const std::size_t P = g.out_volume();
  const std::size_t CK = C * g.k_volume();
  const std::size_t in_vol = C * g.in_volume();

  Shape shape{B, Co};
  const std::size_t rank = x.dim() - 2;
  for (std::size_t i = 0; i < rank; ++i) shape.push_back(g.out[3 - rank + i]);

  const bool track = grad_enabled() && (x.requires_grad() || w.requires_grad() || (bias.defined() && bias.requires_grad()));
  auto cols = std::make_shared<std::vector<T>>(track ? B * CK * P : CK * P);
  std::vector<T> out(B * Co * P);
  CMapR<T> W(w.data().data(), Co, CK);
  for (std::size_t n = 0; n < B; ++n) {
    T* col = cols->data() + (track ? n * CK * P : 0);
    im2col(x.data().data() + n * in_vol, C, g, col);
    MapR<T> Y(out.data() + n * Co * P, Co, P);
    Y.noalias() = W * CMapR<T>(col, CK, P);
    if (bias.defined()) {
      const auto bd = bias.data();
      for (std::size_t co = 0; co < Co; ++co) Y.row(co).array() += bd[co];
    }
  }
  if (!track) cols.reset();

  std::vector<Tensor<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(shape), std::move(out), inputs, "conv",
                        [g, B, C, Co, P, CK, in_vol, cols](TensorNode<T>& self) {
                          auto& ix = *self.inputs[0];
                          auto& iw = *self.inputs[1];
                          TensorNode<T>* ib = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
                          std::vector<T> dcol(ix.requires_grad ? CK * P : 0);
                          for (std::size_t n = 0; n < B; ++n) {
                            CMapR<T> G(self.grad.data() + n * Co * P, Co, P);
                            CMapR<T> col(cols->data() + n * CK * P, CK, P);
                            if (iw.requires_grad) MapR<T>(iw.grad.data(), Co, CK).noalias() += G * col.transpose();
                            if (ix.requires_grad) {
                              MapR<T>(dcol.data(), CK, P).noalias() = CMapR<T>(iw.data.data(), Co, CK).transpose() * G;
                              col2im_add(dcol.data(), C, g, ix.grad.data() + n * in_vol);
                            }
                            if (ib && ib->requires_grad)
                              for (std::size_t co = 0; co < Co; ++co) ib->grad[co] += G.row(co).sum();
                          }
                        });
}

template <class T>
Tensor<T> pool(const Tensor<T>& x, PoolKind kind, const std::vector<std::size_t>& window,
               const std::vector<std::size_t>& stride, const std::vector<std::size_t>& padding) {
  require_data(x, "pool");
  if (x.dim() < 3 || x.dim() > 5) throw ShapeError("pool: expected [B x C x D1..DN], got " + to_string(x.shape()));
  const std::size_t rank = x.dim() - 2;
  std::vector<std::size_t> kernel(rank);
  for (std::size_t i = 0; i < rank; ++i) kernel[i] = pick(window, i, 1, "window", rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (2 * pick(padding, i, 0, "padding", rank) > kernel[i]) throw ConfigError("pool: padding exceeds half the window");
  }
  const Grid3 g = make_grid(x.shape(), kernel, stride, padding);
  const std::size_t planes = x.size(0) * x.size(1);
  const std::size_t P = g.out_volume();
  const std::size_t V = g.in_volume();
  Shape shape{x.size(0), x.size(1)};
  for (std::size_t i = 0; i < rank; ++i) shape.push_back(g.out[3 - rank + i]);

  std::vector<T> out(planes * P);
  auto argmax = std::make_shared<std::vector<std::size_t>>(kind == PoolKind::max ? planes * P : 0);
  const auto xd = x.data();
  const T divisor = static_cast<T>(g.k_volume());
  BranchProbe* probe = active_branch_probe();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = xd.data() + pl * V;
    for (std::size_t od = 0; od < g.out[0]; ++od)
      for (std::size_t oh = 0; oh < g.out[1]; ++oh)
        for (std::size_t ow = 0; ow < g.out[2]; ++ow) {
          const std::size_t o = (od * g.out[1] + oh) * g.out[2] + ow;
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_at = 0;
          T acc = 0;
          for (std::size_t kd = 0; kd < g.k[0]; ++kd) {
            const std::ptrdiff_t id = std::ptrdiff_t(od * g.s[0] + kd) - std::ptrdiff_t(g.p[0]);
            if (id < 0 || id >= std::ptrdiff_t(g.in[0])) continue;
            for (std::size_t kh = 0; kh < g.k[1]; ++kh) {
              const std::ptrdiff_t ih = std::ptrdiff_t(oh * g.s[1] + kh) - std::ptrdiff_t(g.p[1]);
              if (ih < 0 || ih >= std::ptrdiff_t(g.in[1])) continue;
              for (std::size_t kw = 0; kw < g.k[2]; ++kw) {
                const std::ptrdiff_t iw = std::ptrdiff_t(ow * g.s[2] + kw) - std::ptrdiff_t(g.p[2]);
                if (iw < 0 || iw >= std::ptrdiff_t(g.in[2])) continue;
                const std::size_t at = (std::size_t(id) * g.in[1] + std::size_t(ih)) * g.in[2] + std::size_t(iw);
                if (kind == PoolKind::max) {
                  if (src[at] > best) {
                    best = src[at];
                    best_at = at;
                  }
                } else {
                  acc += src[at];
                }
              }
            }
          }
          if (kind == PoolKind::max) {
            out[pl * P + o] = best;
            (*argmax)[pl * P + o] = best_at;
            if (probe) probe->record(best_at);
          } else {
            out[pl * P + o] = acc / divisor;
          }
        }
  }
  return make_result<T>(std::move(shape), std::move(out), {x}, kind == PoolKind::max ? "max_pool" : "avg_pool",
                        [kind, g, planes, P, V, argmax, divisor](TensorNode<T>& self) {
                          auto& ix = *self.inputs[0];
                          for (std::size_t pl = 0; pl < planes; ++pl) {
                            T* dst = ix.grad.data() + pl * V;
                            if (kind == PoolKind::max) {
                              for (std::size_t o = 0; o < P; ++o) dst[(*argmax)[pl * P + o]] += self.grad[pl * P + o];
                              continue;
                            }
                            for (std::size_t od = 0; od < g.out[0]; ++od)
                              for (std::size_t oh = 0; oh < g.out[1]; ++oh)
                                for (std::size_t ow = 0; ow < g.out[2]; ++ow) {
                                  const T gv = self.grad[pl * P + (od * g.out[1] + oh) * g.out[2] + ow] / divisor;
                                  for (std::size_t kd = 0; kd < g.k[0]; ++kd) {
                                    const std::ptrdiff_t id = std::ptrdiff_t(od * g.s[0] + kd) - std::ptrdiff_t(g.p[0]);
                                    if (id < 0 || id >= std::ptrdiff_t(g.in[0])) continue;
                                    for (std::size_t kh = 0; kh < g.k[1]; ++kh) {
                                      const std::ptrdiff_t ih = std::ptrdiff_t(oh * g.s[1] + kh) - std::ptrdiff_t(g.p[1]);
                                      if (ih < 0 || ih >= std::ptrdiff_t(g.in[1])) continue;
                                      for (std::size_t kw = 0; kw < g.k[2]; ++kw) {
                                        const std::ptrdiff_t iw = std::ptrdiff_t(ow * g.s[2] + kw) - std::ptrdiff_t(g.p[2]);
                                        if (iw < 0 || iw >= std::ptrdiff_t(g.in[2])) continue;
                                        dst[(std::size_t(id) * g.in[1] + std::size_t(ih)) * g.in[2] + std::size_t(iw)] += gv;
                                      }
                                    }
                                  }
                                }
                          }
                        });
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_data(x, "global_avg_pool");
  if (x.dim() < 3) throw ShapeError("global_avg_pool: expected [B x C x spatial...], got " + to_string(x.shape()));
  const std::size_t planes = x.size(0) * x.size(1);
  const std::size_t S = x.numel() / planes;
  const auto xd = x.data();
  std::vector<T> out(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    T acc = 0;
    for (std::size_t s = 0; s < S; ++s) acc += xd[p * S + s];
    out[p] = acc / T(S);
  }
  return make_result<T>({x.size(0), x.size(1)}, std::move(out), {x}, "global_avg_pool", [planes, S](TensorNode<T>& self) {
    auto& ix = *self.inputs[0];
    for (std::size_t p = 0; p < planes; ++p) {
      const T gv = self.grad[p] / T(S);
      for (std::size_t s = 0; s < S; ++s) ix.grad[p * S + s] += gv;
    }
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  require_data(a, "sum");
  T acc = 0;
  for (T v : a.data()) acc += v;
  return make_result<T>({1}, {acc}, {a}, "sum", [](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    for (auto& g : ia.grad) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  require_data(a, "mean");
  T acc = 0;
  for (T v : a.data()) acc += v;
  const T n = static_cast<T>(a.numel());
  return make_result<T>({1}, {acc / n}, {a}, "mean", [n](TensorNode<T>& self) {
    auto& ia = *self.inputs[0];
    for (auto& g : ia.grad) g += self.grad[0] / n;
  });
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  require_data(x, "dropout");
  const auto xd = x.data();
  auto mask = std::make_shared<std::vector<T>>(xd.size());
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? T(0) : keep_scale;
    out[i] = xd[i] * (*mask)[i];
  }
  return make_result<T>(x.shape(), std::move(out), {x}, "dropout", [mask](TensorNode<T>& self) {
    auto& ix = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) ix.grad[i] += self.grad[i] * (*mask)[i];
  });
}

template <class T>
Tensor<T> focal_loss(const Tensor<T>& probs, const std::vector<int>& targets, double gamma, std::uint64_t* clamped) {
  require_data(probs, "focal_loss");
  if (probs.dim() != 2 || probs.size(0) != targets.size()) {
    throw ShapeError("focal_loss: probabilities " + to_string(probs.shape()) + " do not match " +
                     std::to_string(targets.size()) + " targets");
  }
  if (gamma < 0) throw ConfigError("focal_loss: gamma must be non-negative");
  const std::size_t B = probs.size(0), K = probs.size(1);
  constexpr double kFloor = 1e-12;
  const auto pd = probs.data();
  auto pt = std::make_shared<std::vector<double>>(B);
  auto was_clamped = std::make_shared<std::vector<bool>>(B, false);
  double total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const int t = targets[b];
    if (t < 0 || static_cast<std::size_t>(t) >= K) throw ConfigError("focal_loss: target out of range");
    double p = pd[b * K + static_cast<std::size_t>(t)];
    if (p < kFloor) {
      p = kFloor;
      (*was_clamped)[b] = true;
      if (clamped) ++*clamped;
    }
    (*pt)[b] = p;
    const double w = gamma == 0.0 ? 1.0 : std::pow(1.0 - p, gamma);
    total += -w * std::log(p);
  }
  const double n = static_cast<double>(B);
  return make_result<T>({1}, {static_cast<T>(total / n)}, {probs}, "focal_loss",
                        [targets, gamma, pt, was_clamped, K, n](TensorNode<T>& self) {
                          auto& ip = *self.inputs[0];
                          for (std::size_t b = 0; b < targets.size(); ++b) {
                            if ((*was_clamped)[b]) continue;
                            const double p = (*pt)[b];
                            const double q = 1.0 - p;
                            double d = gamma == 0.0 ? -1.0 / p : -std::pow(q, gamma) / p;
                            if (gamma != 0.0 && q > 0.0) d += gamma * std::pow(q, gamma - 1.0) * std::log(p);
                            ip.grad[b * K + static_cast<std::size_t>(targets[b])] += static_cast<T>(self.grad[0] * d / n);
                          }
                        });
}

#define VF_INSTANTIATE_OPS(T)                                                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> transpose(const Tensor<T>&);                                                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                          \
  template Tensor<T> narrow(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                           \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                        \
  template Tensor<T> relu(const Tensor<T>&);                                                                    \
  template Tensor<T> gelu(const Tensor<T>&);                                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                 \
  template Tensor<T> tanh(const Tensor<T>&);                                                                    \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                    \
  template Tensor<T> layer_norm(const Tensor<T>&, std::size_t, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&,   \
                                bool, T, T);                                                                    \
  template Tensor<T> conv(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvGeometry&);           \
  template Tensor<T> pool(const Tensor<T>&, PoolKind, const std::vector<std::size_t>&,                          \
                          const std::vector<std::size_t>&, const std::vector<std::size_t>&);                    \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                         \
  template Tensor<T> sum(const Tensor<T>&);                                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                                    \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);                                                   \
  template Tensor<T> focal_loss(const Tensor<T>&, const std::vector<int>&, double, std::uint64_t*);

VF_INSTANTIATE_OPS(float)
VF_INSTANTIATE_OPS(double)
#undef VF_INSTANTIATE_OPS

}  // namespace volformer
