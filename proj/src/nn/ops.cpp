#include "vsdf/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "vsdf/simd/kernels.hpp"

namespace vsdf::nn {
namespace {

template <typename T>
Tensor<T>* grad_of(const Var<T>& v) {
  return v.defined() && v.requires_grad() ? &v.node()->grad_buffer() : nullptr;
}

template <typename T>
Tensor<T>* grad_of(Node<T>* n) {
  return n != nullptr && n->requires_grad ? &n->grad_buffer() : nullptr;
}

void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_to_string(a) + " vs " +
                                shape_to_string(b));
  }
}

template <typename T>
Var<T> no_bias() {
  return Var<T>();
}

// ---------------------------------------------------------------- im2col

struct ConvGeom {
  int ci, z, y, x, k, stride, pad, zo, yo, xo;
  std::size_t in_vox() const { return static_cast<std::size_t>(z) * y * x; }
  std::size_t out_vox() const { return static_cast<std::size_t>(zo) * yo * xo; }
  int rows() const { return ci * k * k * k; }
};

template <typename T>
void im2col(const T* src, const ConvGeom& g, T* col) {
  const std::size_t ov = g.out_vox();
  for (int c = 0; c < g.ci; ++c) {
    const T* plane = src + static_cast<std::size_t>(c) * g.in_vox();
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx) {
          T* row = col + (static_cast<std::size_t>(((c * g.k + kz) * g.k + ky) * g.k + kx)) * ov;
          for (int oz = 0; oz < g.zo; ++oz) {
            const int iz = oz * g.stride - g.pad + kz;
            for (int oy = 0; oy < g.yo; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              T* dst = row + (static_cast<std::size_t>(oz) * g.yo + oy) * g.xo;
              if (iz < 0 || iz >= g.z || iy < 0 || iy >= g.y) {
                std::fill(dst, dst + g.xo, T{0});
                continue;
              }
              const T* line = plane + (static_cast<std::size_t>(iz) * g.y + iy) * g.x;
              if (g.stride == 1) {
                const int lo = std::max(0, g.pad - kx);
                const int hi = std::min(g.xo, g.x + g.pad - kx);
                std::fill(dst, dst + std::max(lo, 0), T{0});
                if (hi > lo) std::copy(line + lo - g.pad + kx, line + hi - g.pad + kx, dst + lo);
                std::fill(dst + std::max(hi, lo), dst + g.xo, T{0});
              } else {
                for (int ox = 0; ox < g.xo; ++ox) {
                  const int ix = ox * g.stride - g.pad + kx;
                  dst[ox] = (ix >= 0 && ix < g.x) ? line[ix] : T{0};
                }
              }
            }
          }
        }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* dst_grad) {
  const std::size_t ov = g.out_vox();
  for (int c = 0; c < g.ci; ++c) {
    T* plane = dst_grad + static_cast<std::size_t>(c) * g.in_vox();
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx) {
          const T* row = col + (static_cast<std::size_t>(((c * g.k + kz) * g.k + ky) * g.k + kx)) * ov;
          for (int oz = 0; oz < g.zo; ++oz) {
            const int iz = oz * g.stride - g.pad + kz;
            if (iz < 0 || iz >= g.z) continue;
            for (int oy = 0; oy < g.yo; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.y) continue;
              const T* src = row + (static_cast<std::size_t>(oz) * g.yo + oy) * g.xo;
              T* line = plane + (static_cast<std::size_t>(iz) * g.y + iy) * g.x;
              if (g.stride == 1) {
                const int lo = std::max(0, g.pad - kx);
                const int hi = std::min(g.xo, g.x + g.pad - kx);
                for (int ox = lo; ox < hi; ++ox) line[ox - g.pad + kx] += src[ox];
              } else {
                for (int ox = 0; ox < g.xo; ++ox) {
                  const int ix = ox * g.stride - g.pad + kx;
                  if (ix >= 0 && ix < g.x) line[ix] += src[ox];
                }
              }
            }
          }
        }
  }
}

template <typename T>
std::vector<T>& scratch(std::size_t n, int slot) {
  thread_local std::vector<T> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

// Walks a (B, C, Z, Y, X) volume in space_to_depth output order and calls
// f(src_index, dst_index) for every element.
template <typename F>
void for_each_s2d(const Shape& in, int r, F&& f) {
  const int b = in[0], c = in[1], z = in[2], y = in[3], x = in[4];
  const int zo = z / r, yo = y / r, xo = x / r;
  std::size_t i = 0;
  for (int bi = 0; bi < b; ++bi)
    for (int ci = 0; ci < c; ++ci)
      for (int dz = 0; dz < r; ++dz)
        for (int dy = 0; dy < r; ++dy)
          for (int dx = 0; dx < r; ++dx)
            for (int oz = 0; oz < zo; ++oz)
              for (int oy = 0; oy < yo; ++oy) {
                const std::size_t row = (((static_cast<std::size_t>(bi) * c + ci) * z + (oz * r + dz)) * y +
                                         (oy * r + dy)) * x + dx;
                for (int ox = 0; ox < xo; ++ox) f(row + static_cast<std::size_t>(ox) * r, i++);
              }
}

// Direct stride-1 convolution for layers with very few output channels, where
// im2col would be dominated by memory traffic.
template <typename T>
struct DirectConv {
  const ConvGeom& g;
  int co;

  template <typename F>
  void for_each_tap(F&& f) const {
    for (int o = 0; o < co; ++o)
      for (int c = 0; c < g.ci; ++c)
        for (int kz = 0; kz < g.k; ++kz)
          for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
              const std::size_t widx = (((static_cast<std::size_t>(o) * g.ci + c) * g.k + kz) * g.k + ky) * g.k + kx;
              const int lo = std::max(0, g.pad - kx), hi = std::min(g.xo, g.x + g.pad - kx);
              if (hi <= lo) continue;
              for (int oz = 0; oz < g.zo; ++oz) {
                const int iz = oz - g.pad + kz;
                if (iz < 0 || iz >= g.z) continue;
                for (int oy = 0; oy < g.yo; ++oy) {
                  const int iy = oy - g.pad + ky;
                  if (iy < 0 || iy >= g.y) continue;
                  const std::size_t out = ((static_cast<std::size_t>(o) * g.zo + oz) * g.yo + oy) * g.xo + lo;
                  const std::size_t in = ((static_cast<std::size_t>(c) * g.z + iz) * g.y + iy) * g.x + lo - g.pad + kx;
                  f(widx, out, in, static_cast<std::size_t>(hi - lo));
                }
              }
            }
  }
};

}  // namespace

// ------------------------------------------------------------ elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] + b.value()[i];
  auto out = detail::make_result(std::move(y), {&a, &b});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), an = a.node(), bn = b.node()] {
      const auto& g = self->grad;
      for (Node<T>* n : {an, bn}) {
        if (auto* dg = grad_of(n)) simd::axpy<T>(g.numel(), T{1}, g.ptr(), dg->ptr());
      }
    };
  }
  return out;
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] - b.value()[i];
  auto out = detail::make_result(std::move(y), {&a, &b});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), an = a.node(), bn = b.node()] {
      const auto& g = self->grad;
      if (auto* da = grad_of(an)) simd::axpy<T>(g.numel(), T{1}, g.ptr(), da->ptr());
      if (auto* db = grad_of(bn)) simd::axpy<T>(g.numel(), T{-1}, g.ptr(), db->ptr());
    };
  }
  return out;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] * b.value()[i];
  auto out = detail::make_result(std::move(y), {&a, &b});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), an = a.node(), bn = b.node()] {
      const auto& g = self->grad;
      if (auto* da = grad_of(an))
        for (std::size_t i = 0; i < g.numel(); ++i) (*da)[i] += g[i] * bn->value[i];
      if (auto* db = grad_of(bn))
        for (std::size_t i = 0; i < g.numel(); ++i) (*db)[i] += g[i] * an->value[i];
    };
  }
  return out;
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = x.value()[i] * s;
  auto out = detail::make_result(std::move(y), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), s] {
      if (auto* dx = grad_of(xn)) simd::axpy<T>(self->grad.numel(), s, self->grad.ptr(), dx->ptr());
    };
  }
  return out;
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  const std::size_t n = x.numel();
  Tensor<T> sig(x.shape());
  simd::sigmoid<T>(n, x.value().ptr(), sig.ptr());
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < n; ++i) y[i] = x.value()[i] * sig[i];
  auto out = detail::make_result(std::move(y), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), sig = std::move(sig)] {
      if (auto* dx = grad_of(xn)) {
        const auto& g = self->grad;
        const auto& xv = xn->value;
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const T s = sig[i];
          (*dx)[i] += g[i] * s * (T{1} + xv[i] * (T{1} - s));
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> scaled_tanh(const Var<T>& x, T amplitude) {
  Tensor<T> th(x.shape());
  for (std::size_t i = 0; i < th.numel(); ++i) th[i] = std::tanh(x.value()[i]);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = amplitude * th[i];
  auto out = detail::make_result(std::move(y), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), th = std::move(th), amplitude] {
      if (auto* dx = grad_of(xn)) {
        const auto& g = self->grad;
        for (std::size_t i = 0; i < g.numel(); ++i) (*dx)[i] += g[i] * amplitude * (T{1} - th[i] * th[i]);
      }
    };
  }
  return out;
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::exp(x.value()[i]);
  auto out = detail::make_result(std::move(y), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node()] {
      if (auto* dx = grad_of(xn)) {
        for (std::size_t i = 0; i < self->grad.numel(); ++i) (*dx)[i] += self->grad[i] * self->value[i];
      }
    };
  }
  return out;
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::clamp(x.value()[i], lo, hi);
  auto out = detail::make_result(std::move(y), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), lo, hi] {
      if (auto* dx = grad_of(xn)) {
        for (std::size_t i = 0; i < self->grad.numel(); ++i) {
          const T v = xn->value[i];
          if (v > lo && v < hi) (*dx)[i] += self->grad[i];
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape: element count mismatch");
  Tensor<T> y(std::move(shape), x.value().data);
  auto out = detail::make_result(std::move(y), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node()] {
      if (auto* dx = grad_of(xn)) simd::axpy<T>(self->grad.numel(), T{1}, self->grad.ptr(), dx->ptr());
    };
  }
  return out;
}

// ---------------------------------------------------------------- volumes

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  require(x.value().rank() == 5, "conv3d: input must be (B, C, Z, Y, X), got " + shape_to_string(x.shape()));
  require(weight.value().rank() == 5, "conv3d: weight must be (Co, Ci, k, k, k)");
  const int batch = x.dim(0);
  const int co = weight.dim(0);
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), x.dim(4), weight.dim(2), stride, pad, 0, 0, 0};
  require(weight.dim(1) == g.ci, "conv3d: channel mismatch, input " + std::to_string(g.ci) +
                                     " weight " + std::to_string(weight.dim(1)));
  g.zo = (g.z + 2 * pad - g.k) / stride + 1;
  g.yo = (g.y + 2 * pad - g.k) / stride + 1;
  g.xo = (g.x + 2 * pad - g.k) / stride + 1;
  require(g.zo > 0 && g.yo > 0 && g.xo > 0, "conv3d: empty output");
  const bool pointwise = g.k == 1 && stride == 1 && pad == 0;
  const bool direct = !pointwise && stride == 1 && co <= 4;
  const std::size_t iv = g.in_vox(), ov = g.out_vox();
  const int rows = g.rows();

  Tensor<T> y({batch, co, g.zo, g.yo, g.xo});
  for (int b = 0; b < batch; ++b) {
    const T* xb = x.value().ptr() + static_cast<std::size_t>(b) * g.ci * iv;
    T* yb = y.ptr() + static_cast<std::size_t>(b) * co * ov;
    if (direct) {
      std::fill(yb, yb + static_cast<std::size_t>(co) * ov, T{0});
      const T* w = weight.value().ptr();
      DirectConv<T>{g, co}.for_each_tap([&](std::size_t wi, std::size_t o, std::size_t i, std::size_t n) {
        simd::axpy<T>(n, w[wi], xb + i, yb + o);
      });
    } else {
      const T* rhs = xb;
      if (!pointwise) {
        auto& col = scratch<T>(static_cast<std::size_t>(rows) * ov, 0);
        im2col(xb, g, col.data());
        rhs = col.data();
      }
      simd::gemm<T>(false, false, co, static_cast<int>(ov), rows, weight.value().ptr(), rows, rhs,
                    static_cast<int>(ov), T{0}, yb, static_cast<int>(ov));
    }
    if (bias.defined()) {
      for (int c = 0; c < co; ++c) {
        const T bv = bias.value()[c];
        T* p = yb + static_cast<std::size_t>(c) * ov;
        for (std::size_t i = 0; i < ov; ++i) p[i] += bv;
      }
    }
  }
  auto out = detail::make_result(std::move(y), {&x, &weight, &bias});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), wn = weight.node(), bn = bias.node(),
                               g, batch, co, pointwise, direct] {
      const std::size_t iv = g.in_vox(), ov = g.out_vox();
      const int rows = g.rows();
      Tensor<T>* dx = grad_of(xn);
      Tensor<T>* dw = grad_of(wn);
      Tensor<T>* db = grad_of(bn);
      for (int b = 0; b < batch; ++b) {
        const T* gy = self->grad.ptr() + static_cast<std::size_t>(b) * co * ov;
        const T* xb = xn->value.ptr() + static_cast<std::size_t>(b) * g.ci * iv;
        if (db) {
          for (int c = 0; c < co; ++c) {
            const T* p = gy + static_cast<std::size_t>(c) * ov;
            T s{0};
            for (std::size_t i = 0; i < ov; ++i) s += p[i];
            (*db)[c] += s;
          }
        }
        if (direct) {
          const T* w = wn->value.ptr();
          T* dxb = dx ? dx->ptr() + static_cast<std::size_t>(b) * g.ci * iv : nullptr;
          T* dwp = dw ? dw->ptr() : nullptr;
          DirectConv<T>{g, co}.for_each_tap([&](std::size_t wi, std::size_t o, std::size_t i, std::size_t n) {
            if (dwp) dwp[wi] += simd::dot<T>(gy + o, xb + i, n);
            if (dxb) simd::axpy<T>(n, w[wi], gy + o, dxb + i);
          });
          continue;
        }
        if (pointwise) {
          if (dw) {
            simd::gemm<T>(false, true, co, g.ci, static_cast<int>(ov), gy, static_cast<int>(ov), xb,
                          static_cast<int>(ov), T{1}, dw->ptr(), g.ci);
          }
          if (dx) {
            simd::gemm<T>(true, false, g.ci, static_cast<int>(ov), co, wn->value.ptr(), g.ci, gy,
                          static_cast<int>(ov), T{1}, dx->ptr() + static_cast<std::size_t>(b) * g.ci * iv,
                          static_cast<int>(ov));
          }
          continue;
        }
        if (dw) {
          auto& col = scratch<T>(static_cast<std::size_t>(rows) * ov, 0);
          im2col(xb, g, col.data());
          simd::gemm<T>(false, true, co, rows, static_cast<int>(ov), gy, static_cast<int>(ov), col.data(),
                        static_cast<int>(ov), T{1}, dw->ptr(), rows);
        }
        if (dx) {
          auto& dcol = scratch<T>(static_cast<std::size_t>(rows) * ov, 1);
          simd::gemm<T>(true, false, rows, static_cast<int>(ov), co, wn->value.ptr(), rows, gy,
                        static_cast<int>(ov), T{0}, dcol.data(), static_cast<int>(ov));
          col2im_add(dcol.data(), g, dx->ptr() + static_cast<std::size_t>(b) * g.ci * iv);
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  require(x.value().rank() == 5, "avg_pool2: expects a volume");
  const int bc = x.dim(0) * x.dim(1), z = x.dim(2), y = x.dim(3), xx = x.dim(4);
  require(z % 2 == 0 && y % 2 == 0 && xx % 2 == 0, "avg_pool2: odd spatial size");
  const int zo = z / 2, yo = y / 2, xo = xx / 2;
  Tensor<T> out_t({x.dim(0), x.dim(1), zo, yo, xo});
  const T* src = x.value().ptr();
  for (int p = 0; p < bc; ++p)
    for (int oz = 0; oz < zo; ++oz)
      for (int oy = 0; oy < yo; ++oy)
        for (int ox = 0; ox < xo; ++ox) {
          T s{0};
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                s += src[((static_cast<std::size_t>(p) * z + 2 * oz + dz) * y + 2 * oy + dy) * xx + 2 * ox + dx];
          out_t[((static_cast<std::size_t>(p) * zo + oz) * yo + oy) * xo + ox] = s / T{8};
        }
  auto out = detail::make_result(std::move(out_t), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), bc, z, y, xx] {
      Tensor<T>* dx = grad_of(xn);
      if (!dx) return;
      const int zo = z / 2, yo = y / 2, xo = xx / 2;
      for (int p = 0; p < bc; ++p)
        for (int iz = 0; iz < z; ++iz)
          for (int iy = 0; iy < y; ++iy)
            for (int ix = 0; ix < xx; ++ix) {
              (*dx)[((static_cast<std::size_t>(p) * z + iz) * y + iy) * xx + ix] +=
                  self->grad[((static_cast<std::size_t>(p) * zo + iz / 2) * yo + iy / 2) * xo + ix / 2] / T{8};
            }
    };
  }
  return out;
}

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
  require(x.value().rank() == 5, "upsample_nearest2: expects a volume");
  const int bc = x.dim(0) * x.dim(1), z = x.dim(2), y = x.dim(3), xx = x.dim(4);
  const int zo = 2 * z, yo = 2 * y, xo = 2 * xx;
  Tensor<T> out_t({x.dim(0), x.dim(1), zo, yo, xo});
  const T* src = x.value().ptr();
  for (int p = 0; p < bc; ++p)
    for (int oz = 0; oz < zo; ++oz)
      for (int oy = 0; oy < yo; ++oy)
        for (int ox = 0; ox < xo; ++ox)
          out_t[((static_cast<std::size_t>(p) * zo + oz) * yo + oy) * xo + ox] =
              src[((static_cast<std::size_t>(p) * z + oz / 2) * y + oy / 2) * xx + ox / 2];
  auto out = detail::make_result(std::move(out_t), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), bc, z, y, xx] {
      Tensor<T>* dx = grad_of(xn);
      if (!dx) return;
      const int zo = 2 * z, yo = 2 * y, xo = 2 * xx;
      for (int p = 0; p < bc; ++p)
        for (int oz = 0; oz < zo; ++oz)
          for (int oy = 0; oy < yo; ++oy)
            for (int ox = 0; ox < xo; ++ox)
              (*dx)[((static_cast<std::size_t>(p) * z + oz / 2) * y + oy / 2) * xx + ox / 2] +=
                  self->grad[((static_cast<std::size_t>(p) * zo + oz) * yo + oy) * xo + ox];
    };
  }
  return out;
}

template <typename T>
Var<T> space_to_depth(const Var<T>& x, int r) {
  require(x.value().rank() == 5, "space_to_depth: expects a volume");
  require(r > 0 && x.dim(2) % r == 0 && x.dim(3) % r == 0 && x.dim(4) % r == 0,
          "space_to_depth: block size must divide the spatial dims");
  Tensor<T> y({x.dim(0), x.dim(1) * r * r * r, x.dim(2) / r, x.dim(3) / r, x.dim(4) / r});
  const T* src = x.value().ptr();
  T* dst = y.ptr();
  for_each_s2d(x.shape(), r, [&](std::size_t s, std::size_t d) { dst[d] = src[s]; });
  auto out = detail::make_result(std::move(y), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), r] {
      if (auto* dx = grad_of(xn)) {
        const T* g = self->grad.ptr();
        T* d = dx->ptr();
        for_each_s2d(xn->value.shape, r, [&](std::size_t s, std::size_t i) { d[s] += g[i]; });
      }
    };
  }
  return out;
}

template <typename T>
Var<T> depth_to_space(const Var<T>& x, int r) {
  require(x.value().rank() == 5, "depth_to_space: expects a volume");
  const int r3 = r * r * r;
  require(r > 0 && x.dim(1) % r3 == 0, "depth_to_space: channels must be divisible by r^3");
  Shape out_shape{x.dim(0), x.dim(1) / r3, x.dim(2) * r, x.dim(3) * r, x.dim(4) * r};
  Tensor<T> y(out_shape);
  const T* src = x.value().ptr();
  T* dst = y.ptr();
  for_each_s2d(out_shape, r, [&](std::size_t s, std::size_t i) { dst[s] = src[i]; });
  auto out = detail::make_result(std::move(y), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), r, out_shape] {
      if (auto* dx = grad_of(xn)) {
        const T* g = self->grad.ptr();
        T* d = dx->ptr();
        for_each_s2d(out_shape, r, [&](std::size_t s, std::size_t i) { d[i] += g[s]; });
      }
    };
  }
  return out;
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require(a.value().rank() >= 2 && a.value().rank() == b.value().rank(), "concat_channels: rank mismatch");
  require(a.dim(0) == b.dim(0) && a.value().inner(2) == b.value().inner(2), "concat_channels: shape mismatch " +
                                                                              shape_to_string(a.shape()) + " vs " +
                                                                              shape_to_string(b.shape()));
  const int batch = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t s = a.value().inner(2);
  Shape shape = a.shape();
  shape[1] = ca + cb;
  Tensor<T> y(shape);
  for (int n = 0; n < batch; ++n) {
    std::copy_n(a.value().ptr() + n * ca * s, ca * s, y.ptr() + n * (ca + cb) * s);
    std::copy_n(b.value().ptr() + n * cb * s, cb * s, y.ptr() + (n * (ca + cb) + ca) * s);
  }
  auto out = detail::make_result(std::move(y), {&a, &b});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), an = a.node(), bn = b.node(), batch, ca, cb, s] {
      auto* da = grad_of(an);
      auto* db = grad_of(bn);
      for (int n = 0; n < batch; ++n) {
        const T* g = self->grad.ptr() + n * (ca + cb) * s;
        if (da) simd::axpy<T>(ca * s, T{1}, g, da->ptr() + n * ca * s);
        if (db) simd::axpy<T>(cb * s, T{1}, g + ca * s, db->ptr() + n * cb * s);
      }
    };
  }
  return out;
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int begin, int end) {
  require(x.value().rank() >= 2 && 0 <= begin && begin < end && end <= x.dim(1), "slice_channels: bad range");
  const int batch = x.dim(0), c = x.dim(1), w = end - begin;
  const std::size_t s = x.value().inner(2);
  Shape shape = x.shape();
  shape[1] = w;
  Tensor<T> y(shape);
  for (int n = 0; n < batch; ++n) std::copy_n(x.value().ptr() + (n * c + begin) * s, w * s, y.ptr() + n * w * s);
  auto out = detail::make_result(std::move(y), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), batch, c, begin, w, s] {
      if (auto* dx = grad_of(xn))
        for (int n = 0; n < batch; ++n)
          simd::axpy<T>(w * s, T{1}, self->grad.ptr() + n * w * s, dx->ptr() + (n * c + begin) * s);
    };
  }
  return out;
}

namespace {
constexpr double kNormEps = 1e-5;
}

template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta) {
  require(x.value().rank() >= 3, "group_norm: expects (B, C, ...)");
  const int batch = x.dim(0), c = x.dim(1);
  require(groups > 0 && c % groups == 0, "group_norm: groups must divide channels");
  const std::size_t s = x.value().inner(2);
  const int cpg = c / groups;
  const std::size_t n = static_cast<std::size_t>(cpg) * s;
  std::vector<T> mean(batch * groups), inv(batch * groups);
  Tensor<T> y(x.shape());
  for (int b = 0; b < batch; ++b)
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + gi * cpg) * s;
      const T* src = x.value().ptr() + off;
      T m{0};
      for (std::size_t i = 0; i < n; ++i) m += src[i];
      m /= static_cast<T>(n);
      T v{0};
      for (std::size_t i = 0; i < n; ++i) v += (src[i] - m) * (src[i] - m);
      v /= static_cast<T>(n);
      const T iv = T{1} / std::sqrt(v + static_cast<T>(kNormEps));
      mean[b * groups + gi] = m;
      inv[b * groups + gi] = iv;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = gi * cpg + cc;
        const T ga = gamma.value()[ch], be = beta.value()[ch];
        for (std::size_t i = 0; i < s; ++i) {
          const std::size_t k = cc * s + i;
          y[off + k] = (src[k] - m) * iv * ga + be;
        }
      }
    }
  auto out = detail::make_result(std::move(y), {&x, &gamma, &beta});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), gn = gamma.node(), bn = beta.node(), batch, c,
                               groups, cpg, s, n, mean = std::move(mean), inv = std::move(inv)] {
      auto* dx = grad_of(xn);
      auto* dg = grad_of(gn);
      auto* dbeta = grad_of(bn);
      std::vector<T> xhat(n), dxhat(n);
      for (int b = 0; b < batch; ++b)
        for (int gi = 0; gi < groups; ++gi) {
          const std::size_t off = (static_cast<std::size_t>(b) * c + gi * cpg) * s;
          const T m = mean[b * groups + gi], iv = inv[b * groups + gi];
          const T* src = xn->value.ptr() + off;
          const T* gy = self->grad.ptr() + off;
          T m1{0}, m2{0};
          for (int cc = 0; cc < cpg; ++cc) {
            const int ch = gi * cpg + cc;
            const T ga = gn->value[ch];
            T sg{0}, sb{0};
            for (std::size_t i = 0; i < s; ++i) {
              const std::size_t k = cc * s + i;
              xhat[k] = (src[k] - m) * iv;
              dxhat[k] = gy[k] * ga;
              m1 += dxhat[k];
              m2 += dxhat[k] * xhat[k];
              sg += gy[k] * xhat[k];
              sb += gy[k];
            }
            if (dg) (*dg)[ch] += sg;
            if (dbeta) (*dbeta)[ch] += sb;
          }
          if (dx) {
            m1 /= static_cast<T>(n);
            m2 /= static_cast<T>(n);
            for (std::size_t k = 0; k < n; ++k) (*dx)[off + k] += iv * (dxhat[k] - m1 - xhat[k] * m2);
          }
        }
    };
  }
  return out;
}

template <typename T>
Var<T> film_channels(const Var<T>& x, const Var<T>& film) {
  const int batch = x.dim(0), c = x.dim(1);
  require(film.value().rank() == 2 && film.dim(0) == batch && film.dim(1) == 2 * c,
          "film_channels: film must be (B, 2C)");
  const std::size_t s = x.value().inner(2);
  Tensor<T> y(x.shape());
  for (int b = 0; b < batch; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const T sc = T{1} + film.value()[b * 2 * c + ch], sh = film.value()[b * 2 * c + c + ch];
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * s;
      for (std::size_t i = 0; i < s; ++i) y[off + i] = x.value()[off + i] * sc + sh;
    }
  auto out = detail::make_result(std::move(y), {&x, &film});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), fn = film.node(), batch, c, s] {
      auto* dx = grad_of(xn);
      auto* df = grad_of(fn);
      for (int b = 0; b < batch; ++b)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * s;
          const T* g = self->grad.ptr() + off;
          const T sc = T{1} + fn->value[b * 2 * c + ch];
          if (dx) simd::axpy<T>(s, sc, g, dx->ptr() + off);
          if (df) {
            T sx{0}, sg{0};
            for (std::size_t i = 0; i < s; ++i) {
              sx += g[i] * xn->value[off + i];
              sg += g[i];
            }
            (*df)[b * 2 * c + ch] += sx;
            (*df)[b * 2 * c + c + ch] += sg;
          }
        }
    };
  }
  return out;
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const int batch = x.dim(0), c = x.dim(1);
  const std::size_t s = x.value().inner(2);
  Tensor<T> y({batch, c});
  for (int i = 0; i < batch * c; ++i) {
    T acc{0};
    for (std::size_t k = 0; k < s; ++k) acc += x.value()[i * s + k];
    y[i] = acc / static_cast<T>(s);
  }
  auto out = detail::make_result(std::move(y), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), batch, c, s] {
      if (auto* dx = grad_of(xn))
        for (int i = 0; i < batch * c; ++i) {
          const T g = self->grad[i] / static_cast<T>(s);
          for (std::size_t k = 0; k < s; ++k) (*dx)[i * s + k] += g;
        }
    };
  }
  return out;
}

template <typename T>
Var<T> to_tokens(const Var<T>& x) {
  const int batch = x.dim(0), c = x.dim(1);
  const int s = static_cast<int>(x.value().inner(2));
  Tensor<T> y({batch, s, c});
  for (int b = 0; b < batch; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < s; ++i)
        y[(static_cast<std::size_t>(b) * s + i) * c + ch] = x.value()[(static_cast<std::size_t>(b) * c + ch) * s + i];
  auto out = detail::make_result(std::move(y), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), batch, c, s] {
      if (auto* dx = grad_of(xn))
        for (int b = 0; b < batch; ++b)
          for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < s; ++i)
              (*dx)[(static_cast<std::size_t>(b) * c + ch) * s + i] +=
                  self->grad[(static_cast<std::size_t>(b) * s + i) * c + ch];
    };
  }
  return out;
}

template <typename T>
Var<T> from_tokens(const Var<T>& x, const Shape& spatial) {
  require(x.value().rank() == 3, "from_tokens: expects (B, N, D)");
  const int batch = x.dim(0), s = x.dim(1), c = x.dim(2);
  require(shape_numel(spatial) == static_cast<std::size_t>(s), "from_tokens: spatial size mismatch");
  Shape shape{batch, c};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  Tensor<T> y(shape);
  for (int b = 0; b < batch; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < s; ++i)
        y[(static_cast<std::size_t>(b) * c + ch) * s + i] = x.value()[(static_cast<std::size_t>(b) * s + i) * c + ch];
  auto out = detail::make_result(std::move(y), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), batch, c, s] {
      if (auto* dx = grad_of(xn))
        for (int b = 0; b < batch; ++b)
          for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < s; ++i)
              (*dx)[(static_cast<std::size_t>(b) * s + i) * c + ch] +=
                  self->grad[(static_cast<std::size_t>(b) * c + ch) * s + i];
    };
  }
  return out;
}

// ------------------------------------------------------------------- rows

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const int din = weight.dim(1), dout = weight.dim(0);
  require(x.dim(-1) == din, "linear: expected last dim " + std::to_string(din) + ", got " +
                                shape_to_string(x.shape()));
  const int m = static_cast<int>(x.numel() / din);
  Shape shape = x.shape();
  shape.back() = dout;
  Tensor<T> y(shape);
  simd::gemm<T>(false, true, m, dout, din, x.value().ptr(), din, weight.value().ptr(), din, T{0}, y.ptr(), dout);
  if (bias.defined()) {
    for (int i = 0; i < m; ++i) simd::axpy<T>(dout, T{1}, bias.value().ptr(), y.ptr() + static_cast<std::size_t>(i) * dout);
  }
  auto out = detail::make_result(std::move(y), {&x, &weight, &bias});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), wn = weight.node(), bn = bias.node(), m, din,
                               dout] {
      const T* gy = self->grad.ptr();
      if (auto* dx = grad_of(xn))
        simd::gemm<T>(false, false, m, din, dout, gy, dout, wn->value.ptr(), din, T{1}, dx->ptr(), din);
      if (auto* dw = grad_of(wn))
        simd::gemm<T>(true, false, dout, din, m, gy, dout, xn->value.ptr(), din, T{1}, dw->ptr(), din);
      if (auto* db = grad_of(bn))
        for (int i = 0; i < m; ++i) simd::axpy<T>(dout, T{1}, gy + static_cast<std::size_t>(i) * dout, db->ptr());
    };
  }
  return out;
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  const int d = x.dim(-1);
  require(gamma.dim(0) == d && beta.dim(0) == d, "layer_norm: parameter width mismatch");
  const std::size_t rows = x.numel() / d;
  std::vector<T> inv(rows);
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.value().ptr() + r * d;
    T m{0};
    for (int i = 0; i < d; ++i) m += src[i];
    m /= static_cast<T>(d);
    T v{0};
    for (int i = 0; i < d; ++i) v += (src[i] - m) * (src[i] - m);
    v /= static_cast<T>(d);
    const T iv = T{1} / std::sqrt(v + static_cast<T>(kNormEps));
    inv[r] = iv;
    for (int i = 0; i < d; ++i) y[r * d + i] = (src[i] - m) * iv * gamma.value()[i] + beta.value()[i];
  }
  auto out = detail::make_result(std::move(y), {&x, &gamma, &beta});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), gn = gamma.node(), bn = beta.node(), rows, d,
                               inv = std::move(inv)] {
      auto* dx = grad_of(xn);
      auto* dg = grad_of(gn);
      auto* dbeta = grad_of(bn);
      std::vector<T> xhat(d), dxhat(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* src = xn->value.ptr() + r * d;
        const T* gy = self->grad.ptr() + r * d;
        T m{0};
        for (int i = 0; i < d; ++i) m += src[i];
        m /= static_cast<T>(d);
        T m1{0}, m2{0};
        for (int i = 0; i < d; ++i) {
          xhat[i] = (src[i] - m) * inv[r];
          dxhat[i] = gy[i] * gn->value[i];
          m1 += dxhat[i];
          m2 += dxhat[i] * xhat[i];
          if (dg) (*dg)[i] += gy[i] * xhat[i];
          if (dbeta) (*dbeta)[i] += gy[i];
        }
        if (dx) {
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          for (int i = 0; i < d; ++i) (*dx)[r * d + i] += inv[r] * (dxhat[i] - m1 - xhat[i] * m2);
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> film_tokens(const Var<T>& x, const Var<T>& film) {
  require(x.value().rank() == 3, "film_tokens: expects (B, N, D)");
  const int batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  require(film.value().rank() == 2 && film.dim(0) == batch && film.dim(1) == 2 * d,
          "film_tokens: film must be (B, 2D)");
  Tensor<T> y(x.shape());
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) {
        const std::size_t off = (static_cast<std::size_t>(b) * n + i) * d + k;
        y[off] = x.value()[off] * (T{1} + film.value()[b * 2 * d + k]) + film.value()[b * 2 * d + d + k];
      }
  auto out = detail::make_result(std::move(y), {&x, &film});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), fn = film.node(), batch, n, d] {
      auto* dx = grad_of(xn);
      auto* df = grad_of(fn);
      for (int b = 0; b < batch; ++b)
        for (int i = 0; i < n; ++i)
          for (int k = 0; k < d; ++k) {
            const std::size_t off = (static_cast<std::size_t>(b) * n + i) * d + k;
            const T g = self->grad[off];
            if (dx) (*dx)[off] += g * (T{1} + fn->value[b * 2 * d + k]);
            if (df) {
              (*df)[b * 2 * d + k] += g * xn->value[off];
              (*df)[b * 2 * d + d + k] += g;
            }
          }
    };
  }
  return out;
}

template <typename T>
Var<T> add_positional(const Var<T>& x, const Var<T>& pos) {
  require(x.value().rank() == 3 && pos.value().rank() == 2 && x.dim(1) == pos.dim(0) && x.dim(2) == pos.dim(1),
          "add_positional: expects x (B, N, D) and pos (N, D)");
  const int batch = x.dim(0);
  const std::size_t nd = pos.numel();
  Tensor<T> y(x.shape());
  for (int b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < nd; ++i) y[b * nd + i] = x.value()[b * nd + i] + pos.value()[i];
  auto out = detail::make_result(std::move(y), {&x, &pos});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), pn = pos.node(), batch, nd] {
      if (auto* dx = grad_of(xn)) simd::axpy<T>(self->grad.numel(), T{1}, self->grad.ptr(), dx->ptr());
      if (auto* dp = grad_of(pn))
        for (int b = 0; b < batch; ++b) simd::axpy<T>(nd, T{1}, self->grad.ptr() + b * nd, dp->ptr());
    };
  }
  return out;
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
  require(q.value().rank() == 3 && k.value().rank() == 3 && v.value().rank() == 3, "attention: expects rank-3 inputs");
  const int batch = q.dim(0), nq = q.dim(1), d = q.dim(2), nk = k.dim(1);
  require(k.dim(0) == batch && v.dim(0) == batch && k.dim(2) == d && v.dim(2) == d && v.dim(1) == nk,
          "attention: q/k/v shape mismatch");
  require(heads > 0 && d % heads == 0, "attention: heads must divide width");
  const int dh = d / heads;
  const T sc = T{1} / std::sqrt(static_cast<T>(dh));
  std::vector<T> probs(static_cast<std::size_t>(batch) * heads * nq * nk);
  Tensor<T> y(q.shape());
  for (int b = 0; b < batch; ++b)
    for (int h = 0; h < heads; ++h) {
      T* p = probs.data() + (static_cast<std::size_t>(b) * heads + h) * nq * nk;
      const T* qh = q.value().ptr() + static_cast<std::size_t>(b) * nq * d + h * dh;
      const T* kh = k.value().ptr() + static_cast<std::size_t>(b) * nk * d + h * dh;
      const T* vh = v.value().ptr() + static_cast<std::size_t>(b) * nk * d + h * dh;
      simd::gemm<T>(false, true, nq, nk, dh, qh, d, kh, d, T{0}, p, nk);
      for (std::size_t i = 0; i < static_cast<std::size_t>(nq) * nk; ++i) p[i] *= sc;
      simd::softmax_rows<T>(nq, nk, p);
      simd::gemm<T>(false, false, nq, dh, nk, p, nk, vh, d, T{0}, y.ptr() + static_cast<std::size_t>(b) * nq * d + h * dh, d);
    }
  auto out = detail::make_result(std::move(y), {&q, &k, &v});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), qn = q.node(), kn = k.node(), vn = v.node(), batch, heads, nq, nk,
                               d, dh, sc, probs = std::move(probs)] {
      auto* dq = grad_of(qn);
      auto* dk = grad_of(kn);
      auto* dv = grad_of(vn);
      std::vector<T> dp(static_cast<std::size_t>(nq) * nk);
      for (int b = 0; b < batch; ++b)
        for (int h = 0; h < heads; ++h) {
          const T* p = probs.data() + (static_cast<std::size_t>(b) * heads + h) * nq * nk;
          const std::size_t qoff = static_cast<std::size_t>(b) * nq * d + h * dh;
          const std::size_t koff = static_cast<std::size_t>(b) * nk * d + h * dh;
          const T* go = self->grad.ptr() + qoff;
          if (dv) simd::gemm<T>(true, false, nk, dh, nq, p, nk, go, d, T{1}, dv->ptr() + koff, d);
          if (!dq && !dk) continue;
          simd::gemm<T>(false, true, nq, nk, dh, go, d, vn->value.ptr() + koff, d, T{0}, dp.data(), nk);
          for (int i = 0; i < nq; ++i) {
            const T* pr = p + static_cast<std::size_t>(i) * nk;
            T* dr = dp.data() + static_cast<std::size_t>(i) * nk;
            T dotv{0};
            for (int j = 0; j < nk; ++j) dotv += dr[j] * pr[j];
            for (int j = 0; j < nk; ++j) dr[j] = pr[j] * (dr[j] - dotv) * sc;
          }
          if (dq) simd::gemm<T>(false, false, nq, dh, nk, dp.data(), nk, kn->value.ptr() + koff, d, T{1}, dq->ptr() + qoff, d);
          if (dk) simd::gemm<T>(true, false, nk, dh, nq, dp.data(), nk, qn->value.ptr() + qoff, d, T{1}, dk->ptr() + koff, d);
        }
    };
  }
  return out;
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids, int batch, int length) {
  const int vocab = table.dim(0), d = table.dim(1);
  require(ids.size() == static_cast<std::size_t>(batch) * length, "embedding: id count mismatch");
  std::vector<int> idv(ids.begin(), ids.end());
  Tensor<T> y({batch, length, d});
  for (std::size_t i = 0; i < idv.size(); ++i) {
    require(idv[i] >= 0 && idv[i] < vocab, "embedding: token id out of range");
    std::copy_n(table.value().ptr() + static_cast<std::size_t>(idv[i]) * d, d, y.ptr() + i * d);
  }
  auto out = detail::make_result(std::move(y), {&table});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), tn = table.node(), idv = std::move(idv), d] {
      if (auto* dt = grad_of(tn))
        for (std::size_t i = 0; i < idv.size(); ++i)
          simd::axpy<T>(d, T{1}, self->grad.ptr() + i * d, dt->ptr() + static_cast<std::size_t>(idv[i]) * d);
    };
  }
  return out;
}

// ------------------------------------------------------------- reductions

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  T s{0};
  for (T v : x.value().data) s += v;
  const T n = static_cast<T>(x.numel());
  auto out = detail::make_result(Tensor<T>({1}, s / n), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node(), n] {
      if (auto* dx = grad_of(xn)) {
        const T g = self->grad[0] / n;
        for (auto& v : dx->data) v += g;
      }
    };
  }
  return out;
}

template <typename T>
Var<T> sum_squares(const Var<T>& x) {
  T s{0};
  for (T v : x.value().data) s += v * v;
  auto out = detail::make_result(Tensor<T>({1}, s), {&x});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), xn = x.node()] {
      if (auto* dx = grad_of(xn)) simd::axpy<T>(dx->numel(), T{2} * self->grad[0], xn->value.ptr(), dx->ptr());
    };
  }
  return out;
}

template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred.shape(), target.shape, "mse_loss");
  T s{0};
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const T e = pred.value()[i] - target[i];
    s += e * e;
  }
  const T n = static_cast<T>(target.numel());
  auto out = detail::make_result(Tensor<T>({1}, s / n), {&pred});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), pn = pred.node(), target, n] {
      if (auto* dp = grad_of(pn)) {
        const T g = T{2} * self->grad[0] / n;
        for (std::size_t i = 0; i < target.numel(); ++i) (*dp)[i] += g * (pn->value[i] - target[i]);
      }
    };
  }
  return out;
}

template <typename T>
Var<T> l1_loss(const Var<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred.shape(), target.shape, "l1_loss");
  T s{0};
  for (std::size_t i = 0; i < target.numel(); ++i) s += std::abs(pred.value()[i] - target[i]);
  const T n = static_cast<T>(target.numel());
  auto out = detail::make_result(Tensor<T>({1}, s / n), {&pred});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), pn = pred.node(), target, n] {
      if (auto* dp = grad_of(pn)) {
        const T g = self->grad[0] / n;
        for (std::size_t i = 0; i < target.numel(); ++i) {
          const T e = pn->value[i] - target[i];
          (*dp)[i] += e > T{0} ? g : (e < T{0} ? -g : T{0});
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> kl_standard_normal(const Var<T>& mu, const Var<T>& logvar) {
  require_same_shape(mu.shape(), logvar.shape(), "kl_standard_normal");
  T s{0};
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    const T m = mu.value()[i], lv = logvar.value()[i];
    s += T{0.5} * (m * m + std::exp(lv) - T{1} - lv);
  }
  const T n = static_cast<T>(mu.numel());
  auto out = detail::make_result(Tensor<T>({1}, s / n), {&mu, &logvar});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), mn = mu.node(), ln = logvar.node(), n] {
      const T g = self->grad[0] / n;
      if (auto* dm = grad_of(mn))
        for (std::size_t i = 0; i < dm->numel(); ++i) (*dm)[i] += g * mn->value[i];
      if (auto* dl = grad_of(ln))
        for (std::size_t i = 0; i < dl->numel(); ++i) (*dl)[i] += g * T{0.5} * (std::exp(ln->value[i]) - T{1});
    };
  }
  return out;
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  require(logits.value().rank() == 2, "cross_entropy: logits must be (B, K)");
  const int batch = logits.dim(0), k = logits.dim(1);
  require(labels.size() == static_cast<std::size_t>(batch), "cross_entropy: label count mismatch");
  std::vector<T> probs(logits.value().data);
  simd::softmax_rows<T>(batch, k, probs.data());
  std::vector<int> lab(labels.begin(), labels.end());
  T s{0};
  for (int b = 0; b < batch; ++b) {
    require(lab[b] >= 0 && lab[b] < k, "cross_entropy: label out of range");
    s -= std::log(std::max(probs[static_cast<std::size_t>(b) * k + lab[b]], std::numeric_limits<T>::min()));
  }
  auto out = detail::make_result(Tensor<T>({1}, s / static_cast<T>(batch)), {&logits});
  if (out.requires_grad()) {
    out.node()->backward_fn = [self = out.node(), ln = logits.node(), probs = std::move(probs), lab = std::move(lab),
                               batch, k] {
      if (auto* dl = grad_of(ln)) {
        const T g = self->grad[0] / static_cast<T>(batch);
        for (int b = 0; b < batch; ++b)
          for (int j = 0; j < k; ++j) {
            const std::size_t i = static_cast<std::size_t>(b) * k + j;
            (*dl)[i] += g * (probs[i] - (j == lab[b] ? T{1} : T{0}));
          }
      }
    };
  }
  return out;
}

#define VSDF_INSTANTIATE_OPS(T)                                                              \
  template Var<T> add(const Var<T>&, const Var<T>&);                                         \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                         \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                         \
  template Var<T> scale(const Var<T>&, T);                                                   \
  template Var<T> silu(const Var<T>&);                                                       \
  template Var<T> scaled_tanh(const Var<T>&, T);                                             \
  template Var<T> exp(const Var<T>&);                                                        \
  template Var<T> clamp(const Var<T>&, T, T);                                                \
  template Var<T> reshape(const Var<T>&, Shape);                                             \
  template Var<T> conv3d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);             \
  template Var<T> avg_pool2(const Var<T>&);                                                  \
  template Var<T> upsample_nearest2(const Var<T>&);                                          \
  template Var<T> space_to_depth(const Var<T>&, int);                                        \
  template Var<T> depth_to_space(const Var<T>&, int);                                        \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                             \
  template Var<T> slice_channels(const Var<T>&, int, int);                                   \
  template Var<T> group_norm(const Var<T>&, int, const Var<T>&, const Var<T>&);              \
  template Var<T> film_channels(const Var<T>&, const Var<T>&);                               \
  template Var<T> global_avg_pool(const Var<T>&);                                            \
  template Var<T> to_tokens(const Var<T>&);                                                  \
  template Var<T> from_tokens(const Var<T>&, const Shape&);                                  \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                       \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&);                   \
  template Var<T> film_tokens(const Var<T>&, const Var<T>&);                                 \
  template Var<T> add_positional(const Var<T>&, const Var<T>&);                              \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int);               \
  template Var<T> embedding(const Var<T>&, std::span<const int>, int, int);                  \
  template Var<T> mean_all(const Var<T>&);                                                   \
  template Var<T> sum_squares(const Var<T>&);                                                \
  template Var<T> mse_loss(const Var<T>&, const Tensor<T>&);                                 \
  template Var<T> l1_loss(const Var<T>&, const Tensor<T>&);                                  \
  template Var<T> kl_standard_normal(const Var<T>&, const Var<T>&);                          \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>);

VSDF_INSTANTIATE_OPS(float)
VSDF_INSTANTIATE_OPS(double)

}  // namespace vsdf::nn
