#include <algorithm>
#include <limits>

#include "psinet/autodiff.hpp"
#include "psinet/error.hpp"

namespace psinet::ad {

namespace {

struct ConvGeometry {
  std::size_t n, cin, h, w;
  std::size_t cout, k, stride, pad, groups;
  std::size_t oh, ow;

  std::size_t cin_g() const { return cin / groups; }
  std::size_t cout_g() const { return cout / groups; }
  std::size_t kdim() const { return cin_g() * k * k; }
  std::size_t plane() const { return oh * ow; }
  std::size_t cols() const { return n * plane(); }
};

// cols[kk, i*P + p] holds input tap kk = (ci, kh, kw) of output position p of
// sample i, for the channels of group `g`. Out-of-bounds taps stay zero.
void im2col(const ConvGeometry& geo, const float* x, std::size_t g, float* cols) {
  const std::size_t ncols = geo.cols();
  const std::size_t plane = geo.plane();
  std::fill(cols, cols + geo.kdim() * ncols, 0.0f);
  for (std::size_t c = 0; c < geo.cin_g(); ++c) {
    const std::size_t channel = g * geo.cin_g() + c;
    for (std::size_t kh = 0; kh < geo.k; ++kh) {
      for (std::size_t kw = 0; kw < geo.k; ++kw) {
        float* row = cols + ((c * geo.k + kh) * geo.k + kw) * ncols;
        for (std::size_t i = 0; i < geo.n; ++i) {
          const float* src = x + (i * geo.cin + channel) * geo.h * geo.w;
          float* dst = row + i * plane;
          for (std::size_t oy = 0; oy < geo.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride + kh) -
                                      static_cast<std::ptrdiff_t>(geo.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.h)) continue;
            for (std::size_t ox = 0; ox < geo.ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kw) -
                                        static_cast<std::ptrdiff_t>(geo.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(geo.w)) continue;
              dst[oy * geo.ow + ox] = src[iy * geo.w + ix];
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& geo, const float* cols, std::size_t g, float* dx) {
  const std::size_t ncols = geo.cols();
  const std::size_t plane = geo.plane();
  for (std::size_t c = 0; c < geo.cin_g(); ++c) {
    const std::size_t channel = g * geo.cin_g() + c;
    for (std::size_t kh = 0; kh < geo.k; ++kh) {
      for (std::size_t kw = 0; kw < geo.k; ++kw) {
        const float* row = cols + ((c * geo.k + kh) * geo.k + kw) * ncols;
        for (std::size_t i = 0; i < geo.n; ++i) {
          float* dst = dx + (i * geo.cin + channel) * geo.h * geo.w;
          const float* src = row + i * plane;
          for (std::size_t oy = 0; oy < geo.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride + kh) -
                                      static_cast<std::ptrdiff_t>(geo.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.h)) continue;
            for (std::size_t ox = 0; ox < geo.ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kw) -
                                        static_cast<std::ptrdiff_t>(geo.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(geo.w)) continue;
              dst[iy * geo.w + ix] += src[oy * geo.ow + ox];
            }
          }
        }
      }
    }
  }
}

// acc[r, :] += sum_kk a[r, kk] * b[kk, :] for `rows` rows of a (row stride
// lda). Rows are processed four at a time so each b row is read once per block;
// every output element still accumulates over kk in ascending order.
void gemm_rows(std::size_t rows, std::size_t kdim, std::size_t ncols, const float* a,
               std::size_t lda, std::size_t a_step, const float* b, float* acc) {
  std::size_t r = 0;
  for (; r + 4 <= rows; r += 4) {
    float* c0 = acc + r * ncols;
    float* c1 = c0 + ncols;
    float* c2 = c1 + ncols;
    float* c3 = c2 + ncols;
    for (std::size_t kk = 0; kk < kdim; ++kk) {
      const float w0 = a[r * lda + kk * a_step], w1 = a[(r + 1) * lda + kk * a_step];
      const float w2 = a[(r + 2) * lda + kk * a_step], w3 = a[(r + 3) * lda + kk * a_step];
      const float* brow = b + kk * ncols;
      for (std::size_t j = 0; j < ncols; ++j) {
        const float v = brow[j];
        c0[j] += w0 * v;
        c1[j] += w1 * v;
        c2[j] += w2 * v;
        c3[j] += w3 * v;
      }
    }
  }
  for (; r < rows; ++r) {
    float* c0 = acc + r * ncols;
    for (std::size_t kk = 0; kk < kdim; ++kk) {
      const float w0 = a[r * lda + kk * a_step];
      const float* brow = b + kk * ncols;
      for (std::size_t j = 0; j < ncols; ++j) c0[j] += w0 * brow[j];
    }
  }
}

// Dot product with eight fixed partial sums, combined in a fixed order, so the
// result does not depend on the vector width the compiler picks.
float dot(const float* x, const float* y, std::size_t n) {
  float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    for (std::size_t l = 0; l < 8; ++l) lane[l] += x[j + l] * y[j + l];
  }
  for (std::size_t l = 0; j < n; ++j, ++l) lane[l] += x[j] * y[j];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

}  // namespace

Variable conv2d(Tape& tape, const Variable& x, const Variable& weight,
                const Variable& bias, Conv2dOptions options) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4) {
    throw ShapeError("conv2d: expected NCHW input and [Cout,Cin/g,K,K] weight, got " +
                     shape_string(xs) + " and " + shape_string(ws));
  }
  if (options.groups == 0 || options.stride == 0) {
    throw ConfigError("conv2d: groups and stride must be positive");
  }
  ConvGeometry geo{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2],
                   options.stride, options.pad, options.groups, 0, 0};
  if (geo.cin % geo.groups != 0 || geo.cout % geo.groups != 0) {
    throw ConfigError("conv2d: channels in=" + std::to_string(geo.cin) + " out=" +
                      std::to_string(geo.cout) + " not divisible by groups=" +
                      std::to_string(geo.groups));
  }
  if (ws[1] != geo.cin_g() || ws[3] != geo.k) {
    throw ShapeError("conv2d: weight " + shape_string(ws) + " incompatible with input " +
                     shape_string(xs) + " and groups=" + std::to_string(geo.groups));
  }
  if (bias.defined() && bias.shape() != Shape{geo.cout}) {
    throw ShapeError("conv2d: bias " + shape_string(bias.shape()) + " for " +
                     std::to_string(geo.cout) + " output channels");
  }
  if (geo.h + 2 * geo.pad < geo.k || geo.w + 2 * geo.pad < geo.k) {
    throw ShapeError("conv2d: kernel " + std::to_string(geo.k) +
                     " larger than padded input " + shape_string(xs));
  }
  require_finite(x.value(), "conv2d");
  require_finite(weight.value(), "conv2d");
  if (bias.defined()) require_finite(bias.value(), "conv2d");
  geo.oh = (geo.h + 2 * geo.pad - geo.k) / geo.stride + 1;
  geo.ow = (geo.w + 2 * geo.pad - geo.k) / geo.stride + 1;

  const std::size_t ncols = geo.cols();
  const std::size_t plane = geo.plane();
  const std::size_t kdim = geo.kdim();
  std::vector<std::vector<float>> cols(geo.groups, std::vector<float>(kdim * ncols));
  std::vector<float> acc(geo.cout_g() * ncols);
  Tensor out({geo.n, geo.cout, geo.oh, geo.ow});
  const float* wv = weight.value().raw();

  for (std::size_t g = 0; g < geo.groups; ++g) {
    im2col(geo, x.value().raw(), g, cols[g].data());
    for (std::size_t co = 0; co < geo.cout_g(); ++co) {
      float* arow = acc.data() + co * ncols;
      std::fill(arow, arow + ncols, bias.defined() ? bias.value()[g * geo.cout_g() + co] : 0.0f);
    }
    gemm_rows(geo.cout_g(), kdim, ncols, wv + g * geo.cout_g() * kdim, kdim, 1, cols[g].data(),
              acc.data());
    for (std::size_t co = 0; co < geo.cout_g(); ++co) {
      const std::size_t oc = g * geo.cout_g() + co;
      const float* arow = acc.data() + co * ncols;
      for (std::size_t i = 0; i < geo.n; ++i) {
        std::copy(arow + i * plane, arow + (i + 1) * plane,
                  out.raw() + (i * geo.cout + oc) * plane);
      }
    }
  }

  Variable y(std::move(out), x.requires_grad() || weight.requires_grad() ||
                                 bias.requires_grad());
  if (!y.requires_grad()) return y;

  tape.record("conv2d", [xn = x.node(), wn = weight.node(),
                         bn = bias.defined() ? bias.node() : std::shared_ptr<Node>{},
                         yn = y.node(), geo, cols = std::move(cols)] {
    if (!yn->has_grad()) return;
    const std::size_t ncols = geo.cols();
    const std::size_t plane = geo.plane();
    const std::size_t kdim = geo.kdim();
    const float* gy = yn->grad.raw();
    std::vector<float> gt(geo.cout_g() * ncols);
    std::vector<float> dcols(xn->requires_grad ? kdim * ncols : 0);
    for (std::size_t g = 0; g < geo.groups; ++g) {
      for (std::size_t co = 0; co < geo.cout_g(); ++co) {
        const std::size_t oc = g * geo.cout_g() + co;
        for (std::size_t i = 0; i < geo.n; ++i) {
          std::copy(gy + (i * geo.cout + oc) * plane, gy + (i * geo.cout + oc + 1) * plane,
                    gt.data() + co * ncols + i * plane);
        }
      }
      if (bn && bn->requires_grad) {
        float* db = bn->grad_buffer().raw();
        for (std::size_t co = 0; co < geo.cout_g(); ++co) {
          float s = 0.0f;
          const float* grow = gt.data() + co * ncols;
          for (std::size_t j = 0; j < ncols; ++j) s += grow[j];
          db[g * geo.cout_g() + co] += s;
        }
      }
      if (wn->requires_grad) {
        float* dw = wn->grad_buffer().raw();
        for (std::size_t co = 0; co < geo.cout_g(); ++co) {
          const float* grow = gt.data() + co * ncols;
          float* drow = dw + (g * geo.cout_g() + co) * kdim;
          for (std::size_t kk = 0; kk < kdim; ++kk) {
            drow[kk] += dot(grow, cols[g].data() + kk * ncols, ncols);
          }
        }
      }
      if (xn->requires_grad) {
        std::fill(dcols.begin(), dcols.end(), 0.0f);
        // dcols = W_g^T * gt, accumulated over output channels in order.
        gemm_rows(kdim, geo.cout_g(), ncols, wn->value.raw() + g * geo.cout_g() * kdim, 1, kdim,
                  gt.data(), dcols.data());
        col2im_add(geo, dcols.data(), g, xn->grad_buffer().raw());
      }
    }
  });
  return y;
}

Variable maxpool2d(Tape& tape, const Variable& x, std::size_t kernel,
                   std::size_t stride) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) {
    throw ShapeError("maxpool2d: expected NCHW input, got " + shape_string(xs));
  }
  if (kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel) {
    throw ShapeError("maxpool2d: kernel " + std::to_string(kernel) +
                     " does not fit input " + shape_string(xs));
  }
  require_finite(x.value(), "maxpool2d");
  const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const std::size_t oh = (h - kernel) / stride + 1;
  const std::size_t ow = (w - kernel) / stride + 1;
  Tensor out({n, c, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  const float* xv = x.value().raw();
  for (std::size_t p = 0; p < n * c; ++p) {
    const float* src = xv + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        std::size_t best_at = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t at = (oy * stride + ky) * w + ox * stride + kx;
            if (src[at] > best) {
              best = src[at];
              best_at = at;
            }
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = best;
        argmax[o] = p * h * w + best_at;
      }
    }
  }
  Variable y(std::move(out), x.requires_grad());
  if (y.requires_grad()) {
    tape.record("maxpool2d", [xn = x.node(), yn = y.node(), argmax = std::move(argmax)] {
      if (!yn->has_grad()) return;
      const float* g = yn->grad.raw();
      float* d = xn->grad_buffer().raw();
      for (std::size_t o = 0; o < argmax.size(); ++o) d[argmax[o]] += g[o];
    });
  }
  return y;
}

}  // namespace psinet::ad
