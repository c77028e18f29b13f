#include <cblas.h>

#include <cstring>
#include <stdexcept>
#include <vector>

#include "mmtvae/tensor.hpp"
#include "node_internal.hpp"

// im2col + dgemm convolution. Every output element is a serial dot product
// inside BLAS with a fixed order, so results are reproducible run to run.

extern "C" void openblas_set_num_threads(int);

namespace mmtvae {

namespace {

using detail::make_node;

struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit blas_init;

struct ConvDims {
  std::int64_t n, c, h, w;   // input
  std::int64_t o, k;         // filters
  std::int64_t ho, wo;       // output
  int stride, pad;
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, int stride, int pad) {
  if (xs.size() != 4) throw std::invalid_argument("conv2d: input must be NCHW");
  if (ws.size() != 4) throw std::invalid_argument("conv2d: weight must be (out,in,k,k)");
  if (ws[2] != ws[3]) throw std::invalid_argument("conv2d: kernel must be square");
  if (xs[1] != ws[1])
    throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(xs) +
                                " vs weight " + shape_str(ws));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
  ConvDims d;
  d.n = xs[0];
  d.c = xs[1];
  d.h = xs[2];
  d.w = xs[3];
  d.o = ws[0];
  d.k = ws[2];
  d.stride = stride;
  d.pad = pad;
  d.ho = (d.h + 2 * pad - d.k) / stride + 1;
  d.wo = (d.w + 2 * pad - d.k) / stride + 1;
  if (d.h + 2 * pad < d.k || d.w + 2 * pad < d.k || d.ho <= 0 || d.wo <= 0)
    throw std::invalid_argument("conv2d: non-positive output size for input " + shape_str(xs) +
                                " kernel " + std::to_string(d.k));
  return d;
}

// Writes one sample's patch matrix into a wider (c*k*k) x pitch buffer at
// column offset `base`; row r of the sample occupies [base, base + ho*wo)
// of buffer row r. Stacking samples side by side this way turns the whole
// group into a single GEMM.
void im2col(const double* x, const ConvDims& d, double* col, std::int64_t pitch) {
  for (std::int64_t c = 0; c < d.c; ++c) {
    for (std::int64_t kh = 0; kh < d.k; ++kh) {
      for (std::int64_t kw = 0; kw < d.k; ++kw) {
        double* row = col + ((c * d.k + kh) * d.k + kw) * pitch;
        for (std::int64_t oh = 0; oh < d.ho; ++oh) {
          const std::int64_t ih = oh * d.stride + kh - d.pad;
          double* out = row + oh * d.wo;
          if (ih < 0 || ih >= d.h) {
            std::memset(out, 0, sizeof(double) * d.wo);
            continue;
          }
          const double* xr = x + (c * d.h + ih) * d.w;
          if (d.stride == 1) {
            const std::int64_t off = kw - d.pad;
            std::int64_t lo = std::max<std::int64_t>(0, -off);
            std::int64_t hi = std::min<std::int64_t>(d.wo, d.w - off);
            if (hi < lo) hi = lo;
            std::memset(out, 0, sizeof(double) * lo);
            std::memcpy(out + lo, xr + lo + off, sizeof(double) * (hi - lo));
            std::memset(out + hi, 0, sizeof(double) * (d.wo - hi));
          } else {
            for (std::int64_t ow = 0; ow < d.wo; ++ow) {
              const std::int64_t iw = ow * d.stride + kw - d.pad;
              out[ow] = (iw >= 0 && iw < d.w) ? xr[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

// Scatter-add of one sample's columns (at the given row pitch) back onto its
// input grid.
void col2im_add(const double* col, const ConvDims& d, double* x, std::int64_t pitch) {
  for (std::int64_t c = 0; c < d.c; ++c) {
    for (std::int64_t kh = 0; kh < d.k; ++kh) {
      for (std::int64_t kw = 0; kw < d.k; ++kw) {
        const double* row = col + ((c * d.k + kh) * d.k + kw) * pitch;
        for (std::int64_t oh = 0; oh < d.ho; ++oh) {
          const std::int64_t ih = oh * d.stride + kh - d.pad;
          if (ih < 0 || ih >= d.h) continue;
          double* xr = x + (c * d.h + ih) * d.w;
          const double* in = row + oh * d.wo;
          if (d.stride == 1) {
            const std::int64_t off = kw - d.pad;
            std::int64_t lo = std::max<std::int64_t>(0, -off);
            std::int64_t hi = std::min<std::int64_t>(d.wo, d.w - off);
            for (std::int64_t ow = lo; ow < hi; ++ow) xr[ow + off] += in[ow];
          } else {
            for (std::int64_t ow = 0; ow < d.wo; ++ow) {
              const std::int64_t iw = ow * d.stride + kw - d.pad;
              if (iw >= 0 && iw < d.w) xr[iw] += in[ow];
            }
          }
        }
      }
    }
  }
}

std::vector<double>& scratch(std::size_t which, std::size_t n) {
  thread_local std::vector<double> bufs[3];
  auto& b = bufs[which];
  if (b.size() < n) b.resize(n);
  return b;
}

// Samples per GEMM group, capped so neither the patch matrix (q rows) nor
// the output block (o rows) outgrows ~64 MB of scratch.
std::int64_t group_samples(const ConvDims& d, std::int64_t q, std::int64_t p) {
  const std::int64_t budget = 256 * 1024;  // doubles; keeps group buffers ~L2-sized
  const std::int64_t by_col = budget / std::max<std::int64_t>(1, q * p);
  const std::int64_t by_out = budget / std::max<std::int64_t>(1, d.o * p);
  return std::max<std::int64_t>(1, std::min({d.n, by_col, by_out}));
}

// (n, o, p) slab -> (o, gn*p) block for samples [n0, n0+gn).
void pack_rows(const double* src, std::int64_t n0, std::int64_t gn, std::int64_t o,
               std::int64_t p, double* dst) {
  for (std::int64_t n = 0; n < gn; ++n)
    for (std::int64_t c = 0; c < o; ++c)
      std::memcpy(dst + c * gn * p + n * p, src + ((n0 + n) * o + c) * p, sizeof(double) * p);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  auto xn = x.node_ptr();
  auto wn = w.node_ptr();
  const ConvDims d = conv_dims(xn->shape, wn->shape, stride, pad);
  const std::int64_t q = d.c * d.k * d.k;
  const std::int64_t p = d.ho * d.wo;

  const std::int64_t gn = group_samples(d, q, p);

  // Samples are processed in groups: their patch matrices sit side by side in
  // one wide buffer so each group costs a single GEMM instead of n small ones.
  std::vector<double> out(static_cast<std::size_t>(d.n * d.o * p));
  auto& col = scratch(0, static_cast<std::size_t>(q * gn * p));
  auto& ybuf = scratch(1, static_cast<std::size_t>(d.o * gn * p));
  for (std::int64_t n0 = 0; n0 < d.n; n0 += gn) {
    const std::int64_t g = std::min(gn, d.n - n0);
    for (std::int64_t n = 0; n < g; ++n)
      im2col(xn->value.data() + (n0 + n) * d.c * d.h * d.w, d, col.data() + n * p, g * p);
    // ybuf (o x g*p) = w (o x q) . col (q x g*p)
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(d.o),
                static_cast<int>(g * p), static_cast<int>(q), 1.0, wn->value.data(),
                static_cast<int>(q), col.data(), static_cast<int>(g * p), 0.0, ybuf.data(),
                static_cast<int>(g * p));
    for (std::int64_t n = 0; n < g; ++n)
      for (std::int64_t c = 0; c < d.o; ++c)
        std::memcpy(out.data() + ((n0 + n) * d.o + c) * p, ybuf.data() + c * g * p + n * p,
                    sizeof(double) * p);
  }

  return make_node(
      OpKind::conv2d, {d.n, d.o, d.ho, d.wo}, std::move(out), {xn, wn},
      [xn, wn, d, q, p, gn](TensorNode& self) {
        const double* gy = self.grad.data();
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (!xn->requires_grad && !wn->requires_grad) return;
        auto& gybuf = scratch(0, static_cast<std::size_t>(d.o * gn * p));
        auto& colbuf = scratch(1, static_cast<std::size_t>(q * gn * p));
        auto& gcol = scratch(2, static_cast<std::size_t>(q * gn * p));
        for (std::int64_t n0 = 0; n0 < d.n; n0 += gn) {
          const std::int64_t g = std::min(gn, d.n - n0);
          pack_rows(gy, n0, g, d.o, p, gybuf.data());
          if (xn->requires_grad) {
            // gcol (q x g*p) = w^T (q x o) . gy (o x g*p)
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(q),
                        static_cast<int>(g * p), static_cast<int>(d.o), 1.0, wn->value.data(),
                        static_cast<int>(q), gybuf.data(), static_cast<int>(g * p), 0.0,
                        gcol.data(), static_cast<int>(g * p));
            for (std::int64_t n = 0; n < g; ++n)
              col2im_add(gcol.data() + n * p, d, xn->grad.data() + (n0 + n) * d.c * d.h * d.w,
                         g * p);
          }
          if (wn->requires_grad) {
            for (std::int64_t n = 0; n < g; ++n)
              im2col(xn->value.data() + (n0 + n) * d.c * d.h * d.w, d, colbuf.data() + n * p,
                     g * p);
            // gw (o x q) += gy (o x g*p) . col^T (g*p x q)
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(d.o),
                        static_cast<int>(q), static_cast<int>(g * p), 1.0, gybuf.data(),
                        static_cast<int>(g * p), colbuf.data(), static_cast<int>(g * p), 1.0,
                        wn->grad.data(), static_cast<int>(q));
          }
        }
      });
}

Tensor avg_pool2(const Tensor& x) {
  auto xn = x.node_ptr();
  const Shape& s = xn->shape;
  if (s.size() != 4) throw std::invalid_argument("avg_pool2: input must be NCHW");
  if (s[2] % 2 != 0 || s[3] % 2 != 0)
    throw std::invalid_argument("avg_pool2: spatial extents must be even, got " + shape_str(s));
  const std::int64_t nc = s[0] * s[1], h = s[2], w = s[3], ho = h / 2, wo = w / 2;
  std::vector<double> out(static_cast<std::size_t>(nc * ho * wo));
  const double* px = xn->value.data();
  for (std::int64_t i = 0; i < nc; ++i) {
    const double* plane = px + i * h * w;
    double* op = out.data() + i * ho * wo;
    for (std::int64_t oh = 0; oh < ho; ++oh) {
      const double* r0 = plane + 2 * oh * w;
      const double* r1 = r0 + w;
      for (std::int64_t ow = 0; ow < wo; ++ow)
        op[oh * wo + ow] = 0.25 * (r0[2 * ow] + r0[2 * ow + 1] + r1[2 * ow] + r1[2 * ow + 1]);
    }
  }
  return make_node(OpKind::avg_pool2, {s[0], s[1], ho, wo}, std::move(out), {xn},
                   [xn, nc, h, w, ho, wo](TensorNode& self) {
                     if (!xn->requires_grad) return;
                     xn->ensure_grad();
                     const double* g = self.grad.data();
                     double* gx = xn->grad.data();
                     for (std::int64_t i = 0; i < nc; ++i) {
                       const double* gp = g + i * ho * wo;
                       double* plane = gx + i * h * w;
                       for (std::int64_t oh = 0; oh < ho; ++oh)
                         for (std::int64_t ow = 0; ow < wo; ++ow) {
                           const double v = 0.25 * gp[oh * wo + ow];
                           plane[(2 * oh) * w + 2 * ow] += v;
                           plane[(2 * oh) * w + 2 * ow + 1] += v;
                           plane[(2 * oh + 1) * w + 2 * ow] += v;
                           plane[(2 * oh + 1) * w + 2 * ow + 1] += v;
                         }
                     }
                   });
}

Tensor nearest_upsample2(const Tensor& x) {
  auto xn = x.node_ptr();
  const Shape& s = xn->shape;
  if (s.size() != 4) throw std::invalid_argument("nearest_upsample2: input must be NCHW");
  const std::int64_t nc = s[0] * s[1], h = s[2], w = s[3], ho = h * 2, wo = w * 2;
  std::vector<double> out(static_cast<std::size_t>(nc * ho * wo));
  const double* px = xn->value.data();
  for (std::int64_t i = 0; i < nc; ++i) {
    const double* plane = px + i * h * w;
    double* op = out.data() + i * ho * wo;
    for (std::int64_t ih = 0; ih < h; ++ih)
      for (std::int64_t iw = 0; iw < w; ++iw) {
        const double v = plane[ih * w + iw];
        double* o0 = op + (2 * ih) * wo + 2 * iw;
        o0[0] = v;
        o0[1] = v;
        o0[wo] = v;
        o0[wo + 1] = v;
      }
  }
  return make_node(OpKind::nearest_upsample2, {s[0], s[1], ho, wo}, std::move(out), {xn},
                   [xn, nc, h, w, wo](TensorNode& self) {
                     if (!xn->requires_grad) return;
                     xn->ensure_grad();
                     const double* g = self.grad.data();
                     double* gx = xn->grad.data();
                     const std::int64_t ho2 = 2 * h;
                     for (std::int64_t i = 0; i < nc; ++i) {
                       const double* gp = g + i * ho2 * wo;
                       double* plane = gx + i * h * w;
                       for (std::int64_t ih = 0; ih < h; ++ih)
                         for (std::int64_t iw = 0; iw < w; ++iw) {
                           const double* g0 = gp + (2 * ih) * wo + 2 * iw;
                           plane[ih * w + iw] += g0[0] + g0[1] + g0[wo] + g0[wo + 1];
                         }
                     }
                   });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  const Shape& sa = an->shape;
  const Shape& sb = bn->shape;
  if (sa.size() != 4 || sb.size() != 4)
    throw std::invalid_argument("concat_channels: inputs must be NCHW");
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw std::invalid_argument("concat_channels: batch/spatial mismatch " + shape_str(sa) +
                                " vs " + shape_str(sb));
  const std::int64_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
  std::vector<double> out(static_cast<std::size_t>(n * (ca + cb) * hw));
  for (std::int64_t i = 0; i < n; ++i) {
    double* dst = out.data() + i * (ca + cb) * hw;
    std::memcpy(dst, an->value.data() + i * ca * hw, sizeof(double) * ca * hw);
    std::memcpy(dst + ca * hw, bn->value.data() + i * cb * hw, sizeof(double) * cb * hw);
  }
  return make_node(OpKind::concat_channels, {n, ca + cb, sa[2], sa[3]}, std::move(out), {an, bn},
                   [an, bn, n, ca, cb, hw](TensorNode& self) {
                     const double* g = self.grad.data();
                     if (an->requires_grad) {
                       an->ensure_grad();
                       for (std::int64_t i = 0; i < n; ++i) {
                         const double* src = g + i * (ca + cb) * hw;
                         double* dst = an->grad.data() + i * ca * hw;
                         for (std::int64_t j = 0; j < ca * hw; ++j) dst[j] += src[j];
                       }
                     }
                     if (bn->requires_grad) {
                       bn->ensure_grad();
                       for (std::int64_t i = 0; i < n; ++i) {
                         const double* src = g + i * (ca + cb) * hw + ca * hw;
                         double* dst = bn->grad.data() + i * cb * hw;
                         for (std::int64_t j = 0; j < cb * hw; ++j) dst[j] += src[j];
                       }
                     }
                   });
}

Tensor slice_channels(const Tensor& x, std::int64_t begin, std::int64_t end) {
  auto xn = x.node_ptr();
  const Shape& s = xn->shape;
  if (s.size() != 4) throw std::invalid_argument("slice_channels: input must be NCHW");
  if (begin < 0 || end < begin || end > s[1])
    throw std::invalid_argument("slice_channels: range [" + std::to_string(begin) + "," +
                                std::to_string(end) + ") out of bounds for " + shape_str(s));
  const std::int64_t n = s[0], c = s[1], cs = end - begin, hw = s[2] * s[3];
  std::vector<double> out(static_cast<std::size_t>(n * cs * hw));
  for (std::int64_t i = 0; i < n; ++i)
    std::memcpy(out.data() + i * cs * hw, xn->value.data() + (i * c + begin) * hw,
                sizeof(double) * cs * hw);
  return make_node(OpKind::slice_channels, {n, cs, s[2], s[3]}, std::move(out), {xn},
                   [xn, n, c, cs, hw, begin](TensorNode& self) {
                     if (!xn->requires_grad) return;
                     xn->ensure_grad();
                     const double* g = self.grad.data();
                     for (std::int64_t i = 0; i < n; ++i) {
                       const double* src = g + i * cs * hw;
                       double* dst = xn->grad.data() + (i * c + begin) * hw;
                       for (std::int64_t j = 0; j < cs * hw; ++j) dst[j] += src[j];
                     }
                   });
}

}  // namespace mmtvae
