#include <algorithm>
#include <cmath>

#include "dysp/tensor.hpp"
#include "tensor_impl.hpp"

namespace dysp {

namespace {

using detail::Node;

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, ho, wo;
  std::size_t cols() const { return c * kh * kw; }
  std::size_t sites() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const auto h = static_cast<std::ptrdiff_t>(g.h), w = static_cast<std::ptrdiff_t>(g.w);
  const auto pad = static_cast<std::ptrdiff_t>(g.pad), stride = static_cast<std::ptrdiff_t>(g.stride);
  const auto wo = static_cast<std::ptrdiff_t>(g.wo);
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((ch * g.kh + ky) * g.kw + kx) * g.sites();
        const auto off = static_cast<std::ptrdiff_t>(kx) - pad;
        // valid output columns satisfy 0 <= ox*stride + off < w
        const std::ptrdiff_t lo = std::min(wo, off >= 0 ? 0 : (-off + stride - 1) / stride);
        const std::ptrdiff_t hi = std::max(lo, std::min(wo, w - off > 0 ? (w - off + stride - 1) / stride : 0));
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          double* out = row + oy * g.wo;
          const auto iy = static_cast<std::ptrdiff_t>(oy) * stride + static_cast<std::ptrdiff_t>(ky) - pad;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::ptrdiff_t>(ch) * h + iy) * w + off;
          std::fill(out, out + lo, 0.0);
          if (stride == 1)
            std::copy(src + lo, src + hi, out + lo);
          else
            for (std::ptrdiff_t ox = lo; ox < hi; ++ox) out[ox] = src[ox * stride];
          std::fill(out + hi, out + wo, 0.0);
        }
      }
}

void col2im(const double* cols, const ConvGeometry& g, double* dx) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((ch * g.kh + ky) * g.kw + kx) * g.sites();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                row[oy * g.wo + ox];
          }
        }
      }
}

std::size_t output_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                          const char* what) {
  const std::size_t padded = in + 2 * pad;
  if (stride == 0 || padded < k || (padded - k) % stride != 0)
    throw GeometryError(std::string("conv2d: non-integral output ") + what + " for extent " +
                        std::to_string(in) + ", kernel " + std::to_string(k) + ", stride " +
                        std::to_string(stride) + ", pad " + std::to_string(pad));
  return (padded - k) / stride + 1;
}

// Aligned-corner source coordinates for one upsampled axis.
struct Tap {
  std::size_t i0, i1;
  double w1;
};

std::vector<Tap> upsample_taps(std::size_t in) {
  const std::size_t out = 2 * in;
  std::vector<Tap> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = in > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) /
                                    static_cast<double>(out - 1)
                              : 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    i0 = std::min(i0, in - 1);
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

// Per-thread im2col workspace; contents are fully overwritten before each use.
double* scratch(std::size_t size) {
  thread_local std::vector<double> buffer;
  if (buffer.size() < size) buffer.resize(size);
  return buffer.data();
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  if (x.dim(1) != w.dim(1))
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0)))
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " vs weight " +
                         shape_str(w.shape()));
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                 stride,   pad,      0,        0};
  g.ho = output_extent(g.h, g.kh, stride, pad, "height");
  g.wo = output_extent(g.w, g.kw, stride, pad, "width");

  std::vector<double> out(g.n * g.f * g.sites(), 0.0);
  double* cols = g.pointwise() ? nullptr : scratch(g.cols() * g.sites());
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* xn = xd + n * g.c * g.h * g.w;
    const double* src = xn;
    if (!g.pointwise()) {
      im2col(xn, g, cols);
      src = cols;
    }
    double* on = out.data() + n * g.f * g.sites();
    detail::gemm_nn(wd, src, on, g.f, g.cols(), g.sites());
    if (bias.defined()) {
      const auto bd = bias.data();
      for (std::size_t f = 0; f < g.f; ++f)
        for (std::size_t p = 0; p < g.sites(); ++p) on[f * g.sites() + p] += bd[f];
    }
  }

  std::vector<Tensor> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  const bool has_bias = bias.defined();
  return detail::make_result(
      {g.n, g.f, g.ho, g.wo}, std::move(out), std::move(parents),
      [g, has_bias](Node& self) {
        const bool gx = detail::wants_grad(self, 0), gw = detail::wants_grad(self, 1);
        const double* xd = detail::parent_data(self, 0).data();
        const double* wd = detail::parent_data(self, 1).data();
        double* cols = g.pointwise() ? nullptr : scratch(g.cols() * g.sites());
        std::vector<double> dcols(gx && !g.pointwise() ? g.cols() * g.sites() : 0);
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* dout = self.grad.data() + n * g.f * g.sites();
          const double* xn = xd + n * g.c * g.h * g.w;
          if (gw) {
            const double* src = xn;
            if (!g.pointwise()) {
              im2col(xn, g, cols);
              src = cols;
            }
            detail::gemm_nt(dout, src, detail::parent_grad(self, 1).data(), g.f, g.sites(), g.cols());
          }
          if (gx) {
            double* dxn = detail::parent_grad(self, 0).data() + n * g.c * g.h * g.w;
            if (g.pointwise()) {
              detail::gemm_tn(wd, dout, dxn, g.cols(), g.f, g.sites());
            } else {
              std::fill(dcols.begin(), dcols.end(), 0.0);
              detail::gemm_tn(wd, dout, dcols.data(), g.cols(), g.f, g.sites());
              col2im(dcols.data(), g, dxn);
            }
          }
          if (has_bias && detail::wants_grad(self, 2)) {
            auto& gb = detail::parent_grad(self, 2);
            for (std::size_t f = 0; f < g.f; ++f) {
              double acc = 0.0;
              for (std::size_t p = 0; p < g.sites(); ++p) acc += dout[f * g.sites() + p];
              gb[f] += acc;
            }
          }
        }
      },
      "conv2d");
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_rank(x, 4, "max_pool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel == 0 || stride == 0 || h < kernel || w < kernel)
    throw GeometryError("max_pool2d: kernel " + std::to_string(kernel) + " on " + shape_str(x.shape()));
  const std::size_t ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  std::vector<double> out(n * c * ho * wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto xd = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = base + oy * stride * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t i = base + (oy * stride + ky) * w + ox * stride + kx;
            if (xd[i] > xd[best]) best = i;
          }
        const std::size_t o = (plane * ho + oy) * wo + ox;
        out[o] = xd[best];
        (*argmax)[o] = best;
      }
  }
  return detail::make_result({n, c, ho, wo}, std::move(out), {x},
                             [argmax](Node& self) {
                               auto& gx = detail::parent_grad(self, 0);
                               for (std::size_t o = 0; o < argmax->size(); ++o)
                                 gx[(*argmax)[o]] += self.grad[o];
                             },
                             "max_pool2d");
}

Tensor bilinear_upsample2x(const Tensor& x) {
  require_rank(x, 4, "bilinear_upsample2x");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = upsample_taps(h), tx = upsample_taps(w);
  const std::size_t ho = 2 * h, wo = 2 * w;
  std::vector<double> out(n * c * ho * wo);
  const auto xd = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = xd.data() + plane * h * w;
    double* dst = out.data() + plane * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto& b = tx[ox];
        const double top = src[a.i0 * w + b.i0] * (1.0 - b.w1) + src[a.i0 * w + b.i1] * b.w1;
        const double bot = src[a.i1 * w + b.i0] * (1.0 - b.w1) + src[a.i1 * w + b.i1] * b.w1;
        dst[oy * wo + ox] = top * (1.0 - a.w1) + bot * a.w1;
      }
    }
  }
  return detail::make_result({n, c, ho, wo}, std::move(out), {x},
                             [n, c, h, w, ty, tx](Node& self) {
                               auto& gx = detail::parent_grad(self, 0);
                               const std::size_t ho = 2 * h, wo = 2 * w;
                               for (std::size_t plane = 0; plane < n * c; ++plane) {
                                 const double* g = self.grad.data() + plane * ho * wo;
                                 double* d = gx.data() + plane * h * w;
                                 for (std::size_t oy = 0; oy < ho; ++oy) {
                                   const auto& a = ty[oy];
                                   for (std::size_t ox = 0; ox < wo; ++ox) {
                                     const auto& b = tx[ox];
                                     const double v = g[oy * wo + ox];
                                     d[a.i0 * w + b.i0] += v * (1.0 - a.w1) * (1.0 - b.w1);
                                     d[a.i0 * w + b.i1] += v * (1.0 - a.w1) * b.w1;
                                     d[a.i1 * w + b.i0] += v * a.w1 * (1.0 - b.w1);
                                     d[a.i1 * w + b.i1] += v * a.w1 * b.w1;
                                   }
                                 }
                               }
                             },
                             "bilinear_upsample2x");
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                    bool training) {
  require_rank(x, 4, "batch_norm2d");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || state.running_mean.numel() != c ||
      state.running_var.numel() != c)
    throw DimensionError("batch_norm2d: parameters do not match " + shape_str(x.shape()));
  const std::size_t m = n * hw;
  const auto xd = x.data();
  const auto gd = gamma.data(), bd = beta.data();
  std::vector<double> mean(c), invstd(c);
  if (training) {
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) s += xd[(b * c + ch) * hw + p];
      const double mu = s / static_cast<double>(m);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          const double d = xd[(b * c + ch) * hw + p] - mu;
          v += d * d;
        }
      const double var = v / static_cast<double>(m);
      mean[ch] = mu;
      invstd[ch] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = m > 1 ? v / static_cast<double>(m - 1) : var;
      rm[ch] = state.momentum * rm[ch] + (1.0 - state.momentum) * mu;
      rv[ch] = state.momentum * rv[ch] + (1.0 - state.momentum) * unbiased;
    }
  } else {
    const auto rm = state.running_mean.data(), rv = state.running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = rm[ch];
      invstd[ch] = 1.0 / std::sqrt(rv[ch] + state.eps);
    }
  }

  std::vector<double> out(xd.size());
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t i = (b * c + ch) * hw + p;
        (*xhat)[i] = (xd[i] - mean[ch]) * invstd[ch];
        out[i] = gd[ch] * (*xhat)[i] + bd[ch];
      }

  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [n, c, hw, m, training, xhat, invstd](Node& self) {
        const auto& gd = detail::parent_data(self, 1);
        const auto& g = self.grad;
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) {
              const std::size_t i = (b * c + ch) * hw + p;
              sum_dy[ch] += g[i];
              sum_dy_xhat[ch] += g[i] * (*xhat)[i];
            }
        if (detail::wants_grad(self, 1)) {
          auto& gg = detail::parent_grad(self, 1);
          for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_dy_xhat[ch];
        }
        if (detail::wants_grad(self, 2)) {
          auto& gb = detail::parent_grad(self, 2);
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_dy[ch];
        }
        if (detail::wants_grad(self, 0)) {
          auto& gx = detail::parent_grad(self, 0);
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t i = (b * c + ch) * hw + p;
                if (training) {
                  gx[i] += gd[ch] * invstd[ch] *
                           (g[i] - inv_m * sum_dy[ch] - (*xhat)[i] * inv_m * sum_dy_xhat[ch]);
                } else {
                  gx[i] += gd[ch] * invstd[ch] * g[i];
                }
              }
        }
      },
      "batch_norm2d");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: affine parameters do not match " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  std::vector<double> out(xd.size());
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto invstd = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += row[i];
    const double mu = s / static_cast<double>(d);
    double v = 0.0;
    for (std::size_t i = 0; i < d; ++i) v += (row[i] - mu) * (row[i] - mu);
    const double is = 1.0 / std::sqrt(v / static_cast<double>(d) + eps);
    (*invstd)[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const double xh = (row[i] - mu) * is;
      (*xhat)[r * d + i] = xh;
      out[r * d + i] = gd[i] * xh + bd[i];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [rows, d, xhat, invstd](Node& self) {
        const auto& gd = detail::parent_data(self, 1);
        const auto& g = self.grad;
        const bool gx = detail::wants_grad(self, 0), gg = detail::wants_grad(self, 1),
                   gb = detail::wants_grad(self, 2);
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t i = 0; i < d; ++i) {
            const std::size_t k = r * d + i;
            dxhat[i] = g[k] * gd[i];
            s1 += dxhat[i];
            s2 += dxhat[i] * (*xhat)[k];
            if (gg) detail::parent_grad(self, 1)[i] += g[k] * (*xhat)[k];
            if (gb) detail::parent_grad(self, 2)[i] += g[k];
          }
          if (gx) {
            auto& dx = detail::parent_grad(self, 0);
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t i = 0; i < d; ++i) {
              const std::size_t k = r * d + i;
              dx[k] += (*invstd)[r] * (dxhat[i] - inv_d * s1 - (*xhat)[k] * inv_d * s2);
            }
          }
        }
      },
      "layer_norm");
}

Tensor multi_head_attention(const Tensor& x, const AttentionWeights& w, std::size_t heads,
                            Tensor* attention) {
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("multi_head_attention: expected [T,D] or [N,T,D], got " + shape_str(x.shape()));
  const bool batched = x.rank() == 3;
  const std::size_t n = batched ? x.dim(0) : 1;
  const std::size_t t = x.dim(batched ? 1 : 0);
  const std::size_t d = x.shape().back();
  if (heads == 0 || d % heads != 0)
    throw ConfigError("multi_head_attention: hidden size " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;

  const Tensor xb = reshape(x, {n, t, d});
  // [N,T,D] -> [N*h, T, dh]
  auto split_heads = [&](const Tensor& proj) {
    return reshape(permute(reshape(proj, {n, t, heads, dh}), {0, 2, 1, 3}), {n * heads, t, dh});
  };
  const Tensor q = split_heads(linear(xb, w.wq, w.bq));
  const Tensor k = split_heads(linear(xb, w.wk, w.bk));
  const Tensor v = split_heads(linear(xb, w.wv, w.bv));

  const Tensor scores = scale(bmm(q, transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(dh)));
  const Tensor weights = softmax(scores, 2);
  if (attention) *attention = weights;
  const Tensor ctx = bmm(weights, v);
  const Tensor merged = reshape(permute(reshape(ctx, {n, heads, t, dh}), {0, 2, 1, 3}), {n, t, d});
  const Tensor out = linear(merged, w.wo, w.bo);
  return batched ? out : reshape(out, {t, d});
}

}  // namespace dysp
