#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "dcama/tensor.hpp"

namespace dcama {

namespace detail {

template <class T>
void require_rank(const BasicTensor<T>& t, int r, const char* op) {
  if (t.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
}

}  // namespace detail

// ---- matrix products -------------------------------------------------------

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  BasicTensor<T> out({m, n});
  const T* A = a.data();
  const T* B = b.data();
  T* O = out.data();
  for (int i = 0; i < m; ++i) {
    T* orow = O + static_cast<std::size_t>(i) * n;
    const T* arow = A + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  ensure_finite(out, "matmul");
  return out;
}

// matmul with double-precision accumulators; used where summation-order
// robustness matters (attention mask aggregation).
template <class T>
BasicTensor<T> matmul_acc64(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank(a, 2, "matmul_acc64");
  detail::require_rank(b, 2, "matmul_acc64");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul_acc64 inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  BasicTensor<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    const T* arow = a.data() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p)
        acc += static_cast<double>(arow[p]) * b[static_cast<std::size_t>(p) * n + j];
      out.at(i, j) = static_cast<T>(acc);
    }
  }
  ensure_finite(out, "matmul_acc64");
  return out;
}

// a[m,k] * b[n,k]^T -> [m,n]
template <class T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  BasicTensor<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    const T* arow = a.data() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const T* brow = b.data() + static_cast<std::size_t>(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out.at(i, j) = acc;
    }
  }
  ensure_finite(out, "matmul_nt");
  return out;
}

// a[k,m]^T * b[k,n] -> [m,n]
template <class T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank(a, 2, "matmul_tn");
  detail::require_rank(b, 2, "matmul_tn");
  const int k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul_tn inner dimensions differ: " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  BasicTensor<T> out({m, n});
  T* O = out.data();
  for (int p = 0; p < k; ++p) {
    const T* arow = a.data() + static_cast<std::size_t>(p) * m;
    const T* brow = b.data() + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      T* orow = O + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  ensure_finite(out, "matmul_tn");
  return out;
}

// ---- softmax ---------------------------------------------------------------

// Row-wise softmax with row-max subtraction. Row sums are accumulated in
// double so each output row sums to 1 within ~1e-7 even in float mode.
template <class T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  detail::require_rank(x, 2, "softmax_rows");
  const int m = x.dim(0), n = x.dim(1);
  if (n < 1) throw DimensionError("softmax_rows: empty rows");
  BasicTensor<T> out(x.shape());
  for (int i = 0; i < m; ++i) {
    const T* row = x.data() + static_cast<std::size_t>(i) * n;
    T* orow = out.data() + static_cast<std::size_t>(i) * n;
    T mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(static_cast<double>(row[j] - mx));
      orow[j] = static_cast<T>(e);
      denom += e;
    }
    for (int j = 0; j < n; ++j) orow[j] = static_cast<T>(static_cast<double>(orow[j]) / denom);
  }
  ensure_finite(out, "softmax_rows");
  return out;
}

// dL/dx given y = softmax_rows(x) and gy = dL/dy.
template <class T>
BasicTensor<T> softmax_rows_backward(const BasicTensor<T>& y, const BasicTensor<T>& gy) {
  const int m = y.dim(0), n = y.dim(1);
  BasicTensor<T> gx(y.shape());
  for (int i = 0; i < m; ++i) {
    const T* yr = y.data() + static_cast<std::size_t>(i) * n;
    const T* gr = gy.data() + static_cast<std::size_t>(i) * n;
    T* xr = gx.data() + static_cast<std::size_t>(i) * n;
    double dot = 0.0;
    for (int j = 0; j < n; ++j) dot += static_cast<double>(gr[j]) * yr[j];
    for (int j = 0; j < n; ++j)
      xr[j] = static_cast<T>(yr[j] * (static_cast<double>(gr[j]) - dot));
  }
  return gx;
}

// ---- elementwise -----------------------------------------------------------

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (!a.same_shape(b))
    throw DimensionError("add shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  BasicTensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  ensure_finite(out, "add");
  return out;
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (!a.same_shape(b))
    throw DimensionError("mul shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  BasicTensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  ensure_finite(out, "mul");
  return out;
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  BasicTensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  ensure_finite(out, "scale");
  return out;
}

// x[m,n] + bias[n], broadcast over rows
template <class T>
BasicTensor<T> add_rowvec(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  detail::require_rank(x, 2, "add_rowvec");
  if (bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw DimensionError("add_rowvec: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  BasicTensor<T> out(x.shape());
  const int m = x.dim(0), n = x.dim(1);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) + bias[j];
  ensure_finite(out, "add_rowvec");
  return out;
}

// ---- concat / slice along the last axis ------------------------------------

template <class T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>> xs) {
  if (xs.empty()) throw DimensionError("concat_channels: empty input list");
  const Shape& s0 = xs[0].shape();
  int total = 0;
  for (const auto& x : xs) {
    if (x.rank() != xs[0].rank())
      throw DimensionError("concat_channels: mixed ranks");
    for (int d = 0; d + 1 < x.rank(); ++d)
      if (x.dim(d) != xs[0].dim(d))
        throw DimensionError("concat_channels: leading dims differ: " + shape_str(x.shape()) +
                             " vs " + shape_str(s0));
    total += x.dim(x.rank() - 1);
  }
  Shape out_shape = s0;
  out_shape.back() = total;
  BasicTensor<T> out(out_shape);
  std::int64_t rows = 1;
  for (int d = 0; d + 1 < static_cast<int>(s0.size()); ++d) rows *= s0[static_cast<std::size_t>(d)];
  std::int64_t off = 0;
  for (const auto& x : xs) {
    const int c = x.dim(x.rank() - 1);
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy_n(x.data() + r * c, c, out.data() + r * total + off);
    off += c;
  }
  return out;
}

template <class T>
BasicTensor<T> concat_channels(std::initializer_list<BasicTensor<T>> xs) {
  std::vector<BasicTensor<T>> v(xs);
  return concat_channels(std::span<const BasicTensor<T>>(v));
}

template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, int begin, int count) {
  const int c = x.dim(x.rank() - 1);
  if (begin < 0 || count < 1 || begin + count > c)
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") out of " + std::to_string(c));
  Shape out_shape = x.shape();
  out_shape.back() = count;
  BasicTensor<T> out(out_shape);
  std::int64_t rows = x.numel() / c;
  for (std::int64_t r = 0; r < rows; ++r)
    std::copy_n(x.data() + r * c + begin, count, out.data() + r * count);
  return out;
}

// ---- reductions / set ops ---------------------------------------------------

template <class T>
BasicTensor<T> max_over_set(std::span<const BasicTensor<T>> xs) {
  if (xs.empty()) throw DimensionError("max_over_set: empty input list");
  BasicTensor<T> out = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (!xs[i].same_shape(out))
      throw DimensionError("max_over_set: shape mismatch at element " + std::to_string(i));
    for (std::int64_t j = 0; j < out.numel(); ++j) out[j] = std::max(out[j], xs[i][j]);
  }
  return out;
}

template <class T>
BasicTensor<T> sum_to_scalar(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(x[i]);
  BasicTensor<T> out = BasicTensor<T>::scalar(static_cast<T>(acc));
  ensure_finite(out, "sum");
  return out;
}

// [h,w,c] -> [h,w]  (sum along the channel axis)
template <class T>
BasicTensor<T> sum_channels(const BasicTensor<T>& x) {
  detail::require_rank(x, 3, "sum_channels");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  BasicTensor<T> out({h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double acc = 0.0;
      for (int k = 0; k < c; ++k) acc += static_cast<double>(x.at(i, j, k));
      out.at(i, j) = static_cast<T>(acc);
    }
  return out;
}

// ---- conv2d ------------------------------------------------------------------

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
  const int span = in + 2 * pad - kernel;
  if (span < 0) return -1;
  return span / stride + 1;
}

namespace detail {

// x[h,w,cin] -> cols[oh*ow, kh*kw*cin]
template <class T>
BasicTensor<T> im2col(const BasicTensor<T>& x, int kh, int kw, int stride, int pad, int oh,
                      int ow) {
  const int h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  BasicTensor<T> cols({oh * ow, kh * kw * cin});
  T* out = cols.data();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      T* row = out + (static_cast<std::size_t>(oy) * ow + ox) * (kh * kw * cin);
      for (int ky = 0; ky < kh; ++ky) {
        const int sy = oy * stride + ky - pad;
        for (int kx = 0; kx < kw; ++kx) {
          const int sx = ox * stride + kx - pad;
          T* dst = row + (static_cast<std::size_t>(ky) * kw + kx) * cin;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w)
            std::copy_n(&x.at(sy, sx, 0), cin, dst);
          else
            std::fill_n(dst, cin, T(0));
        }
      }
    }
  }
  return cols;
}

// scatter-add of cols into an [h,w,cin] gradient
template <class T>
void col2im_add(const BasicTensor<T>& cols, int kh, int kw, int stride, int pad, int oh, int ow,
                BasicTensor<T>& gx) {
  const int h = gx.dim(0), w = gx.dim(1), cin = gx.dim(2);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const T* row = cols.data() + (static_cast<std::size_t>(oy) * ow + ox) * (kh * kw * cin);
      for (int ky = 0; ky < kh; ++ky) {
        const int sy = oy * stride + ky - pad;
        if (sy < 0 || sy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int sx = ox * stride + kx - pad;
          if (sx < 0 || sx >= w) continue;
          const T* src = row + (static_cast<std::size_t>(ky) * kw + kx) * cin;
          T* dst = &gx.at(sy, sx, 0);
          for (int c = 0; c < cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation convention: out[oy,ox,co] = sum_{ky,kx,ci} x[oy*s+ky-p, ox*s+kx-p, ci] *
// w[ky,kx,ci,co] + b[co].
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                      int stride, int pad) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(w, 4, "conv2d weight");
  const int kh = w.dim(0), kw = w.dim(1), cin = w.dim(2), cout = w.dim(3);
  if (x.dim(2) != cin)
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(2)) +
                         " != kernel channels " + std::to_string(cin));
  if (b.rank() != 1 || b.dim(0) != cout)
    throw DimensionError("conv2d: bias shape " + shape_str(b.shape()));
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  const int oh = conv_out_dim(x.dim(0), kh, stride, pad);
  const int ow = conv_out_dim(x.dim(1), kw, stride, pad);
  if (oh < 1 || ow < 1)
    throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " does not fit padded input " + shape_str(x.shape()));

  BasicTensor<T> cols = detail::im2col(x, kh, kw, stride, pad, oh, ow);
  BasicTensor<T> wmat = w.reshaped({kh * kw * cin, cout});
  BasicTensor<T> out = matmul(cols, wmat);  // [oh*ow, cout]
  for (int r = 0; r < oh * ow; ++r)
    for (int c = 0; c < cout; ++c) out.at(r, c) += b[c];
  ensure_finite(out, "conv2d");
  return out.reshaped({oh, ow, cout});
}

template <class T>
struct Conv2dGrads {
  BasicTensor<T> gx, gw, gb;
};

template <class T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                               const BasicTensor<T>& gy, int stride, int pad) {
  const int kh = w.dim(0), kw = w.dim(1), cin = w.dim(2), cout = w.dim(3);
  const int oh = gy.dim(0), ow = gy.dim(1);
  BasicTensor<T> gyr = gy.reshaped({oh * ow, cout});
  BasicTensor<T> cols = detail::im2col(x, kh, kw, stride, pad, oh, ow);
  Conv2dGrads<T> g;
  g.gw = matmul_tn(cols, gyr).reshaped(w.shape());
  g.gb = BasicTensor<T>({cout});
  for (int r = 0; r < oh * ow; ++r)
    for (int c = 0; c < cout; ++c) g.gb[c] += gyr.at(r, c);
  BasicTensor<T> wmat = w.reshaped({kh * kw * cin, cout});
  BasicTensor<T> gcols = matmul_nt(gyr, wmat);  // [oh*ow, kh*kw*cin]
  g.gx = BasicTensor<T>(x.shape());
  detail::col2im_add(gcols, kh, kw, stride, pad, oh, ow, g.gx);
  return g;
}

// ---- bilinear resize ---------------------------------------------------------

struct BilinearTap {
  int lo, hi;
  float frac;
};

// Half-pixel-center convention: src = (dst + 0.5) * in/out - 0.5, clamped to
// the border. Same rule for up- and downsampling.
inline std::vector<BilinearTap> bilinear_taps(int in, int out) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(out));
  const double s = static_cast<double>(in) / out;
  for (int d = 0; d < out; ++d) {
    double src = (d + 0.5) * s - 0.5;
    if (src < 0.0) src = 0.0;
    if (src > in - 1) src = in - 1;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    int hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(d)] = {lo, hi, static_cast<float>(src - lo)};
  }
  return taps;
}

template <class T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& x, int oh, int ow) {
  detail::require_rank(x, 3, "bilinear_resize");
  if (oh < 1 || ow < 1) throw DimensionError("bilinear_resize: target size must be >= 1");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (oh == h && ow == w) return x;
  const auto ty = bilinear_taps(h, oh);
  const auto tx = bilinear_taps(w, ow);
  BasicTensor<T> out({oh, ow, c});
  for (int oy = 0; oy < oh; ++oy) {
    const auto& ry = ty[static_cast<std::size_t>(oy)];
    for (int ox = 0; ox < ow; ++ox) {
      const auto& rx = tx[static_cast<std::size_t>(ox)];
      const T fy = static_cast<T>(ry.frac), fx = static_cast<T>(rx.frac);
      const T* p00 = &x.at(ry.lo, rx.lo, 0);
      const T* p01 = &x.at(ry.lo, rx.hi, 0);
      const T* p10 = &x.at(ry.hi, rx.lo, 0);
      const T* p11 = &x.at(ry.hi, rx.hi, 0);
      T* o = &out.at(oy, ox, 0);
      for (int ch = 0; ch < c; ++ch) {
        const T top = p00[ch] * (T(1) - fx) + p01[ch] * fx;
        const T bot = p10[ch] * (T(1) - fx) + p11[ch] * fx;
        o[ch] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  ensure_finite(out, "bilinear_resize");
  return out;
}

// transpose of the interpolation map: scatters gy back onto the source grid
template <class T>
BasicTensor<T> bilinear_resize_backward(const BasicTensor<T>& gy, int in_h, int in_w) {
  const int oh = gy.dim(0), ow = gy.dim(1), c = gy.dim(2);
  if (oh == in_h && ow == in_w) return gy;
  const auto ty = bilinear_taps(in_h, oh);
  const auto tx = bilinear_taps(in_w, ow);
  BasicTensor<T> gx({in_h, in_w, c});
  for (int oy = 0; oy < oh; ++oy) {
    const auto& ry = ty[static_cast<std::size_t>(oy)];
    for (int ox = 0; ox < ow; ++ox) {
      const auto& rx = tx[static_cast<std::size_t>(ox)];
      const T fy = static_cast<T>(ry.frac), fx = static_cast<T>(rx.frac);
      const T* g = &gy.at(oy, ox, 0);
      T* p00 = &gx.at(ry.lo, rx.lo, 0);
      T* p01 = &gx.at(ry.lo, rx.hi, 0);
      T* p10 = &gx.at(ry.hi, rx.lo, 0);
      T* p11 = &gx.at(ry.hi, rx.hi, 0);
      for (int ch = 0; ch < c; ++ch) {
        p00[ch] += g[ch] * (T(1) - fy) * (T(1) - fx);
        p01[ch] += g[ch] * (T(1) - fy) * fx;
        p10[ch] += g[ch] * fy * (T(1) - fx);
        p11[ch] += g[ch] * fy * fx;
      }
    }
  }
  return gx;
}

}  // namespace dcama
