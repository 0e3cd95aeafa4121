#pragma once
// Independent reference implementations used as test oracles. Everything here
// is written as direct scalar loops against the mathematical definitions and
// stays independent of the library's compute paths.

#include <cmath>
#include <vector>

namespace vqe::testing {

// Dense 2-D convolution, NCHW / OIHW layouts, zero padding.
inline std::vector<double> conv2d_ref(const std::vector<double>& x, int n,
                                      int cin, int h, int w,
                                      const std::vector<double>& wt, int cout,
                                      int kh, int kw,
                                      const std::vector<double>& bias,
                                      int stride, int pad, int dil) {
  int hout = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
  int wout = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
  std::vector<double> y(static_cast<size_t>(n) * cout * hout * wout, 0.0);
  for (int ni = 0; ni < n; ++ni)
    for (int co = 0; co < cout; ++co)
      for (int oy = 0; oy < hout; ++oy)
        for (int ox = 0; ox < wout; ++ox) {
          double s = bias.empty() ? 0.0 : bias[static_cast<size_t>(co)];
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                int iy = oy * stride - pad + ky * dil;
                int ix = ox * stride - pad + kx * dil;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                s += x[((static_cast<size_t>(ni) * cin + ci) * h + iy) * w + ix] *
                     wt[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx];
              }
          y[((static_cast<size_t>(ni) * cout + co) * hout + oy) * wout + ox] = s;
        }
  return y;
}

// Half-pixel-center bilinear resize of one plane.
inline std::vector<double> bilinear_resize_ref(const std::vector<double>& x,
                                               int h, int w, int oh, int ow) {
  std::vector<double> y(static_cast<size_t>(oh) * ow);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      double sy = (oy + 0.5) * h / oh - 0.5;
      double sx = (ox + 0.5) * w / ow - 0.5;
      sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
      sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
      int y0 = static_cast<int>(std::floor(sy));
      int x0 = static_cast<int>(std::floor(sx));
      int y1 = std::min(y0 + 1, h - 1);
      int x1 = std::min(x0 + 1, w - 1);
      double fy = sy - y0, fx = sx - x0;
      y[static_cast<size_t>(oy) * ow + ox] =
          x[static_cast<size_t>(y0) * w + x0] * (1 - fy) * (1 - fx) +
          x[static_cast<size_t>(y0) * w + x1] * (1 - fy) * fx +
          x[static_cast<size_t>(y1) * w + x0] * fy * (1 - fx) +
          x[static_cast<size_t>(y1) * w + x1] * fy * fx;
    }
  return y;
}

// Orthonormal 2-D DCT-II of one bs x bs block and its inverse.
inline std::vector<double> dct2_ref(const std::vector<double>& blk, int bs) {
  const double pi = 3.14159265358979323846;
  std::vector<double> c(static_cast<size_t>(bs) * bs, 0.0);
  for (int u = 0; u < bs; ++u)
    for (int v = 0; v < bs; ++v) {
      double s = 0.0;
      for (int y = 0; y < bs; ++y)
        for (int x = 0; x < bs; ++x)
          s += blk[static_cast<size_t>(y) * bs + x] *
               std::cos((2 * y + 1) * u * pi / (2.0 * bs)) *
               std::cos((2 * x + 1) * v * pi / (2.0 * bs));
      double au = u == 0 ? std::sqrt(1.0 / bs) : std::sqrt(2.0 / bs);
      double av = v == 0 ? std::sqrt(1.0 / bs) : std::sqrt(2.0 / bs);
      c[static_cast<size_t>(u) * bs + v] = au * av * s;
    }
  return c;
}

inline std::vector<double> idct2_ref(const std::vector<double>& c, int bs) {
  const double pi = 3.14159265358979323846;
  std::vector<double> blk(static_cast<size_t>(bs) * bs, 0.0);
  for (int y = 0; y < bs; ++y)
    for (int x = 0; x < bs; ++x) {
      double s = 0.0;
      for (int u = 0; u < bs; ++u)
        for (int v = 0; v < bs; ++v) {
          double au = u == 0 ? std::sqrt(1.0 / bs) : std::sqrt(2.0 / bs);
          double av = v == 0 ? std::sqrt(1.0 / bs) : std::sqrt(2.0 / bs);
          s += au * av * c[static_cast<size_t>(u) * bs + v] *
               std::cos((2 * y + 1) * u * pi / (2.0 * bs)) *
               std::cos((2 * x + 1) * v * pi / (2.0 * bs));
        }
      blk[static_cast<size_t>(y) * bs + x] = s;
    }
  return blk;
}

// Single-window multi-head attention: softmax(q k^T / sqrt(d)) v, explicit
// loops, no bias or mask.
inline std::vector<double> attention_ref(const std::vector<double>& q,
                                         const std::vector<double>& k,
                                         const std::vector<double>& v, int t,
                                         int heads, int hd) {
  std::vector<double> out(static_cast<size_t>(t) * heads * hd, 0.0);
  double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < t; ++i) {
      std::vector<double> sc(static_cast<size_t>(t));
      double mx = -1e300;
      for (int j = 0; j < t; ++j) {
        double s = 0.0;
        for (int d = 0; d < hd; ++d)
          s += q[(static_cast<size_t>(i) * heads + h) * hd + d] *
               k[(static_cast<size_t>(j) * heads + h) * hd + d];
        sc[static_cast<size_t>(j)] = s * scale;
        mx = std::max(mx, sc[static_cast<size_t>(j)]);
      }
      double z = 0.0;
      for (int j = 0; j < t; ++j) {
        sc[static_cast<size_t>(j)] = std::exp(sc[static_cast<size_t>(j)] - mx);
        z += sc[static_cast<size_t>(j)];
      }
      for (int j = 0; j < t; ++j)
        for (int d = 0; d < hd; ++d)
          out[(static_cast<size_t>(i) * heads + h) * hd + d] +=
              sc[static_cast<size_t>(j)] / z *
              v[(static_cast<size_t>(j) * heads + h) * hd + d];
    }
  return out;
}

inline double mse_ref(const std::vector<double>& a,
                      const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace vqe::testing
