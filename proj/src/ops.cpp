#include "vqe/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace vqe {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

Tensor make_op(Shape shape, std::vector<double> value,
               std::vector<Tensor> parents,
               std::function<void(TensorNode&)> bw) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (grad_enabled() && any) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(bw);
  }
  return Tensor(std::move(n));
}

void accum(const Tensor& t, const std::vector<double>& g) {
  t.node()->ensure_grad();
  double* d = t.node()->grad.data();
  for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

int64_t prod_range(const Shape& s, int lo, int hi) {
  int64_t p = 1;
  for (int i = lo; i < hi; ++i) p *= s[static_cast<size_t>(i)];
  return p;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> v(static_cast<size_t>(a.numel()));
  const double *pa = a.data(), *pb = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] = pa[i] + pb[i];
  return make_op(a.shape(), std::move(v), {a, b}, [a, b](TensorNode& self) {
    if (a.requires_grad()) accum(a, self.grad);
    if (b.requires_grad()) accum(b, self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> v(static_cast<size_t>(a.numel()));
  const double *pa = a.data(), *pb = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] = pa[i] - pb[i];
  return make_op(a.shape(), std::move(v), {a, b}, [a, b](TensorNode& self) {
    if (a.requires_grad()) accum(a, self.grad);
    if (b.requires_grad()) {
      b.node()->ensure_grad();
      double* g = b.node()->grad.data();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> v(static_cast<size_t>(a.numel()));
  const double *pa = a.data(), *pb = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] = pa[i] * pb[i];
  return make_op(a.shape(), std::move(v), {a, b}, [a, b](TensorNode& self) {
    if (a.requires_grad()) {
      a.node()->ensure_grad();
      double* g = a.node()->grad.data();
      const double* pb2 = b.data();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb2[i];
    }
    if (b.requires_grad()) {
      b.node()->ensure_grad();
      double* g = b.node()->grad.data();
      const double* pa2 = a.data();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa2[i];
    }
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> v(static_cast<size_t>(a.numel()));
  const double* pa = a.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] = pa[i] + s;
  return make_op(a.shape(), std::move(v), {a}, [a](TensorNode& self) {
    if (a.requires_grad()) accum(a, self.grad);
  });
}

Tensor mul_scalar(const Tensor& a, double s) {
  std::vector<double> v(static_cast<size_t>(a.numel()));
  const double* pa = a.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] = pa[i] * s;
  return make_op(a.shape(), std::move(v), {a}, [a, s](TensorNode& self) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    double* g = a.node()->grad.data();
    for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> v(static_cast<size_t>(a.numel()));
  const double* pa = a.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  return make_op(a.shape(), std::move(v), {a}, [a](TensorNode& self) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    double* g = a.node()->grad.data();
    const double* pa2 = a.data();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (pa2[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  std::vector<double> v(static_cast<size_t>(a.numel()));
  const double* pa = a.data();
  for (size_t i = 0; i < v.size(); ++i)
    v[i] = 0.5 * pa[i] * (1.0 + std::erf(pa[i] * kInvSqrt2));
  return make_op(a.shape(), std::move(v), {a}, [a](TensorNode& self) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    double* g = a.node()->grad.data();
    const double* pa2 = a.data();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double x = pa2[i];
      double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      g[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(static_cast<size_t>(a.numel()));
  const double* pa = a.data();
  for (size_t i = 0; i < v.size(); ++i) {
    double x = pa[i];
    v[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                    : std::exp(x) / (1.0 + std::exp(x));
  }
  return make_op(a.shape(), std::move(v), {a}, [a](TensorNode& self) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    double* g = a.node()->grad.data();
    const double* y = self.value.data();
    for (size_t i = 0; i < self.grad.size(); ++i)
      g[i] += self.grad[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor sqrt_elem(const Tensor& a) {
  std::vector<double> v(static_cast<size_t>(a.numel()));
  const double* pa = a.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(pa[i]);
  return make_op(a.shape(), std::move(v), {a}, [a](TensorNode& self) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    double* g = a.node()->grad.data();
    const double* y = self.value.data();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (y[i] > 0.0) g[i] += self.grad[i] * 0.5 / y[i];
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  std::vector<double> v(static_cast<size_t>(a.numel()));
  const double* pa = a.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::min(std::max(pa[i], lo), hi);
  return make_op(a.shape(), std::move(v), {a}, [a, lo, hi](TensorNode& self) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    double* g = a.node()->grad.data();
    const double* pa2 = a.data();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (pa2[i] >= lo && pa2[i] <= hi) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------- reductions

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  const double* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) s += pa[i];
  return make_op({1}, {s}, {a}, [a](TensorNode& self) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    double* g = a.node()->grad.data();
    for (int64_t i = 0; i < a.numel(); ++i) g[i] += self.grad[0];
  });
}

Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean_all on empty tensor");
  double s = 0.0;
  const double* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) s += pa[i];
  double inv = 1.0 / static_cast<double>(a.numel());
  return make_op({1}, {s * inv}, {a}, [a, inv](TensorNode& self) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    double* g = a.node()->grad.data();
    for (int64_t i = 0; i < a.numel(); ++i) g[i] += self.grad[0] * inv;
  });
}

// --------------------------------------------------------------------- shape

Tensor reshape(const Tensor& a, const Shape& s) {
  if (shape_numel(s) != a.numel())
    throw ShapeError("reshape: numel mismatch " + shape_str(a.shape()) +
                     " -> " + shape_str(s));
  std::vector<double> v(a.values());
  return make_op(s, std::move(v), {a}, [a](TensorNode& self) {
    if (a.requires_grad()) accum(a, self.grad);
  });
}

namespace {

// Copies src (with shape ishape) into dst laid out as ishape permuted by
// `order`; when `scatter` is set, accumulates dst-layout values back into src
// positions instead (used for the backward pass).
void permute_walk(const Shape& ishape, const std::vector<int>& order,
                  const double* src, double* dst, bool scatter) {
  int r = static_cast<int>(ishape.size());
  std::vector<int64_t> istr(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    istr[static_cast<size_t>(i)] =
        istr[static_cast<size_t>(i + 1)] * ishape[static_cast<size_t>(i + 1)];
  std::vector<int> oshape(static_cast<size_t>(r));
  std::vector<int64_t> ostr_in(static_cast<size_t>(r));  // input stride per out axis
  for (int i = 0; i < r; ++i) {
    oshape[static_cast<size_t>(i)] = ishape[static_cast<size_t>(order[static_cast<size_t>(i)])];
    ostr_in[static_cast<size_t>(i)] = istr[static_cast<size_t>(order[static_cast<size_t>(i)])];
  }
  std::vector<int> idx(static_cast<size_t>(r), 0);
  int64_t n = prod_range(ishape, 0, r);
  int64_t in_off = 0;
  for (int64_t o = 0; o < n; ++o) {
    if (scatter)
      const_cast<double*>(src)[in_off] += dst[o];
    else
      dst[o] = src[in_off];
    for (int ax = r - 1; ax >= 0; --ax) {
      idx[static_cast<size_t>(ax)]++;
      in_off += ostr_in[static_cast<size_t>(ax)];
      if (idx[static_cast<size_t>(ax)] < oshape[static_cast<size_t>(ax)]) break;
      in_off -= ostr_in[static_cast<size_t>(ax)] * oshape[static_cast<size_t>(ax)];
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& order) {
  int r = a.rank();
  if (static_cast<int>(order.size()) != r)
    throw ShapeError("permute: order size mismatch");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape os(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    int o = order[static_cast<size_t>(i)];
    if (o < 0 || o >= r || seen[static_cast<size_t>(o)])
      throw ShapeError("permute: invalid order");
    seen[static_cast<size_t>(o)] = true;
    os[static_cast<size_t>(i)] = a.dim(o);
  }
  std::vector<double> v(static_cast<size_t>(a.numel()));
  permute_walk(a.shape(), order, a.data(), v.data(), false);
  return make_op(os, std::move(v), {a}, [a, order](TensorNode& self) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    permute_walk(a.shape(), order, a.node()->grad.data(), self.grad.data(), true);
  });
}

Tensor narrow(const Tensor& a, int dim, int start, int len) {
  int r = a.rank();
  if (dim < 0 || dim >= r) throw ShapeError("narrow: bad dim");
  if (start < 0 || len <= 0 || start + len > a.dim(dim))
    throw ShapeError("narrow: range out of bounds");
  Shape os = a.shape();
  os[static_cast<size_t>(dim)] = len;
  int64_t outer = prod_range(a.shape(), 0, dim);
  int64_t inner = prod_range(a.shape(), dim + 1, r);
  int64_t d = a.dim(dim);
  std::vector<double> v(static_cast<size_t>(outer * len * inner));
  const double* src = a.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(v.data() + o * len * inner, src + (o * d + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(double));
  return make_op(os, std::move(v), {a},
                 [a, dim, start, len, outer, inner, d](TensorNode& self) {
                   if (!a.requires_grad()) return;
                   a.node()->ensure_grad();
                   double* g = a.node()->grad.data();
                   const double* sg = self.grad.data();
                   for (int64_t o = 0; o < outer; ++o) {
                     double* dstp = g + (o * d + start) * inner;
                     const double* srcp = sg + o * len * inner;
                     for (int64_t i = 0; i < len * inner; ++i) dstp[i] += srcp[i];
                   }
                 });
}

Tensor concat(const std::vector<Tensor>& parts, int dim) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  int r = parts[0].rank();
  if (dim < 0 || dim >= r) throw ShapeError("concat: bad dim");
  Shape os = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != dim && p.dim(i) != os[static_cast<size_t>(i)])
        throw ShapeError("concat: shape mismatch");
    total += p.dim(dim);
  }
  os[static_cast<size_t>(dim)] = total;
  int64_t outer = prod_range(os, 0, dim);
  int64_t inner = prod_range(os, dim + 1, r);
  std::vector<double> v(static_cast<size_t>(shape_numel(os)));
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t d = p.dim(dim);
    const double* src = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(v.data() + (o * total + off) * inner, src + o * d * inner,
                  static_cast<size_t>(d * inner) * sizeof(double));
    off += d;
  }
  auto parts_copy = parts;
  return make_op(os, std::move(v), parts_copy,
                 [parts_copy, outer, inner, total](TensorNode& self) {
                   int64_t off2 = 0;
                   const double* sg = self.grad.data();
                   for (const auto& p : parts_copy) {
                     int64_t d = p.numel() / (outer * inner);
                     if (p.requires_grad()) {
                       p.node()->ensure_grad();
                       double* g = p.node()->grad.data();
                       for (int64_t o = 0; o < outer; ++o) {
                         const double* srcp = sg + (o * total + off2) * inner;
                         double* dstp = g + o * d * inner;
                         for (int64_t i = 0; i < d * inner; ++i) dstp[i] += srcp[i];
                       }
                     }
                     off2 += d;
                   }
                 });
}

Tensor pad2d(const Tensor& a, int top, int bottom, int left, int right) {
  if (a.rank() != 4) throw ShapeError("pad2d: expected [N,C,H,W]");
  if (top < 0 || bottom < 0 || left < 0 || right < 0)
    throw ShapeError("pad2d: negative padding");
  int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  int oh = h + top + bottom, ow = w + left + right;
  std::vector<double> v(static_cast<size_t>(n) * c * oh * ow, 0.0);
  const double* src = a.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc)
    for (int y = 0; y < h; ++y)
      std::memcpy(v.data() + (nc * oh + (y + top)) * ow + left,
                  src + (nc * h + y) * w, static_cast<size_t>(w) * sizeof(double));
  return make_op({n, c, oh, ow}, std::move(v), {a},
                 [a, top, left, n, c, h, w, oh, ow](TensorNode& self) {
                   if (!a.requires_grad()) return;
                   a.node()->ensure_grad();
                   double* g = a.node()->grad.data();
                   const double* sg = self.grad.data();
                   for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc)
                     for (int y = 0; y < h; ++y) {
                       const double* row = sg + (nc * oh + (y + top)) * ow + left;
                       double* dst = g + (nc * h + y) * w;
                       for (int x = 0; x < w; ++x) dst[x] += row[x];
                     }
                 });
}

Tensor crop2d(const Tensor& a, int top, int left, int h, int w) {
  if (a.rank() != 4) throw ShapeError("crop2d: expected [N,C,H,W]");
  int n = a.dim(0), c = a.dim(1), ih = a.dim(2), iw = a.dim(3);
  if (top < 0 || left < 0 || h <= 0 || w <= 0 || top + h > ih || left + w > iw)
    throw ShapeError("crop2d: region out of bounds");
  std::vector<double> v(static_cast<size_t>(n) * c * h * w);
  const double* src = a.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc)
    for (int y = 0; y < h; ++y)
      std::memcpy(v.data() + (nc * h + y) * w,
                  src + (nc * ih + (y + top)) * iw + left,
                  static_cast<size_t>(w) * sizeof(double));
  return make_op({n, c, h, w}, std::move(v), {a},
                 [a, top, left, n, c, h, w, ih, iw](TensorNode& self) {
                   if (!a.requires_grad()) return;
                   a.node()->ensure_grad();
                   double* g = a.node()->grad.data();
                   const double* sg = self.grad.data();
                   for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc)
                     for (int y = 0; y < h; ++y) {
                       double* dst = g + (nc * ih + (y + top)) * iw + left;
                       const double* row = sg + (nc * h + y) * w;
                       for (int x = 0; x < w; ++x) dst[x] += row[x];
                     }
                 });
}

// ----------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(static_cast<size_t>(m) * n);
  {
    CMapM A(a.data(), m, k), B(b.data(), k, n);
    MapM C(v.data(), m, n);
    C.noalias() = A * B;
  }
  return make_op({m, n}, std::move(v), {a, b}, [a, b, m, k, n](TensorNode& self) {
    CMapM G(self.grad.data(), m, n);
    if (a.requires_grad()) {
      a.node()->ensure_grad();
      MapM GA(a.node()->grad.data(), m, k);
      CMapM B(b.data(), k, n);
      GA.noalias() += G * B.transpose();
    }
    if (b.requires_grad()) {
      b.node()->ensure_grad();
      MapM GB(b.node()->grad.data(), k, n);
      CMapM A(a.data(), m, k);
      GB.noalias() += A.transpose() * G;
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1))
    throw ShapeError("bmm: incompatible " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> v(static_cast<size_t>(bs) * m * n);
  for (int i = 0; i < bs; ++i) {
    CMapM A(a.data() + static_cast<int64_t>(i) * m * k, m, k);
    CMapM B(b.data() + static_cast<int64_t>(i) * k * n, k, n);
    MapM C(v.data() + static_cast<int64_t>(i) * m * n, m, n);
    C.noalias() = A * B;
  }
  return make_op({bs, m, n}, std::move(v), {a, b},
                 [a, b, bs, m, k, n](TensorNode& self) {
                   for (int i = 0; i < bs; ++i) {
                     CMapM G(self.grad.data() + static_cast<int64_t>(i) * m * n, m, n);
                     if (a.requires_grad()) {
                       a.node()->ensure_grad();
                       MapM GA(a.node()->grad.data() + static_cast<int64_t>(i) * m * k, m, k);
                       CMapM B(b.data() + static_cast<int64_t>(i) * k * n, k, n);
                       GA.noalias() += G * B.transpose();
                     }
                     if (b.requires_grad()) {
                       b.node()->ensure_grad();
                       MapM GB(b.node()->grad.data() + static_cast<int64_t>(i) * k * n, k, n);
                       CMapM A(a.data() + static_cast<int64_t>(i) * m * k, m, k);
                       GB.noalias() += A.transpose() * G;
                     }
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2");
  return permute(a, {1, 0});
}

Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  if (bias.rank() != 1 || a.rank() < 1 ||
      a.dim(a.rank() - 1) != bias.dim(0))
    throw ShapeError("add_row_bias: incompatible shapes");
  int f = bias.dim(0);
  int64_t rows = a.numel() / f;
  std::vector<double> v(static_cast<size_t>(a.numel()));
  const double *pa = a.data(), *pb = bias.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < f; ++j) v[static_cast<size_t>(r * f + j)] = pa[r * f + j] + pb[j];
  return make_op(a.shape(), std::move(v), {a, bias},
                 [a, bias, rows, f](TensorNode& self) {
                   if (a.requires_grad()) accum(a, self.grad);
                   if (bias.requires_grad()) {
                     bias.node()->ensure_grad();
                     double* g = bias.node()->grad.data();
                     const double* sg = self.grad.data();
                     for (int64_t r = 0; r < rows; ++r)
                       for (int j = 0; j < f; ++j) g[j] += sg[r * f + j];
                   }
                 });
}

// ----------------------------------------------------------------- conv2d

namespace {

struct ConvDims {
  int n, cin, h, w, cout, kh, kw, stride, pad, dil, hout, wout;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad,
                   int dilation) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d: expected x [N,C,H,W], w [Co,Ci,kh,kw]");
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) +
                     " vs " + shape_str(w.shape()));
  ConvDims d;
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  d.dil = dilation;
  d.hout = (d.h + 2 * pad - dilation * (d.kh - 1) - 1) / stride + 1;
  d.wout = (d.w + 2 * pad - dilation * (d.kw - 1) - 1) / stride + 1;
  if (d.hout <= 0 || d.wout <= 0)
    throw ShapeError("conv2d: empty output for input " + shape_str(x.shape()));
  return d;
}

// col is [cin*kh*kw, (r1-r0)*wout] for output rows [r0, r1) of sample xn.
void im2col_rows(const double* xn, const ConvDims& d, int r0, int r1,
                 double* col) {
  int ckk = d.cin * d.kh * d.kw;
  int cols = (r1 - r0) * d.wout;
  for (int c = 0; c < d.cin; ++c)
    for (int ky = 0; ky < d.kh; ++ky)
      for (int kx = 0; kx < d.kw; ++kx) {
        int q = (c * d.kh + ky) * d.kw + kx;
        double* dst = col + static_cast<int64_t>(q) * cols;
        for (int oy = r0; oy < r1; ++oy) {
          int iy = oy * d.stride - d.pad + ky * d.dil;
          const double* src = xn + (static_cast<int64_t>(c) * d.h + iy) * d.w;
          bool rowok = iy >= 0 && iy < d.h;
          for (int ox = 0; ox < d.wout; ++ox) {
            int ix = ox * d.stride - d.pad + kx * d.dil;
            *dst++ = (rowok && ix >= 0 && ix < d.w) ? src[ix] : 0.0;
          }
        }
      }
  (void)ckk;
}

int conv_tile_rows(const ConvDims& d) {
  int64_t ckk = static_cast<int64_t>(d.cin) * d.kh * d.kw;
  int64_t target = 1 << 20;  // ~8 MB of doubles per im2col buffer
  int rows = static_cast<int>(std::max<int64_t>(1, target / std::max<int64_t>(1, ckk * d.wout)));
  return std::min(rows, d.hout);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad, int dilation) {
  ConvDims d = conv_dims(x, w, stride, pad, dilation);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d.cout))
    throw ShapeError("conv2d: bad bias shape");
  int ckk = d.cin * d.kh * d.kw;
  std::vector<double> v(static_cast<size_t>(d.n) * d.cout * d.hout * d.wout);
  int tile = conv_tile_rows(d);
  std::vector<double> col(static_cast<size_t>(ckk) * tile * d.wout);
  for (int n = 0; n < d.n; ++n) {
    const double* xn = x.data() + static_cast<int64_t>(n) * d.cin * d.h * d.w;
    double* yn = v.data() + static_cast<int64_t>(n) * d.cout * d.hout * d.wout;
    MapM Y(yn, d.cout, static_cast<int64_t>(d.hout) * d.wout);
    CMapM W(w.data(), d.cout, ckk);
    for (int r0 = 0; r0 < d.hout; r0 += tile) {
      int r1 = std::min(d.hout, r0 + tile);
      im2col_rows(xn, d, r0, r1, col.data());
      CMapM C(col.data(), ckk, static_cast<int64_t>(r1 - r0) * d.wout);
      Y.middleCols(static_cast<int64_t>(r0) * d.wout,
                   static_cast<int64_t>(r1 - r0) * d.wout)
          .noalias() = W * C;
    }
    if (bias.defined()) {
      const double* pb = bias.data();
      for (int co = 0; co < d.cout; ++co) {
        double* row = yn + static_cast<int64_t>(co) * d.hout * d.wout;
        for (int64_t i = 0; i < static_cast<int64_t>(d.hout) * d.wout; ++i)
          row[i] += pb[co];
      }
    }
  }
  std::vector<Tensor> parents = {x, w};
  if (bias.defined()) parents.push_back(bias);
  return make_op(
      {d.n, d.cout, d.hout, d.wout}, std::move(v), parents,
      [x, w, bias, d, ckk](TensorNode& self) {
        int tile = conv_tile_rows(d);
        std::vector<double> col(static_cast<size_t>(ckk) * tile * d.wout);
        std::vector<double> dcol;
        bool need_dx = x.requires_grad();
        bool need_dw = w.requires_grad();
        if (need_dx) dcol.resize(col.size());
        if (need_dx) x.node()->ensure_grad();
        if (need_dw) w.node()->ensure_grad();
        CMapM W(w.data(), d.cout, ckk);
        for (int n = 0; n < d.n; ++n) {
          const double* xn = x.data() + static_cast<int64_t>(n) * d.cin * d.h * d.w;
          const double* gn =
              self.grad.data() + static_cast<int64_t>(n) * d.cout * d.hout * d.wout;
          CMapM G(gn, d.cout, static_cast<int64_t>(d.hout) * d.wout);
          for (int r0 = 0; r0 < d.hout; r0 += tile) {
            int r1 = std::min(d.hout, r0 + tile);
            int64_t nc = static_cast<int64_t>(r1 - r0) * d.wout;
            auto Gb = G.middleCols(static_cast<int64_t>(r0) * d.wout, nc);
            if (need_dw) {
              im2col_rows(xn, d, r0, r1, col.data());
              CMapM C(col.data(), ckk, nc);
              MapM GW(w.node()->grad.data(), d.cout, ckk);
              GW.noalias() += Gb * C.transpose();
            }
            if (need_dx) {
              MapM DC(dcol.data(), ckk, nc);
              DC.noalias() = W.transpose() * Gb;
              // col2im scatter
              double* gx = x.node()->grad.data() +
                           static_cast<int64_t>(n) * d.cin * d.h * d.w;
              for (int c = 0; c < d.cin; ++c)
                for (int ky = 0; ky < d.kh; ++ky)
                  for (int kx = 0; kx < d.kw; ++kx) {
                    int q = (c * d.kh + ky) * d.kw + kx;
                    const double* srcp = dcol.data() + static_cast<int64_t>(q) * nc;
                    for (int oy = r0; oy < r1; ++oy) {
                      int iy = oy * d.stride - d.pad + ky * d.dil;
                      if (iy < 0 || iy >= d.h) {
                        srcp += d.wout;
                        continue;
                      }
                      double* dstrow = gx + (static_cast<int64_t>(c) * d.h + iy) * d.w;
                      for (int ox = 0; ox < d.wout; ++ox) {
                        int ix = ox * d.stride - d.pad + kx * d.dil;
                        if (ix >= 0 && ix < d.w) dstrow[ix] += srcp[ox];
                      }
                      srcp += d.wout;
                    }
                  }
            }
          }
        }
        if (bias.defined() && bias.requires_grad()) {
          bias.node()->ensure_grad();
          double* gb = bias.node()->grad.data();
          for (int n = 0; n < d.n; ++n) {
            const double* gn = self.grad.data() +
                               static_cast<int64_t>(n) * d.cout * d.hout * d.wout;
            for (int co = 0; co < d.cout; ++co) {
              const double* row = gn + static_cast<int64_t>(co) * d.hout * d.wout;
              double s = 0.0;
              for (int64_t i = 0; i < static_cast<int64_t>(d.hout) * d.wout; ++i)
                s += row[i];
              gb[co] += s;
            }
          }
        }
      });
}

// ------------------------------------------------------------- deform_align

namespace {

inline double bilinear_at(const double* img, int h, int w, double py, double px,
                          double* d_dy = nullptr, double* d_dx = nullptr) {
  int y0 = static_cast<int>(std::floor(py));
  int x0 = static_cast<int>(std::floor(px));
  int y1 = y0 + 1, x1 = x0 + 1;
  double fy = py - y0, fx = px - x0;
  auto at = [&](int yy, int xx) -> double {
    return (yy >= 0 && yy < h && xx >= 0 && xx < w)
               ? img[static_cast<int64_t>(yy) * w + xx]
               : 0.0;
  };
  double v00 = at(y0, x0), v01 = at(y0, x1), v10 = at(y1, x0), v11 = at(y1, x1);
  if (d_dy) *d_dy = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx;
  if (d_dx) *d_dx = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy;
  return v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx + v10 * fy * (1 - fx) +
         v11 * fy * fx;
}

inline void bilinear_scatter(double* img, int h, int w, double py, double px,
                             double g) {
  int y0 = static_cast<int>(std::floor(py));
  int x0 = static_cast<int>(std::floor(px));
  int y1 = y0 + 1, x1 = x0 + 1;
  double fy = py - y0, fx = px - x0;
  auto put = [&](int yy, int xx, double v) {
    if (yy >= 0 && yy < h && xx >= 0 && xx < w)
      img[static_cast<int64_t>(yy) * w + xx] += v;
  };
  put(y0, x0, g * (1 - fy) * (1 - fx));
  put(y0, x1, g * (1 - fy) * fx);
  put(y1, x0, g * fy * (1 - fx));
  put(y1, x1, g * fy * fx);
}

// Gathers deformable samples of sample n into S [F*K, H*W].
void gather_samples(const double* xn, const double* on, int f_cnt, int k_cnt,
                    int h, int w, double* s) {
  int64_t hw = static_cast<int64_t>(h) * w;
  for (int f = 0; f < f_cnt; ++f) {
    const double* img = xn + static_cast<int64_t>(f) * hw;
    for (int k = 0; k < k_cnt; ++k) {
      int ky = k / 3 - 1, kx = k % 3 - 1;
      const double* oy = on + (static_cast<int64_t>(f) * k_cnt + k) * 2 * hw;
      const double* ox = oy + hw;
      double* dst = s + (static_cast<int64_t>(f) * k_cnt + k) * hw;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          int64_t i = static_cast<int64_t>(y) * w + x;
          dst[i] = bilinear_at(img, h, w, y + ky + oy[i], x + kx + ox[i]);
        }
    }
  }
}

}  // namespace

Tensor deform_align(const Tensor& x, const Tensor& offsets, const Tensor& w,
                    const Tensor& bias) {
  if (x.rank() != 4 || offsets.rank() != 4 || w.rank() != 3)
    throw ShapeError("deform_align: bad ranks");
  int n = x.dim(0), f = x.dim(1), h = x.dim(2), wd = x.dim(3);
  int cout = w.dim(0), k = w.dim(2);
  if (k != 9) throw ShapeError("deform_align: expected 9 taps");
  if (w.dim(1) != f) throw ShapeError("deform_align: frame-count mismatch");
  if (offsets.dim(0) != n || offsets.dim(1) != f * k * 2 ||
      offsets.dim(2) != h || offsets.dim(3) != wd)
    throw ShapeError("deform_align: bad offsets shape " +
                     shape_str(offsets.shape()));
  if (bias.rank() != 1 || bias.dim(0) != cout)
    throw ShapeError("deform_align: bad bias shape");
  int64_t hw = static_cast<int64_t>(h) * wd;
  int fk = f * k;
  std::vector<double> v(static_cast<size_t>(n) * cout * hw);
  std::vector<double> smp(static_cast<size_t>(fk) * hw);
  for (int i = 0; i < n; ++i) {
    gather_samples(x.data() + static_cast<int64_t>(i) * f * hw,
                   offsets.data() + static_cast<int64_t>(i) * fk * 2 * hw, f, k,
                   h, wd, smp.data());
    CMapM W(w.data(), cout, fk);
    CMapM S(smp.data(), fk, hw);
    MapM Y(v.data() + static_cast<int64_t>(i) * cout * hw, cout, hw);
    Y.noalias() = W * S;
    const double* pb = bias.data();
    for (int co = 0; co < cout; ++co)
      for (int64_t j = 0; j < hw; ++j)
        v[static_cast<size_t>((static_cast<int64_t>(i) * cout + co) * hw + j)] += pb[co];
  }
  return make_op(
      {n, cout, h, wd}, std::move(v), {x, offsets, w, bias},
      [x, offsets, w, bias, n, f, k, h, wd, cout, fk, hw](TensorNode& self) {
        std::vector<double> smp(static_cast<size_t>(fk) * hw);
        std::vector<double> gs(static_cast<size_t>(fk) * hw);
        bool need_dx = x.requires_grad();
        bool need_do = offsets.requires_grad();
        bool need_dw = w.requires_grad();
        if (need_dx) x.node()->ensure_grad();
        if (need_do) offsets.node()->ensure_grad();
        if (need_dw) w.node()->ensure_grad();
        CMapM W(w.data(), cout, fk);
        for (int i = 0; i < n; ++i) {
          const double* xn = x.data() + static_cast<int64_t>(i) * f * hw;
          const double* on = offsets.data() + static_cast<int64_t>(i) * fk * 2 * hw;
          CMapM G(self.grad.data() + static_cast<int64_t>(i) * cout * hw, cout, hw);
          if (need_dw) {
            gather_samples(xn, on, f, k, h, wd, smp.data());
            CMapM S(smp.data(), fk, hw);
            MapM GW(w.node()->grad.data(), cout, fk);
            GW.noalias() += G * S.transpose();
          }
          if (need_dx || need_do) {
            MapM GS(gs.data(), fk, hw);
            GS.noalias() = W.transpose() * G;
            double* gx = need_dx ? x.node()->grad.data() + static_cast<int64_t>(i) * f * hw
                                 : nullptr;
            double* go = need_do
                             ? offsets.node()->grad.data() + static_cast<int64_t>(i) * fk * 2 * hw
                             : nullptr;
            for (int ff = 0; ff < f; ++ff) {
              const double* img = xn + static_cast<int64_t>(ff) * hw;
              for (int kk = 0; kk < k; ++kk) {
                int ky = kk / 3 - 1, kx = kk % 3 - 1;
                const double* oy = on + (static_cast<int64_t>(ff) * k + kk) * 2 * hw;
                const double* ox = oy + hw;
                const double* gsk = gs.data() + (static_cast<int64_t>(ff) * k + kk) * hw;
                for (int y = 0; y < h; ++y)
                  for (int xq = 0; xq < wd; ++xq) {
                    int64_t idx = static_cast<int64_t>(y) * wd + xq;
                    double g = gsk[idx];
                    if (g == 0.0) continue;
                    double py = y + ky + oy[idx], px = xq + kx + ox[idx];
                    if (need_do) {
                      double ddy, ddx;
                      bilinear_at(img, h, wd, py, px, &ddy, &ddx);
                      double* goy = go + (static_cast<int64_t>(ff) * k + kk) * 2 * hw;
                      goy[idx] += g * ddy;
                      goy[hw + idx] += g * ddx;
                    }
                    if (need_dx)
                      bilinear_scatter(gx + static_cast<int64_t>(ff) * hw, h, wd,
                                       py, px, g);
                  }
              }
            }
          }
        }
        if (bias.requires_grad()) {
          bias.node()->ensure_grad();
          double* gb = bias.node()->grad.data();
          for (int i = 0; i < n; ++i)
            for (int co = 0; co < cout; ++co) {
              const double* row =
                  self.grad.data() + (static_cast<int64_t>(i) * cout + co) * hw;
              double s = 0.0;
              for (int64_t j = 0; j < hw; ++j) s += row[j];
              gb[co] += s;
            }
        }
      });
}

// ------------------------------------------------------- resize and pooling

namespace {

struct ResampleAxis {
  std::vector<int> i0, i1;
  std::vector<double> frac;
};

ResampleAxis resample_axis(int in, int out) {
  ResampleAxis a;
  a.i0.resize(static_cast<size_t>(out));
  a.i1.resize(static_cast<size_t>(out));
  a.frac.resize(static_cast<size_t>(out));
  double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    s = std::min(std::max(s, 0.0), static_cast<double>(in - 1));
    int i0 = static_cast<int>(std::floor(s));
    a.i0[static_cast<size_t>(o)] = i0;
    a.i1[static_cast<size_t>(o)] = std::min(i0 + 1, in - 1);
    a.frac[static_cast<size_t>(o)] = s - i0;
  }
  return a;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& x, int oh, int ow) {
  if (x.rank() != 4) throw ShapeError("bilinear_upsample: expected [N,C,H,W]");
  if (oh <= 0 || ow <= 0) throw ShapeError("bilinear_upsample: bad target");
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  ResampleAxis ay = resample_axis(h, oh), ax = resample_axis(w, ow);
  std::vector<double> v(static_cast<size_t>(n) * c * oh * ow);
  const double* src = x.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
    const double* plane = src + nc * h * w;
    double* out = v.data() + nc * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      int y0 = ay.i0[static_cast<size_t>(oy)], y1 = ay.i1[static_cast<size_t>(oy)];
      double fy = ay.frac[static_cast<size_t>(oy)];
      for (int ox = 0; ox < ow; ++ox) {
        int x0 = ax.i0[static_cast<size_t>(ox)], x1 = ax.i1[static_cast<size_t>(ox)];
        double fx = ax.frac[static_cast<size_t>(ox)];
        double v00 = plane[static_cast<int64_t>(y0) * w + x0];
        double v01 = plane[static_cast<int64_t>(y0) * w + x1];
        double v10 = plane[static_cast<int64_t>(y1) * w + x0];
        double v11 = plane[static_cast<int64_t>(y1) * w + x1];
        out[static_cast<int64_t>(oy) * ow + ox] = v00 * (1 - fy) * (1 - fx) +
                                                  v01 * (1 - fy) * fx +
                                                  v10 * fy * (1 - fx) + v11 * fy * fx;
      }
    }
  }
  return make_op({n, c, oh, ow}, std::move(v), {x},
                 [x, n, c, h, w, oh, ow, ay, ax](TensorNode& self) {
                   if (!x.requires_grad()) return;
                   x.node()->ensure_grad();
                   double* gx = x.node()->grad.data();
                   const double* sg = self.grad.data();
                   for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
                     double* plane = gx + nc * h * w;
                     const double* gout = sg + nc * oh * ow;
                     for (int oy = 0; oy < oh; ++oy) {
                       int y0 = ay.i0[static_cast<size_t>(oy)], y1 = ay.i1[static_cast<size_t>(oy)];
                       double fy = ay.frac[static_cast<size_t>(oy)];
                       for (int ox = 0; ox < ow; ++ox) {
                         int x0 = ax.i0[static_cast<size_t>(ox)], x1 = ax.i1[static_cast<size_t>(ox)];
                         double fx = ax.frac[static_cast<size_t>(ox)];
                         double g = gout[static_cast<int64_t>(oy) * ow + ox];
                         plane[static_cast<int64_t>(y0) * w + x0] += g * (1 - fy) * (1 - fx);
                         plane[static_cast<int64_t>(y0) * w + x1] += g * (1 - fy) * fx;
                         plane[static_cast<int64_t>(y1) * w + x0] += g * fy * (1 - fx);
                         plane[static_cast<int64_t>(y1) * w + x1] += g * fy * fx;
                       }
                     }
                   }
                 });
}

Tensor avg_pool2d(const Tensor& x, int k) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d: expected [N,C,H,W]");
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k <= 0 || h % k != 0 || w % k != 0)
    throw ShapeError("avg_pool2d: dims not divisible by kernel");
  int oh = h / k, ow = w / k;
  double inv = 1.0 / (k * k);
  std::vector<double> v(static_cast<size_t>(n) * c * oh * ow, 0.0);
  const double* src = x.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
    const double* plane = src + nc * h * w;
    double* out = v.data() + nc * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx)
            s += plane[static_cast<int64_t>(oy * k + dy) * w + ox * k + dx];
        out[static_cast<int64_t>(oy) * ow + ox] = s * inv;
      }
  }
  return make_op({n, c, oh, ow}, std::move(v), {x},
                 [x, n, c, h, w, k, oh, ow, inv](TensorNode& self) {
                   if (!x.requires_grad()) return;
                   x.node()->ensure_grad();
                   double* gx = x.node()->grad.data();
                   const double* sg = self.grad.data();
                   for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
                     double* plane = gx + nc * h * w;
                     const double* gout = sg + nc * oh * ow;
                     for (int oy = 0; oy < oh; ++oy)
                       for (int ox = 0; ox < ow; ++ox) {
                         double g = gout[static_cast<int64_t>(oy) * ow + ox] * inv;
                         for (int dy = 0; dy < k; ++dy)
                           for (int dx = 0; dx < k; ++dx)
                             plane[static_cast<int64_t>(oy * k + dy) * w + ox * k + dx] += g;
                       }
                   }
                 });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expected [N,C,H,W]");
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t hw = static_cast<int64_t>(h) * w;
  double inv = 1.0 / static_cast<double>(hw);
  std::vector<double> v(static_cast<size_t>(n) * c);
  const double* src = x.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
    double s = 0.0;
    const double* plane = src + nc * hw;
    for (int64_t i = 0; i < hw; ++i) s += plane[i];
    v[static_cast<size_t>(nc)] = s * inv;
  }
  return make_op({n, c}, std::move(v), {x}, [x, n, c, hw, inv](TensorNode& self) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    double* gx = x.node()->grad.data();
    const double* sg = self.grad.data();
    for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
      double g = sg[nc] * inv;
      double* plane = gx + nc * hw;
      for (int64_t i = 0; i < hw; ++i) plane[i] += g;
    }
  });
}

// ------------------------------------------------------------ normalization

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  int c = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != c || bias.rank() != 1 ||
      bias.dim(0) != c)
    throw ShapeError("layer_norm: affine shape mismatch");
  int64_t rows = x.numel() / c;
  std::vector<double> v(static_cast<size_t>(x.numel()));
  const double *px = x.data(), *pg = gain.data(), *pb = bias.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = px + r * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= c;
    double inv = 1.0 / std::sqrt(var + eps);
    double* out = v.data() + r * c;
    for (int j = 0; j < c; ++j) out[j] = pg[j] * (row[j] - mu) * inv + pb[j];
  }
  return make_op(
      x.shape(), std::move(v), {x, gain, bias},
      [x, gain, bias, rows, c, eps](TensorNode& self) {
        const double *px = x.data(), *pg = gain.data();
        const double* sg = self.grad.data();
        bool need_dx = x.requires_grad();
        bool need_dg = gain.requires_grad();
        bool need_db = bias.requires_grad();
        if (need_dx) x.node()->ensure_grad();
        if (need_dg) gain.node()->ensure_grad();
        if (need_db) bias.node()->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const double* row = px + r * c;
          const double* g = sg + r * c;
          double mu = 0.0;
          for (int j = 0; j < c; ++j) mu += row[j];
          mu /= c;
          double var = 0.0;
          for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
          var /= c;
          double inv = 1.0 / std::sqrt(var + eps);
          if (need_dg || need_db) {
            double* gg = need_dg ? gain.node()->grad.data() : nullptr;
            double* gb = need_db ? bias.node()->grad.data() : nullptr;
            for (int j = 0; j < c; ++j) {
              if (gg) gg[j] += g[j] * (row[j] - mu) * inv;
              if (gb) gb[j] += g[j];
            }
          }
          if (need_dx) {
            double sum_dxh = 0.0, sum_dxh_xc = 0.0;
            for (int j = 0; j < c; ++j) {
              double dxh = g[j] * pg[j];
              sum_dxh += dxh;
              sum_dxh_xc += dxh * (row[j] - mu);
            }
            double* gx = x.node()->grad.data() + r * c;
            for (int j = 0; j < c; ++j) {
              double xc = row[j] - mu;
              double dxh = g[j] * pg[j];
              gx[j] += inv * (dxh - sum_dxh / c - xc * inv * inv * sum_dxh_xc / c);
            }
          }
        }
      });
}

Tensor softmax_lastdim(const Tensor& x) {
  int c = x.dim(x.rank() - 1);
  int64_t rows = x.numel() / c;
  std::vector<double> v(static_cast<size_t>(x.numel()));
  const double* px = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = px + r * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    double* out = v.data() + r * c;
    for (int j = 0; j < c; ++j) {
      out[j] = std::exp(row[j] - mx);
      s += out[j];
    }
    for (int j = 0; j < c; ++j) out[j] /= s;
  }
  return make_op(x.shape(), std::move(v), {x}, [x, rows, c](TensorNode& self) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    double* gx = x.node()->grad.data();
    const double* y = self.value.data();
    const double* g = self.grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
      for (int j = 0; j < c; ++j)
        gx[r * c + j] += (g[r * c + j] - dot) * y[r * c + j];
    }
  });
}

Tensor log_softmax_lastdim(const Tensor& x) {
  int c = x.dim(x.rank() - 1);
  int64_t rows = x.numel() / c;
  std::vector<double> v(static_cast<size_t>(x.numel()));
  const double* px = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = px + r * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    double lse = mx + std::log(s);
    double* out = v.data() + r * c;
    for (int j = 0; j < c; ++j) out[j] = row[j] - lse;
  }
  return make_op(x.shape(), std::move(v), {x}, [x, rows, c](TensorNode& self) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    double* gx = x.node()->grad.data();
    const double* y = self.value.data();
    const double* g = self.grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (int j = 0; j < c; ++j) gs += g[r * c + j];
      for (int j = 0; j < c; ++j)
        gx[r * c + j] += g[r * c + j] - std::exp(y[r * c + j]) * gs;
    }
  });
}

// ------------------------------------------------------------ broadcasting

Tensor scale_channels(const Tensor& x, const Tensor& g) {
  if (x.rank() != 4 || g.rank() != 2 || g.dim(0) != x.dim(0) ||
      g.dim(1) != x.dim(1))
    throw ShapeError("scale_channels: expected x [N,C,H,W], g [N,C]");
  int n = x.dim(0), c = x.dim(1);
  int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  std::vector<double> v(static_cast<size_t>(x.numel()));
  const double *px = x.data(), *pgv = g.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
    double s = pgv[nc];
    const double* src = px + nc * hw;
    double* dst = v.data() + nc * hw;
    for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] * s;
  }
  return make_op(x.shape(), std::move(v), {x, g}, [x, g, n, c, hw](TensorNode& self) {
    const double* sg = self.grad.data();
    if (x.requires_grad()) {
      x.node()->ensure_grad();
      double* gx = x.node()->grad.data();
      const double* pgv = g.data();
      for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
        double s = pgv[nc];
        const double* srcg = sg + nc * hw;
        double* dst = gx + nc * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] += srcg[i] * s;
      }
    }
    if (g.requires_grad()) {
      g.node()->ensure_grad();
      double* gg = g.node()->grad.data();
      const double* px2 = x.data();
      for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
        const double* srcg = sg + nc * hw;
        const double* srcx = px2 + nc * hw;
        double s = 0.0;
        for (int64_t i = 0; i < hw; ++i) s += srcg[i] * srcx[i];
        gg[nc] += s;
      }
    }
  });
}

Tensor add_bias_bht(const Tensor& scores, const Tensor& bias) {
  if (scores.rank() != 4 || bias.rank() != 3 || scores.dim(1) != bias.dim(0) ||
      scores.dim(2) != bias.dim(1) || scores.dim(3) != bias.dim(2))
    throw ShapeError("add_bias_bht: incompatible shapes");
  int b = scores.dim(0);
  int64_t inner = bias.numel();
  std::vector<double> v(static_cast<size_t>(scores.numel()));
  const double *ps = scores.data(), *pb = bias.data();
  for (int i = 0; i < b; ++i)
    for (int64_t j = 0; j < inner; ++j)
      v[static_cast<size_t>(i * inner + j)] = ps[i * inner + j] + pb[j];
  return make_op(scores.shape(), std::move(v), {scores, bias},
                 [scores, bias, b, inner](TensorNode& self) {
                   if (scores.requires_grad()) accum(scores, self.grad);
                   if (bias.requires_grad()) {
                     bias.node()->ensure_grad();
                     double* g = bias.node()->grad.data();
                     const double* sg = self.grad.data();
                     for (int i = 0; i < b; ++i)
                       for (int64_t j = 0; j < inner; ++j) g[j] += sg[i * inner + j];
                   }
                 });
}

Tensor add_mask_bts(const Tensor& scores, const Tensor& mask) {
  if (scores.rank() != 4 || mask.rank() != 3 || scores.dim(0) != mask.dim(0) ||
      scores.dim(2) != mask.dim(1) || scores.dim(3) != mask.dim(2))
    throw ShapeError("add_mask_bts: incompatible shapes");
  if (mask.requires_grad())
    throw ValidationError("add_mask_bts: mask must not require grad");
  int b = scores.dim(0), hh = scores.dim(1);
  int64_t ts = static_cast<int64_t>(scores.dim(2)) * scores.dim(3);
  std::vector<double> v(static_cast<size_t>(scores.numel()));
  const double *ps = scores.data(), *pm = mask.data();
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < hh; ++j)
      for (int64_t t = 0; t < ts; ++t)
        v[static_cast<size_t>((static_cast<int64_t>(i) * hh + j) * ts + t)] =
            ps[(static_cast<int64_t>(i) * hh + j) * ts + t] + pm[i * ts + t];
  return make_op(scores.shape(), std::move(v), {scores},
                 [scores](TensorNode& self) {
                   if (scores.requires_grad()) accum(scores, self.grad);
                 });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  if (x.rank() != 2) throw ShapeError("gather_rows: expected [R,C]");
  int r = x.dim(0), c = x.dim(1);
  if (static_cast<int>(idx.size()) != r)
    throw ShapeError("gather_rows: index count mismatch");
  for (int i : idx)
    if (i < 0 || i >= c) throw ValidationError("gather_rows: index out of range");
  std::vector<double> v(static_cast<size_t>(r));
  const double* px = x.data();
  for (int i = 0; i < r; ++i)
    v[static_cast<size_t>(i)] = px[static_cast<int64_t>(i) * c + idx[static_cast<size_t>(i)]];
  return make_op({r}, std::move(v), {x}, [x, idx, r, c](TensorNode& self) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    double* g = x.node()->grad.data();
    for (int i = 0; i < r; ++i)
      g[static_cast<int64_t>(i) * c + idx[static_cast<size_t>(i)]] += self.grad[static_cast<size_t>(i)];
  });
}

Tensor row_l2_normalize(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("row_l2_normalize: expected [R,C]");
  int r = x.dim(0), c = x.dim(1);
  std::vector<double> v(static_cast<size_t>(x.numel()));
  std::vector<double> norms(static_cast<size_t>(r));
  const double* px = x.data();
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += px[static_cast<int64_t>(i) * c + j] * px[static_cast<int64_t>(i) * c + j];
    double nv = std::sqrt(s);
    if (nv < 1e-30)
      throw ValidationError("row_l2_normalize: zero-norm row " + std::to_string(i));
    norms[static_cast<size_t>(i)] = nv;
    for (int j = 0; j < c; ++j)
      v[static_cast<size_t>(static_cast<int64_t>(i) * c + j)] = px[static_cast<int64_t>(i) * c + j] / nv;
  }
  return make_op(x.shape(), std::move(v), {x}, [x, norms, r, c](TensorNode& self) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    double* g = x.node()->grad.data();
    const double* y = self.value.data();
    const double* sg = self.grad.data();
    for (int i = 0; i < r; ++i) {
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += sg[static_cast<int64_t>(i) * c + j] * y[static_cast<int64_t>(i) * c + j];
      double inv = 1.0 / norms[static_cast<size_t>(i)];
      for (int j = 0; j < c; ++j)
        g[static_cast<int64_t>(i) * c + j] +=
            (sg[static_cast<int64_t>(i) * c + j] - dot * y[static_cast<int64_t>(i) * c + j]) * inv;
    }
  });
}

Tensor index_select_lastdim(const Tensor& x, const std::vector<int>& idx) {
  if (x.rank() != 2) throw ShapeError("index_select_lastdim: expected [R,D]");
  int r = x.dim(0), d = x.dim(1);
  int m = static_cast<int>(idx.size());
  for (int i : idx)
    if (i < 0 || i >= d)
      throw ValidationError("index_select_lastdim: index out of range");
  std::vector<double> v(static_cast<size_t>(r) * m);
  const double* px = x.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < m; ++j)
      v[static_cast<size_t>(static_cast<int64_t>(i) * m + j)] =
          px[static_cast<int64_t>(i) * d + idx[static_cast<size_t>(j)]];
  return make_op({r, m}, std::move(v), {x}, [x, idx, r, d, m](TensorNode& self) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    double* g = x.node()->grad.data();
    const double* sg = self.grad.data();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < m; ++j)
        g[static_cast<int64_t>(i) * d + idx[static_cast<size_t>(j)]] +=
            sg[static_cast<int64_t>(i) * m + j];
  });
}

}  // namespace vqe
